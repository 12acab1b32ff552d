use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::{config_hash, TrainConfig};
use super::data::{synth_dataset, SyntheticSample};
use super::loss::heatmap_loss;
use super::metrics::PckTally;
use super::optim::{adamw_step, AdamState, StepOutcome};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch's forward passes.
    pub loss: f64,
    /// PCK of the same forward passes, before each update.
    pub pck: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub loss: f64,
    pub pck: PckTally,
}

/// Model, parameters, optimizer state and training data of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState,
    pub train_set: Vec<SyntheticSample>,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Model::new(&cfg.model, cfg.train.seed)?;
        let spec = cfg.data.spec(&cfg.model);
        let train_set = synth_dataset(&spec, cfg.data.train_clips, cfg.data.seed)?;
        let adam = AdamState::new(store.values());
        Ok(Trainer { cfg: cfg.clone(), model, store, adam, train_set, epoch: 0 })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        if ckpt.seed != ckpt.config.train.seed {
            return Err(Error::Format(format!("checkpoint seed {} vs config seed {}", ckpt.seed, ckpt.config.train.seed)));
        }
        t.store.load_from(&ckpt.params)?;
        let shapes_match = |m: &[Tensor<f32>]| m.iter().zip(t.store.values()).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match(&ckpt.adam.m) || !shapes_match(&ckpt.adam.v) {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        t.adam = ckpt.adam.clone();
        t.epoch = ckpt.epochs_done;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            config_hash: config_hash(&self.cfg.model),
            seed: self.cfg.train.seed,
            epochs_done: self.epoch,
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Sample order of `epoch`, a pure function of the seed and the epoch.
    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..self.train_set.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = self.cfg.optim.schedule.lr_at(epoch);
        let tau = self.cfg.train.pck_threshold;
        let mut tally = PckTally::new(self.cfg.model.keypoints);
        let (mut total, mut skipped) = (0.0, 0);
        let order = self.order(epoch);
        for batch in order.chunks(self.cfg.train.batch_size) {
            let mut grads: Vec<Tensor<f32>> = self.store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &i in batch {
                let s = &self.train_set[i];
                let mut tape = Tape::new();
                let p = self.store.bind(&mut tape);
                let x = tape.constant(s.features.clone());
                let pred = self.model.forward(&mut tape, &p, x)?;
                let loss = heatmap_loss(&mut tape, pred, &s.heatmaps, &s.visible)?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    let first = match tape.first_non_finite() {
                        Some((v, op)) => match p.vars().iter().position(|&b| b == v) {
                            Some(k) => format!("parameter {}", self.store.names()[k]),
                            None => format!("{op} (node {})", v.index()),
                        },
                        None => "none".into(),
                    };
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, sample {i}; first non-finite tensor: {first}"
                    )));
                }
                total += value;
                tally.add(tape.value(pred), &s.keypoints, &s.visible, tau)?;
                tape.backward(loss)?;
                for (acc, g) in grads.iter_mut().zip(self.store.grads(&tape, &p)) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
            if let StepOutcome::Skipped { .. } =
                adamw_step(self.store.values_mut(), &grads, &mut self.adam, lr, &self.cfg.optim.adamw)?
            {
                skipped += 1;
            }
        }
        self.epoch += 1;
        Ok(EpochMetrics { epoch, lr, loss: total / order.len() as f64, pck: tally.mean(), skipped_steps: skipped })
    }

    pub fn evaluate(&self, samples: &[SyntheticSample]) -> Result<EvalReport> {
        evaluate(&self.model, &self.store, samples, self.cfg.train.pck_threshold)
    }
}

/// Heatmaps `[K, h, w]` for one feature clip.
pub fn predict(model: &Model, store: &ParamStore<f32>, features: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(features.clone());
    let pred = model.forward(&mut tape, &p, x)?;
    Ok(tape.value(pred).clone())
}

/// Mean loss and PCK of `samples` under fixed parameters.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[SyntheticSample], tau: f64) -> Result<EvalReport> {
    let mut pck = PckTally::new(model.cfg.keypoints);
    let mut loss = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(s.features.clone());
        let pred = model.forward(&mut tape, &p, x)?;
        let l = heatmap_loss(&mut tape, pred, &s.heatmaps, &s.visible)?;
        loss += tape.value(l).item() as f64;
        pck.add(tape.value(pred), &s.keypoints, &s.visible, tau)?;
    }
    Ok(EvalReport { loss: loss / samples.len().max(1) as f64, pck })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    TimeBudget,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub stop: StopReason,
    pub seconds: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Runs epochs until `train.epochs` are done or the time budget is spent.
/// With `out`, appends one JSON line per epoch to `metrics.jsonl` and
/// rewrites `checkpoint.bin` after every epoch; a fresh run truncates the
/// log first.
pub fn train(
    mut trainer: Trainer,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            Some(if trainer.epoch == 0 {
                File::create(path)?
            } else {
                OpenOptions::new().create(true).append(true).open(path)?
            })
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut stop = StopReason::Completed;
    while trainer.epoch < trainer.cfg.train.epochs {
        let m = trainer.run_epoch()?;
        if let (Some(log), Some(dir)) = (log.as_mut(), out) {
            let line = serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(log, "{line}")?;
            trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        on_epoch(&m);
        metrics.push(m);
        if trainer.cfg.train.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() > b)
            && trainer.epoch < trainer.cfg.train.epochs
        {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    Ok(TrainOutcome { trainer, metrics, stop, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ModelConfig;
    use crate::pipeline::clip::ClipSpec;
    use crate::routes::WindowSpec;

    pub(crate) fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            in_channels: 8,
            channels: 8,
            state: 4,
            frames: 3,
            height: 8,
            width: 6,
            keypoints: 2,
            gsm_blocks: 1,
            lrm_blocks: 1,
            window: WindowSpec::new(4, 3).unwrap(),
            ..ModelConfig::default()
        };
        cfg.data.clip = ClipSpec { delta: 1, ..ClipSpec::default() };
        cfg.data.train_clips = 6;
        cfg.data.eval_clips = 4;
        cfg.data.radius = 3.0;
        cfg.train.epochs = 3;
        cfg.train.batch_size = 2;
        cfg.optim.schedule.base = 1e-2;
        cfg
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let a = train(Trainer::new(&tiny()).unwrap(), None, |_| {}).unwrap();
        let b = train(Trainer::new(&tiny()).unwrap(), None, |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.trainer.store.values(), b.trainer.store.values());
    }

    #[test]
    fn resuming_reproduces_the_next_epoch() {
        let full = train(Trainer::new(&tiny()).unwrap(), None, |_| {}).unwrap();
        let mut cfg = tiny();
        cfg.train.epochs = 2;
        let head = train(Trainer::new(&cfg).unwrap(), None, |_| {}).unwrap();
        let mut buf = Vec::new();
        head.trainer.checkpoint().write_to(&mut buf).unwrap();
        let mut ckpt = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        ckpt.config.train.epochs = 3;
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        let m = resumed.run_epoch().unwrap();
        assert_eq!(m.epoch, 2);
        assert!((m.loss - full.metrics[2].loss).abs() <= 1e-5);
    }

    #[test]
    fn non_finite_parameters_abort_with_a_diagnostic() {
        let mut t = Trainer::new(&tiny()).unwrap();
        let id = t.store.find("embed.proj.w").unwrap();
        t.store.get_mut(id).data_mut()[0] = f32::NAN;
        let err = t.run_epoch().unwrap_err();
        assert!(matches!(&err, Error::NonFinite(msg) if msg.contains("first non-finite tensor: parameter embed.proj.w")), "{err}");
    }

    #[test]
    fn time_budget_stops_early() {
        let mut cfg = tiny();
        cfg.train.time_budget_secs = Some(1e-9);
        let out = train(Trainer::new(&cfg).unwrap(), None, |_| {}).unwrap();
        assert_eq!((out.metrics.len(), out.stop), (1, StopReason::TimeBudget));
    }
}
