use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};

use super::clip::ClipSpec;
use super::data::{Motion, SynthSpec};
use super::encoder::StubEncoder;
use super::optim::{AdamWConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_clips: usize,
    pub eval_clips: usize,
    pub seed: u64,
    /// Seed of the held-out split.
    pub eval_seed: u64,
    pub clip: ClipSpec,
    pub motion: Motion,
    pub sigma: f64,
    pub radius: f64,
    pub occlusion: bool,
    pub video_frames: usize,
    pub encoder_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_clips: 64,
            eval_clips: 32,
            seed: 0,
            eval_seed: 1,
            clip: ClipSpec::default(),
            motion: Motion::default(),
            sigma: 2.0,
            radius: 5.0,
            occlusion: true,
            video_frames: 9,
            encoder_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, model: &ModelConfig) -> SynthSpec {
        SynthSpec {
            keypoints: model.keypoints,
            grid: (model.height, model.width),
            clip: self.clip,
            motion: self.motion,
            sigma: self.sigma,
            radius: self.radius,
            occlusion: self.occlusion,
            video_frames: self.video_frames,
            encoder: StubEncoder::new(3, model.in_channels, self.encoder_seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// PCK radius as a fraction of the heatmap diagonal.
    pub pck_threshold: f64,
    /// Stop after the first epoch that ends past this many seconds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { epochs: 20, batch_size: 4, seed: 0, pck_threshold: 0.2, time_budget_secs: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.schedule.validate()?;
        let d = &self.data;
        let t = &self.train;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.model.frames != d.clip.frames() {
            return fail(format!(
                "model.frames ({}) must equal 2 * data.clip.delta + 1 ({})",
                self.model.frames,
                d.clip.frames()
            ));
        }
        if d.train_clips == 0 || d.eval_clips == 0 || d.video_frames == 0 {
            return fail("data.train_clips, data.eval_clips and data.video_frames must be positive".into());
        }
        if !(d.sigma > 0.0 && d.radius > 0.0 && d.clip.enlarge >= 1.0) {
            return fail("data.sigma and data.radius must be positive and data.clip.enlarge at least 1".into());
        }
        if !(d.motion.speed >= 0.0 && d.motion.jitter >= 0.0) {
            return fail("data.motion values must be non-negative".into());
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return fail("train.epochs and train.batch_size must be positive".into());
        }
        if !(t.pck_threshold > 0.0) {
            return fail("train.pck_threshold must be positive".into());
        }
        if t.time_budget_secs.is_some_and(|b| !(b > 0.0)) {
            return fail("train.time_budget_secs must be positive".into());
        }
        let a = &self.optim.adamw;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return fail(format!("optim.adamw out of range: {a:?}"));
        }
        Ok(())
    }
}

/// SHA-256 over the crate version and the model configuration, identifying
/// which parameter registry a checkpoint belongs to.
pub fn config_hash(model: &ModelConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.train.time_budget_secs = Some(600.0);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg = TrainConfig::from_toml("[model]\nchannels = 32\n[train]\nepochs = 3\n").unwrap();
        assert_eq!((cfg.model.channels, cfg.train.epochs, cfg.model.state), (32, 3, 16));
        assert!(matches!(TrainConfig::from_toml("[model]\nchanels = 32\n"), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_frames_are_reported() {
        let mut cfg = TrainConfig::default();
        cfg.model.frames = 3;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.frames"), "{err}");
    }

    #[test]
    fn hash_tracks_the_model_configuration() {
        let a = ModelConfig::default();
        let b = ModelConfig { lrm_blocks: 0, ..ModelConfig::default() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
