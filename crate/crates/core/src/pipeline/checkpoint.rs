use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_u32, Tensor};

use super::config::{config_hash, TrainConfig};
use super::optim::AdamState;

const MAGIC: &[u8; 8] = b"GLSMCKPT";
const VERSION: u32 = 1;

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: [u8; 32],
    pub seed: u64,
    /// Completed epochs.
    pub epochs_done: usize,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor<f32>]) -> Result<()> {
    w.write_all(&(ts.len() as u32).to_le_bytes())?;
    ts.iter().try_for_each(|t| t.write_to(w))
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor<f32>>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| Tensor::read_from(r)).collect()
}

impl Checkpoint {
    /// `magic, version, hash, seed, epochs, JSON config, registry, Adam step, m, v`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.epochs_done as u64).to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        self.params.write_to(w)?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        write_tensors(w, &self.adam.m)?;
        write_tensors(w, &self.adam.v)
    }

    /// Reads a checkpoint and checks that its hash matches its own model
    /// configuration under this build.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let seed = read_u64(r)?;
        let epochs_done = read_u64(r)? as usize;
        let len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg)?;
        let config: TrainConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        if super::config::config_hash(&config.model) != config_hash {
            return Err(Error::Config("checkpoint config hash does not match this build".into()));
        }
        let params = ParamStore::read_from(r)?;
        let step = read_u64(r)?;
        let (m, v) = (read_tensors(r)?, read_tensors(r)?);
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        Ok(Checkpoint { config, config_hash, seed, epochs_done, params, adam: AdamState { m, v, step } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a torn file
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        self.write_to(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Fails with a configuration error unless `cfg` describes the same model.
    pub fn check_model(&self, cfg: &TrainConfig) -> Result<()> {
        if config_hash(&cfg.model) != self.config_hash {
            return Err(Error::Config("model configuration differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = TrainConfig::default();
        let mut params = ParamStore::new();
        params.register("a", Tensor::full(&[2, 3], 0.5));
        params.register("b.c", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = AdamState::new(params.values());
        adam.step = 7;
        adam.m[1].data_mut()[0] = 0.25;
        Checkpoint { config_hash: config_hash(&config.model), config, seed: 3, epochs_done: 2, params, adam }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!((back.seed, back.epochs_done), (3, 2));
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.params.values(), c.params.values());
        assert_eq!(back.params.name(back.params.find("b.c").unwrap()), "b.c");
    }

    #[test]
    fn corrupted_hash_is_a_config_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[12] ^= 1;
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Config(_))));
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn different_model_is_rejected() {
        let c = sample();
        let mut other = TrainConfig::default();
        other.model.gsm_blocks = 1;
        assert!(c.check_model(&c.config).is_ok());
        assert!(matches!(c.check_model(&other), Err(Error::Config(_))));
    }
}
