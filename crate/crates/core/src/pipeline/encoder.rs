use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::linear;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;

/// Frozen stand-in for a pretrained image encoder: every 4×4 patch is
/// flattened, averaged through a fixed random projection, and emitted as a
/// `Din`-channel feature at quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StubEncoder {
    /// `[PATCH² · C, Din]`
    proj: Tensor<f32>,
    channels: usize,
}

impl StubEncoder {
    pub fn new(channels: usize, out: usize, seed: u64) -> Self {
        let k = PATCH * PATCH * channels;
        // unit-variance rows scaled by 1/patch-area: a randomly weighted average
        let std = (k as f64).sqrt() / (PATCH * PATCH) as f64;
        let proj = Tensor::randn(&[k, out], std, &mut ChaCha8Rng::seed_from_u64(seed));
        StubEncoder { proj, channels }
    }

    pub fn out_channels(&self) -> usize {
        self.proj.shape()[1]
    }

    /// `T` frames of `[H, W, C]` → `[T, H/4, W/4, Din]`.
    pub fn encode(&self, clip: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let Some(first) = clip.first() else {
            return Err(Error::Input("empty clip".into()));
        };
        let s = first.shape().to_vec();
        if s.len() != 3 || s[2] != self.channels || s[0] % PATCH != 0 || s[1] % PATCH != 0 {
            return Err(Error::Input(format!("frame {s:?} is not [4k, 4m, {}]", self.channels)));
        }
        if clip.iter().any(|f| f.shape() != s) {
            return Err(Error::Input("clip frames differ in shape".into()));
        }
        let (h, w, c) = (s[0] / PATCH, s[1] / PATCH, self.channels);
        let k = PATCH * PATCH * c;
        let mut patches = Vec::with_capacity(clip.len() * h * w * k);
        for f in clip {
            for py in 0..h {
                for px in 0..w {
                    for dy in 0..PATCH {
                        let row = (py * PATCH + dy) * s[1] + px * PATCH;
                        patches.extend_from_slice(&f.data()[row * c..(row + PATCH) * c]);
                    }
                }
            }
        }
        let patches = Tensor::new(&[clip.len() * h * w, k], patches)?;
        linear(&patches, &self.proj, None)?.reshape(&[clip.len(), h, w, self.out_channels()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3).map(|_| Tensor::uniform(&[16, 12, 3], 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn quarter_resolution() {
        let f = StubEncoder::new(3, 32, 0).encode(&clip(1)).unwrap();
        assert_eq!(f.shape(), &[3, 4, 3, 32]);
    }

    #[test]
    fn same_seed_same_features() {
        let c = clip(2);
        let a = StubEncoder::new(3, 32, 7).encode(&c).unwrap();
        let b = StubEncoder::new(3, 32, 7).encode(&c).unwrap();
        assert_eq!(a.data(), b.data());
        let other = StubEncoder::new(3, 32, 8).encode(&c).unwrap();
        assert_ne!(a.data(), other.data());
    }

    #[test]
    fn distinct_clips_give_distinct_features() {
        let enc = StubEncoder::new(3, 32, 3);
        for i in 0..100 {
            let a = enc.encode(&clip(2 * i)).unwrap();
            let b = enc.encode(&clip(2 * i + 1)).unwrap();
            assert!(a.max_abs_diff(&b) > 1e-4, "pair {i}");
        }
    }

    #[test]
    fn patch_offsets_are_distinguished() {
        // a single bright pixel at two positions inside the same patch
        let enc = StubEncoder::new(1, 32, 4);
        let mut a = Tensor::zeros(&[4, 4, 1]);
        let mut b = a.clone();
        a.set(&[0, 0, 0], 1.0);
        b.set(&[3, 3, 0], 1.0);
        assert!(enc.encode(&[a]).unwrap().max_abs_diff(&enc.encode(&[b]).unwrap()) > 1e-3);
    }

    #[test]
    fn ragged_frames_are_rejected() {
        let enc = StubEncoder::new(3, 8, 0);
        assert!(enc.encode(&[Tensor::zeros(&[6, 8, 3])]).is_err());
        assert!(enc.encode(&[]).is_err());
    }
}
