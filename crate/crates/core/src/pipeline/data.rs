use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::clip::{build_clip, BBox, ClipSpec};
use super::encoder::{StubEncoder, PATCH};

/// Blob motion: uniform initial velocity in `[-speed, speed]²` px/frame plus
/// Gaussian jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    pub speed: f64,
    pub jitter: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Motion { speed: 2.0, jitter: 0.5 }
    }
}

/// Everything that shapes one synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub keypoints: usize,
    /// Feature grid; images are four times larger on each axis.
    pub grid: (usize, usize),
    pub clip: ClipSpec,
    pub motion: Motion,
    /// Heatmap spread, in grid cells.
    pub sigma: f64,
    /// Blob radius, in image pixels.
    pub radius: f64,
    /// Hide one blob in the center frame.
    pub occlusion: bool,
    /// Length of the source video the clip is cut from.
    pub video_frames: usize,
    pub encoder: StubEncoder,
}

/// A rendered clip with its center-frame keypoints in crop pixels `(y, x)`.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub frames: Vec<Tensor<f32>>,
    pub keypoints: Vec<[f64; 2]>,
    pub hidden: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// `[T, h, w, Din]`
    pub features: Tensor<f32>,
    /// `[K, h, w]`, unnormalized Gaussians.
    pub heatmaps: Tensor<f32>,
    /// Center-frame keypoints in grid cells `(y, x)`.
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

fn palette(k: usize, count: usize) -> [f32; 3] {
    // evenly spaced hues at full saturation
    let hue = 6.0 * k as f32 / count as f32;
    let f = |n: f32| {
        let t = (n + hue) % 6.0;
        1.0 - (t.min(4.0 - t).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Image pixel centre → grid cell coordinate.
pub fn pixel_to_grid(p: f64) -> f64 {
    (p - (PATCH as f64 - 1.0) / 2.0) / PATCH as f64
}

/// `[h, w]` Gaussian with peak 1 at the integer cell `(cy, cx)`.
pub fn gaussian_map(h: usize, w: usize, cy: usize, cx: usize, sigma: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
            out.push((-d2 / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    out
}

pub fn synth_clip<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<SyntheticClip> {
    let (gh, gw) = spec.grid;
    let (ih, iw) = (gh * PATCH, gw * PATCH);
    let margin = 16.0;
    let (ch, cw) = (ih as f64 + 2.0 * margin, iw as f64 + 2.0 * margin);
    // the enlarged box covers exactly one crop
    let bh = ih as f64 / spec.clip.enlarge;
    let bw = iw as f64 / spec.clip.enlarge;
    let shift = |r: &mut R| r.gen_range(-4.0..4.0);
    let bbox = BBox::new((cw - bw) / 2.0 + shift(rng), (ch - bh) / 2.0 + shift(rng), bw, bh);

    let pad = spec.radius.min(bw / 4.0).min(bh / 4.0);
    let (lo_y, hi_y) = (bbox.y + pad, bbox.y + bbox.h - pad);
    let (lo_x, hi_x) = (bbox.x + pad, bbox.x + bbox.w - pad);
    let jitter = Normal::new(0.0, spec.motion.jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let k = spec.keypoints;
    let mut tracks = vec![Vec::with_capacity(spec.video_frames); k];
    for track in &mut tracks {
        let mut p = [rng.gen_range(lo_y..hi_y), rng.gen_range(lo_x..hi_x)];
        let s = spec.motion.speed;
        let mut v = [rng.gen_range(-s..=s), rng.gen_range(-s..=s)];
        for _ in 0..spec.video_frames {
            track.push(p);
            for (axis, (lo, hi)) in [(lo_y, hi_y), (lo_x, hi_x)].into_iter().enumerate() {
                p[axis] += v[axis] + jitter.sample(rng);
                // bounce off the box
                if p[axis] < lo || p[axis] > hi {
                    v[axis] = -v[axis];
                    p[axis] = p[axis].clamp(lo, hi);
                }
            }
        }
    }
    let center = rng.gen_range(0..spec.video_frames);
    let hidden = spec.occlusion.then(|| rng.gen_range(0..k));

    let (rows, cols) = (ch as usize, cw as usize);
    let r2 = 2.0 * spec.radius * spec.radius;
    let video: Vec<Tensor<f32>> = (0..spec.video_frames)
        .map(|f| {
            let mut img = Tensor::<f32>::zeros(&[rows, cols, 3]);
            for (j, track) in tracks.iter().enumerate() {
                if f == center && hidden == Some(j) {
                    continue;
                }
                let [py, px] = track[f];
                let color = palette(j, k);
                let reach = (3.0 * spec.radius).ceil() as isize;
                for y in (py as isize - reach).max(0)..(py as isize + reach + 1).min(rows as isize) {
                    for x in (px as isize - reach).max(0)..(px as isize + reach + 1).min(cols as isize) {
                        let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                        let a = (-d2 / r2).exp() as f32;
                        let o = (y as usize * cols + x as usize) * 3;
                        for (c, &v) in color.iter().enumerate() {
                            let p = &mut img.data_mut()[o + c];
                            *p = p.max(a * v);
                        }
                    }
                }
            }
            img
        })
        .collect();
    let frames = build_clip(&video, center, bbox, &spec.clip, (ih, iw))?;
    let crop = bbox.enlarged(spec.clip.enlarge);
    let keypoints = tracks.iter().map(|t| [t[center][0] - crop.y, t[center][1] - crop.x]).collect();
    Ok(SyntheticClip { frames, keypoints, hidden })
}

impl SyntheticSample {
    pub fn from_clip(clip: &SyntheticClip, spec: &SynthSpec) -> Result<Self> {
        let (h, w) = spec.grid;
        let features = spec.encoder.encode(&clip.frames)?;
        let mut maps = Vec::with_capacity(clip.keypoints.len() * h * w);
        let mut keypoints = Vec::with_capacity(clip.keypoints.len());
        let mut visible = Vec::with_capacity(clip.keypoints.len());
        for &[py, px] in &clip.keypoints {
            let g = [pixel_to_grid(py), pixel_to_grid(px)];
            let inside = (-0.5..h as f64 - 0.5).contains(&g[0]) && (-0.5..w as f64 - 0.5).contains(&g[1]);
            let cy = g[0].round().clamp(0.0, h as f64 - 1.0) as usize;
            let cx = g[1].round().clamp(0.0, w as f64 - 1.0) as usize;
            if inside {
                maps.extend(gaussian_map(h, w, cy, cx, spec.sigma));
            } else {
                maps.extend(std::iter::repeat(0.0).take(h * w));
            }
            keypoints.push(g);
            visible.push(inside);
        }
        let heatmaps = Tensor::new(&[clip.keypoints.len(), h, w], maps)?;
        Ok(SyntheticSample { features, heatmaps, keypoints, visible })
    }
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(spec: &SynthSpec, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 || spec.keypoints == 0 || spec.video_frames == 0 {
        return Err(Error::Config(format!("dataset needs n, K, and video length ≥ 1 (n = {n}, K = {})", spec.keypoints)));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            SyntheticSample::from_clip(&synth_clip(spec, &mut rng)?, spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(occlusion: bool) -> SynthSpec {
        SynthSpec {
            keypoints: 3,
            grid: (8, 6),
            clip: ClipSpec::default(),
            motion: Motion::default(),
            sigma: 2.0,
            radius: 3.0,
            occlusion,
            video_frames: 7,
            encoder: StubEncoder::new(3, 8, 0),
        }
    }

    #[test]
    fn peak_is_one_at_the_keypoint_and_exp_minus_two_at_two_sigma() {
        let m = gaussian_map(9, 9, 4, 4, 2.0);
        assert_eq!(m[4 * 9 + 4], 1.0);
        assert!((m[4 * 9 + 8] as f64 - (-2f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn visible_maps_peak_at_the_rounded_keypoint() {
        for s in synth_dataset(&spec(false), 10, 3).unwrap() {
            assert_eq!(s.features.shape(), &[5, 8, 6, 8]);
            for (k, kp) in s.keypoints.iter().enumerate() {
                assert!(s.visible[k]);
                let map = &s.heatmaps.data()[k * 48..(k + 1) * 48];
                let best = map.iter().enumerate().fold(0, |b, (i, &v)| if v > map[b] { i } else { b });
                assert_eq!(map[best], 1.0);
                assert_eq!((best / 6, best % 6), (kp[0].round() as usize, kp[1].round() as usize));
            }
        }
    }

    #[test]
    fn occluded_blob_is_absent_from_the_center_frame_but_labelled() {
        let s = spec(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = synth_clip(&s, &mut rng).unwrap();
        let hidden = clip.hidden.unwrap();
        let color = palette(hidden, 3);
        let [py, px] = clip.keypoints[hidden];
        let center = &clip.frames[s.clip.center()];
        let (y, x) = (py.round() as usize, px.round() as usize);
        // other blobs may overlap, so compare against the blob's own color
        let pix: Vec<f32> = (0..3).map(|c| center.at(&[y, x, c])).collect();
        let matches_own = pix.iter().zip(color).all(|(&p, c)| (p - c).abs() < 0.05);
        assert!(!matches_own, "hidden blob still drawn: {pix:?}");
        let sample = SyntheticSample::from_clip(&clip, &s).unwrap();
        assert!(sample.visible[hidden]);
        assert_eq!(sample.heatmaps.data()[hidden * 48..(hidden + 1) * 48].iter().cloned().fold(0.0, f32::max), 1.0);
    }

    #[test]
    fn samples_are_reproducible_per_index() {
        let a = synth_dataset(&spec(true), 4, 9).unwrap();
        let b = synth_dataset(&spec(true), 6, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features.data(), y.features.data());
            assert_eq!(x.keypoints, y.keypoints);
        }
    }

    #[test]
    fn palette_colors_differ() {
        let c: Vec<_> = (0..5).map(|k| palette(k, 5)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(c[i].iter().zip(&c[j]).any(|(a, b)| (a - b).abs() > 0.3));
            }
        }
    }
}
