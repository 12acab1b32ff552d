use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_sample;
use crate::tensor::Tensor;

/// Temporal span and crop enlargement of one input clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSpec {
    /// Frames on each side of the center frame.
    pub delta: usize,
    pub enlarge: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec { delta: 2, enlarge: 1.25 }
    }
}

impl ClipSpec {
    pub fn frames(&self) -> usize {
        2 * self.delta + 1
    }

    pub fn center(&self) -> usize {
        self.delta
    }
}

/// Axis-aligned box: top-left corner and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Scales the extent about the center.
    pub fn enlarged(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }
}

/// Crops `T = 2δ+1` frames around `center` to the enlarged box, resampled
/// to `out = (rows, cols)`. Indices past either end of the video repeat the
/// edge frame. Frames are `[H, W, C]`; the box may extend past the image,
/// where the crop reads zeros.
pub fn build_clip(
    video: &[Tensor<f32>],
    center: usize,
    bbox: BBox,
    spec: &ClipSpec,
    out: (usize, usize),
) -> Result<Vec<Tensor<f32>>> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) || !(bbox.x.is_finite() && bbox.y.is_finite()) {
        return Err(Error::Input(format!("empty or invalid box {bbox:?}")));
    }
    if video.is_empty() || center >= video.len() {
        return Err(Error::Input(format!("center frame {center} of a {}-frame video", video.len())));
    }
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::Input(format!("crop size {out:?}")));
    }
    let shape = video[0].shape();
    if shape.len() != 3 || video.iter().any(|f| f.shape() != shape) {
        return Err(Error::Input("video frames must share one [H, W, C] shape".into()));
    }
    let c = shape[2];
    let crop = bbox.enlarged(spec.enlarge);
    let (sy, sx) = (crop.h / out.0 as f64, crop.w / out.1 as f64);
    let last = video.len() as isize - 1;
    (0..spec.frames())
        .map(|i| {
            let idx = (center as isize + i as isize - spec.delta as isize).clamp(0, last) as usize;
            let frame = &video[idx];
            let mut data = Vec::with_capacity(out.0 * out.1 * c);
            for r in 0..out.0 {
                for q in 0..out.1 {
                    // pixel centers sit at integer coordinates
                    let y = crop.y + (r as f64 + 0.5) * sy - 0.5;
                    let x = crop.x + (q as f64 + 0.5) * sx - 0.5;
                    data.extend_from_slice(bilinear_sample(frame, y as f32, x as f32)?.data());
                }
            }
            Tensor::new(&[out.0, out.1, c], data)
        })
        .collect()
}
