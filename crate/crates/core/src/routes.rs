//! Bijections between a `T × h × w` grid and 1D token sequences.
//!
//! Cells are addressed by their row-major offset `(t·h + y)·w + x` in a
//! channel-last `[T, h, w, D]` feature sequence, so every layout is a plain
//! permutation of rows and applying it is a row gather.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{gather_rows, ZERO_ROW};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Grid { t, h, w }
    }

    pub fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn cell(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }

    pub fn coords(&self, cell: usize) -> (usize, usize, usize) {
        (cell / (self.h * self.w), cell / self.w % self.h, cell % self.w)
    }

    /// Grid and channel count of a `[T, h, w, D]` sequence.
    pub fn of(seq: &[usize]) -> Result<(Grid, usize)> {
        match *seq {
            [t, h, w, d] => Ok((Grid::new(t, h, w), d)),
            _ => Err(Error::dim("routes", format!("expected [T, h, w, D], got {seq:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouteKind {
    /// Row-major raster of the panorama of stacked frames.
    UnifiedH,
    /// Column-major raster of the same panorama.
    SpaceV,
    /// Each pixel visited across all frames before moving on.
    TimeDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RouteId {
    pub kind: RouteKind,
    pub dir: Direction,
}

impl RouteId {
    /// The six routes in canonical order: the three forward kinds, then their
    /// reversals.
    pub const ALL: [RouteId; 6] = [
        RouteId { kind: RouteKind::UnifiedH, dir: Direction::Forward },
        RouteId { kind: RouteKind::SpaceV, dir: Direction::Forward },
        RouteId { kind: RouteKind::TimeDepth, dir: Direction::Forward },
        RouteId { kind: RouteKind::UnifiedH, dir: Direction::Reverse },
        RouteId { kind: RouteKind::SpaceV, dir: Direction::Reverse },
        RouteId { kind: RouteKind::TimeDepth, dir: Direction::Reverse },
    ];

    /// 1-based position in [`RouteId::ALL`].
    pub fn number(&self) -> usize {
        RouteId::ALL.iter().position(|r| r == self).unwrap() + 1
    }

    pub fn name(&self) -> String {
        let kind = match self.kind {
            RouteKind::UnifiedH => "unified-h",
            RouteKind::SpaceV => "space-v",
            RouteKind::TimeDepth => "time-depth",
        };
        match self.dir {
            Direction::Forward => kind.to_string(),
            Direction::Reverse => format!("{kind}-rev"),
        }
    }
}

impl std::str::FromStr for RouteId {
    type Err = Error;

    /// Accepts the 1-based number or the name, e.g. `3` or `time-depth`.
    fn from_str(s: &str) -> Result<Self> {
        RouteId::ALL
            .into_iter()
            .find(|r| r.name() == s || r.number().to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown route {s:?}; expected 1-6 or a name like space-v-rev")))
    }
}

/// Axis along which frames are stacked into the panorama.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stacking {
    /// `(T·h) × w`
    #[default]
    Vertical,
    /// `h × (T·w)`
    Horizontal,
}

/// Pixel order of the time-depth route; time is always the fastest axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelOrder {
    #[default]
    RowMajor,
    ColumnMajor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteOptions {
    pub stacking: Stacking,
    pub depth_order: PixelOrder,
}

/// Token position → grid cell for one route.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteLayout {
    pub id: RouteId,
    pub grid: Grid,
    perm: Arc<Vec<usize>>,
}

impl RouteLayout {
    pub fn new(id: RouteId, grid: Grid, opts: RouteOptions) -> Self {
        let Grid { t: tn, h, w } = grid;
        let mut perm = Vec::with_capacity(grid.cells());
        match (id.kind, opts.stacking) {
            (RouteKind::UnifiedH, Stacking::Vertical) => perm.extend(0..grid.cells()),
            (RouteKind::UnifiedH, Stacking::Horizontal) => {
                for y in 0..h {
                    for t in 0..tn {
                        perm.extend((0..w).map(|x| grid.cell(t, y, x)));
                    }
                }
            }
            (RouteKind::SpaceV, Stacking::Vertical) => {
                for x in 0..w {
                    for t in 0..tn {
                        perm.extend((0..h).map(|y| grid.cell(t, y, x)));
                    }
                }
            }
            (RouteKind::SpaceV, Stacking::Horizontal) => {
                for t in 0..tn {
                    for x in 0..w {
                        perm.extend((0..h).map(|y| grid.cell(t, y, x)));
                    }
                }
            }
            (RouteKind::TimeDepth, _) => {
                let pixels: Vec<(usize, usize)> = match opts.depth_order {
                    PixelOrder::RowMajor => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
                    PixelOrder::ColumnMajor => (0..w).flat_map(|x| (0..h).map(move |y| (y, x))).collect(),
                };
                for (y, x) in pixels {
                    perm.extend((0..tn).map(|t| grid.cell(t, y, x)));
                }
            }
        }
        if id.dir == Direction::Reverse {
            perm.reverse();
        }
        RouteLayout { id, grid, perm: Arc::new(perm) }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Grid cell read at each token position.
    pub fn perm(&self) -> &Arc<Vec<usize>> {
        &self.perm
    }

    /// `(t, y, x)` of the token at `pos`.
    pub fn coords(&self, pos: usize) -> (usize, usize, usize) {
        self.grid.coords(self.perm[pos])
    }

    /// Token position of each grid cell.
    pub fn inverse(&self) -> Arc<Vec<usize>> {
        let mut inv = vec![0; self.perm.len()];
        for (pos, &cell) in self.perm.iter().enumerate() {
            inv[cell] = pos;
        }
        Arc::new(inv)
    }

    /// Rows of the debug dump: `(token_index, t, y, x)`.
    pub fn rows(&self) -> impl Iterator<Item = [usize; 4]> + '_ {
        (0..self.len()).map(|i| {
            let (t, y, x) = self.coords(i);
            [i, t, y, x]
        })
    }
}

/// Whether `perm` visits every index below its length exactly once.
pub fn is_permutation(perm: &[usize]) -> bool {
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    sorted.iter().enumerate().all(|(i, &v)| i == v)
}

/// Reads `seq` (`[T, h, w, D]`) along one route, giving `[T·h·w, D]` tokens.
pub fn flatten_route<F: Real>(seq: &Tensor<F>, id: RouteId, opts: RouteOptions) -> Result<(Tensor<F>, RouteLayout)> {
    let (grid, d) = Grid::of(seq.shape())?;
    let layout = RouteLayout::new(id, grid, opts);
    Ok((gather_rows(seq, d, layout.perm())?, layout))
}

/// Writes route-ordered tokens back onto the grid.
pub fn invert_route<F: Real>(tokens: &Tensor<F>, layout: &RouteLayout) -> Result<Tensor<F>> {
    let Grid { t, h, w } = layout.grid;
    if tokens.rank() != 2 || tokens.shape()[0] != layout.len() {
        return Err(Error::Layout(format!("{:?} tokens for a layout of {}", tokens.shape(), layout.len())));
    }
    let d = tokens.shape()[1];
    gather_rows(tokens, d, &layout.inverse())?.reshape(&[t, h, w, d])
}

/// The six routes of `seq` in [`RouteId::ALL`] order.
pub fn enumerate_sts6d<F: Real>(seq: &Tensor<F>, opts: RouteOptions) -> Result<Vec<(Tensor<F>, RouteLayout)>> {
    RouteId::ALL.iter().map(|&id| flatten_route(seq, id, opts)).collect()
}

/// Spatial window extents; frames are zero-padded on the bottom and right when
/// they do not divide evenly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub wh: usize,
    pub ww: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { wh: 8, ww: 6 }
    }
}

impl WindowSpec {
    pub fn new(wh: usize, ww: usize) -> Result<Self> {
        if wh == 0 || ww == 0 {
            return Err(Error::Config(format!("window extents must be positive, got {wh}×{ww}")));
        }
        Ok(WindowSpec { wh, ww })
    }

    /// Windows along `(y, x)` for an `h × w` frame.
    pub fn counts(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.wh), w.div_ceil(self.ww))
    }
}

/// Where the tubelets of a partition came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub grid: Grid,
    pub spec: WindowSpec,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Placement {
    pub fn tubelets(&self) -> usize {
        self.rows * self.cols
    }

    /// Tokens per tubelet.
    pub fn tubelet_len(&self) -> usize {
        self.grid.t * self.spec.wh * self.spec.ww
    }
}

/// Windowed token order over all tubelets: tubelets in row-major window order,
/// each unrolled frame by frame as row-major rasters. Padding positions hold
/// [`ZERO_ROW`].
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: Grid,
    pub spec: WindowSpec,
    /// Tokens per tubelet, `T·wh·ww`.
    pub segment: usize,
    forward: Arc<Vec<usize>>,
    reverse: Arc<Vec<usize>>,
    back_forward: Arc<Vec<usize>>,
    back_reverse: Arc<Vec<usize>>,
}

impl WindowLayout {
    pub fn new(grid: Grid, spec: WindowSpec) -> Self {
        let Grid { t: tn, h, w } = grid;
        let (rows, cols) = spec.counts(h, w);
        let segment = tn * spec.wh * spec.ww;
        let mut forward = Vec::with_capacity(rows * cols * segment);
        for r in 0..rows {
            for c in 0..cols {
                for t in 0..tn {
                    for dy in 0..spec.wh {
                        for dx in 0..spec.ww {
                            let (y, x) = (r * spec.wh + dy, c * spec.ww + dx);
                            forward.push(if y < h && x < w { grid.cell(t, y, x) } else { ZERO_ROW });
                        }
                    }
                }
            }
        }
        let reverse: Vec<usize> = forward.chunks(segment).flat_map(|s| s.iter().rev().copied()).collect();
        let back = |order: &[usize]| {
            let mut inv = vec![0; grid.cells()];
            for (pos, &cell) in order.iter().enumerate() {
                if cell != ZERO_ROW {
                    inv[cell] = pos;
                }
            }
            Arc::new(inv)
        };
        WindowLayout {
            grid,
            spec,
            segment,
            back_forward: back(&forward),
            back_reverse: back(&reverse),
            forward: Arc::new(forward),
            reverse: Arc::new(reverse),
        }
    }

    /// Grid cell (or [`ZERO_ROW`]) read at each position of the forward scan.
    pub fn forward(&self) -> &Arc<Vec<usize>> {
        &self.forward
    }

    /// Same with every tubelet reversed.
    pub fn reverse(&self) -> &Arc<Vec<usize>> {
        &self.reverse
    }

    /// Scan position holding each grid cell, for the given direction.
    pub fn back(&self, dir: Direction) -> &Arc<Vec<usize>> {
        match dir {
            Direction::Forward => &self.back_forward,
            Direction::Reverse => &self.back_reverse,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Splits `[T, h, w, D]` into `[T, wh, ww, D]` tubelets in row-major window
/// order.
pub fn window_partition<F: Real>(seq: &Tensor<F>, spec: WindowSpec) -> Result<(Vec<Tensor<F>>, Placement)> {
    let spec = WindowSpec::new(spec.wh, spec.ww)?;
    let (grid, d) = Grid::of(seq.shape())?;
    let (rows, cols) = spec.counts(grid.h, grid.w);
    let layout = WindowLayout::new(grid, spec);
    let tokens = gather_rows(seq, d, layout.forward())?;
    let per = layout.segment * d;
    let tubelets = tokens
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(&[grid.t, spec.wh, spec.ww, d], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((tubelets, Placement { grid, spec, rows, cols, channels: d }))
}

/// Inverse of [`window_partition`]; padding is cropped.
pub fn window_merge<F: Real>(tubelets: &[Tensor<F>], placement: &Placement) -> Result<Tensor<F>> {
    let Placement { grid, spec, channels: d, .. } = *placement;
    let want = [grid.t, spec.wh, spec.ww, d];
    if tubelets.len() != placement.tubelets() || tubelets.iter().any(|t| t.shape() != want) {
        return Err(Error::Layout(format!(
            "expected {} tubelets of {want:?}, got {}",
            placement.tubelets(),
            tubelets.len()
        )));
    }
    let layout = WindowLayout::new(grid, spec);
    let mut flat = Vec::with_capacity(layout.len() * d);
    for t in tubelets {
        flat.extend_from_slice(t.data());
    }
    let tokens = Tensor::new(&[layout.len(), d], flat)?;
    gather_rows(&tokens, d, layout.back(Direction::Forward))?.reshape(&[grid.t, grid.h, grid.w, d])
}

/// Forward and reverse token sequences of one `[T, wh, ww, D]` tubelet.
pub fn wsts_scan_order<F: Real>(tubelet: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let (grid, d) = Grid::of(tubelet.shape())?;
    let forward = tubelet.clone().reshape(&[grid.cells(), d])?;
    let rev: Vec<usize> = (0..grid.cells()).rev().collect();
    let reverse = gather_rows(&forward, d, &rev)?;
    Ok((forward, reverse))
}

impl<F: Real> Tape<F> {
    /// Taped [`flatten_route`] for an already built layout.
    pub fn flatten_route(&mut self, seq: Var, layout: &RouteLayout) -> Result<Var> {
        let (grid, d) = Grid::of(self.shape(seq))?;
        if grid != layout.grid {
            return Err(Error::Layout(format!("{grid:?} against a layout for {:?}", layout.grid)));
        }
        self.gather_rows(seq, d, layout.perm().clone())
    }

    /// Taped [`invert_route`].
    pub fn invert_route(&mut self, tokens: Var, layout: &RouteLayout, inverse: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(tokens).to_vec();
        if s.len() != 2 || s[0] != layout.len() {
            return Err(Error::Layout(format!("{s:?} tokens for a layout of {}", layout.len())));
        }
        let Grid { t, h, w } = layout.grid;
        let g = self.gather_rows(tokens, s[1], inverse)?;
        self.reshape(g, &[t, h, w, s[1]])
    }
}
