//! Model blocks and their assembly.
//!
//! Features flow `[T, h, w, Din]` → embeddings → global blocks → local
//! refinement blocks → head → `[K, h, w]` heatmaps. Every block maps
//! `[T, h, w, D]` to the same shape.

mod embed;
mod gsm;
mod layers;
mod lrm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::routes::{Grid, RouteId, RouteKind, RouteLayout, RouteOptions, WindowLayout, WindowSpec};
use crate::ssm::SsmInit;
use crate::tape::{Tape, Var};

pub use embed::{sincos_2d, Embeddings};
pub use gsm::{sts6d_apply, stmm_merge, ChannelAttention, GsmBlock, GsmShape, ModulationStage, RoutePlan, Stmm};
pub use layers::{merge_streams, Ffn, GatedStream, Init, Linear, Norm};
pub use lrm::{wsts_apply, DetectionHead, LrmBlock};

/// Which route kinds the global blocks scan (each with its reversal).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteSet {
    Unified,
    UnifiedSpace,
    #[default]
    All,
}

impl RouteSet {
    pub fn routes(&self) -> Vec<RouteId> {
        let kinds: &[RouteKind] = match self {
            RouteSet::Unified => &[RouteKind::UnifiedH],
            RouteSet::UnifiedSpace => &[RouteKind::UnifiedH, RouteKind::SpaceV],
            RouteSet::All => &[RouteKind::UnifiedH, RouteKind::SpaceV, RouteKind::TimeDepth],
        };
        RouteId::ALL.into_iter().filter(|r| kinds.contains(&r.kind)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder feature channels.
    pub in_channels: usize,
    pub channels: usize,
    pub state: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub keypoints: usize,
    pub gsm_blocks: usize,
    pub lrm_blocks: usize,
    /// Channel attention reduction.
    pub reduction: usize,
    /// FFN hidden width multiple.
    pub expansion: usize,
    pub window: WindowSpec,
    pub routes: RouteSet,
    pub stmm: bool,
    pub residual: bool,
    pub route_options: RouteOptions,
    pub ssm: SsmInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 32,
            channels: 64,
            state: 16,
            frames: 5,
            height: 32,
            width: 24,
            keypoints: 5,
            gsm_blocks: 4,
            lrm_blocks: 2,
            reduction: 4,
            expansion: 4,
            window: WindowSpec::default(),
            routes: RouteSet::All,
            stmm: true,
            residual: true,
            route_options: RouteOptions::default(),
            ssm: SsmInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("state", self.state),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("keypoints", self.keypoints),
            ("reduction", self.reduction),
            ("expansion", self.expansion),
            ("window.wh", self.window.wh),
            ("window.ww", self.window.ww),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!("model.channels must be divisible by 4, got {}", self.channels)));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "model.channels ({}) must be divisible by model.reduction ({})",
                self.channels, self.reduction
            )));
        }
        let s = &self.ssm;
        if !(s.a_min > 0.0 && s.dt_min > 0.0 && s.dt_min < s.dt_max) {
            return Err(Error::Config(format!("model.ssm ranges are invalid: {s:?}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.frames, self.height, self.width)
    }
}

/// Component switches mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Embeddings and head only.
    BackboneOnly,
    /// Global blocks without local refinement.
    GsmOnly,
    Full,
    UnifiedRoutes,
    UnifiedSpaceRoutes,
    /// Route outputs merged by plain addition.
    NoStmm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::BackboneOnly,
        Ablation::GsmOnly,
        Ablation::Full,
        Ablation::UnifiedRoutes,
        Ablation::UnifiedSpaceRoutes,
        Ablation::NoStmm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::BackboneOnly => "backbone-only",
            Ablation::GsmOnly => "gsm-only",
            Ablation::Full => "full",
            Ablation::UnifiedRoutes => "unified-routes",
            Ablation::UnifiedSpaceRoutes => "unified-space-routes",
            Ablation::NoStmm => "no-stmm",
        }
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        match self {
            Ablation::BackboneOnly => {
                cfg.gsm_blocks = 0;
                cfg.lrm_blocks = 0;
            }
            Ablation::GsmOnly => cfg.lrm_blocks = 0,
            Ablation::Full => {}
            Ablation::UnifiedRoutes => cfg.routes = RouteSet::Unified,
            Ablation::UnifiedSpaceRoutes => cfg.routes = RouteSet::UnifiedSpace,
            Ablation::NoStmm => cfg.stmm = false,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Assembled model: parameter handles plus the precomputed scan layouts.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: Embeddings,
    pub gsm: Vec<GsmBlock>,
    pub lrm: Vec<LrmBlock>,
    pub head: DetectionHead,
    pub routes: Vec<RoutePlan>,
    pub windows: WindowLayout,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let grid = cfg.grid();
        let routes: Vec<RoutePlan> =
            cfg.routes.routes().into_iter().map(|id| RoutePlan::new(RouteLayout::new(id, grid, cfg.route_options))).collect();
        let (d, n) = (cfg.channels, cfg.state);
        let embed = Embeddings::init(&mut init, cfg.in_channels, d, cfg.frames, cfg.height, cfg.width)?;
        let shape = GsmShape {
            d,
            n,
            t: cfg.frames,
            reduction: cfg.reduction,
            expansion: cfg.expansion,
            routes: &routes,
            stmm: cfg.stmm,
            ssm: &cfg.ssm,
        };
        let gsm = (0..cfg.gsm_blocks).map(|i| GsmBlock::init(&mut init, &format!("gsm{i}"), &shape)).collect();
        let lrm = (0..cfg.lrm_blocks)
            .map(|i| LrmBlock::init(&mut init, &format!("lrm{i}"), d, n, cfg.expansion, &cfg.ssm))
            .collect();
        let head = DetectionHead::init(&mut init, d, cfg.keypoints);
        let windows = WindowLayout::new(grid, cfg.window);
        Ok((Model { cfg: cfg.clone(), embed, gsm, lrm, head, routes, windows }, store))
    }

    /// Backbone features (`[T, h, w, D]`) after every block.
    pub fn features<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, input: Var) -> Result<Var> {
        let mut x = self.embed.apply(tape, p, input)?;
        for b in &self.gsm {
            x = b.apply(tape, p, x, &self.routes, self.cfg.residual)?;
        }
        for b in &self.lrm {
            x = b.apply(tape, p, x, &self.windows, self.cfg.residual)?;
        }
        Ok(x)
    }

    /// `[T, h, w, Din]` features → `[K, h, w]` heatmaps.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, input: Var) -> Result<Var> {
        let x = self.features(tape, p, input)?;
        self.head.apply(tape, p, x)
    }

    /// Heatmaps for one input without recording gradients for later use.
    pub fn predict(&self, store: &ParamStore<f32>, input: &crate::tensor::Tensor<f32>) -> Result<crate::tensor::Tensor<f32>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests;
