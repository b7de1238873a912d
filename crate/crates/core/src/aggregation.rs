//! Multiscale aggregation heads on top of the backbone.
//!
//! * `bmfa`: a top-down branch (`F4 = C4`, `F_i = fuse(U(BN(Wtb_i ∗ F_{i+1})), BN(Wlc_i ∗ C_i))`)
//!   and a bottom-up branch (`F1 = C1`, `F_i = fuse(BN(Wbt_i ∗ D(F_{i−1})), BN(Wlc_i ∗ C_i))`),
//!   each refined by a 3×3 conv and statistics-pooled; the two pooled vectors
//!   are concatenated into the embedding head.
//! * `baseline`: statistics pooling of C4.
//! * `mfa_s34`: C4 projected to C3's channels, upsampled, fused with C3, pooled.
//! * `mea_fpm`: additive top-down pyramid with a conv + pooling per level; the
//!   four pooled vectors are concatenated.
//!
//! The fusion operator at every merge point is selectable: addition,
//! concatenation followed by a 1×1 conv back to C channels, or AFM.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::afm::{AfmParams, REDUCTION};
use crate::backbone::{Backbone, BackboneConfig, BackboneFeatures, N_MELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvGeometry, Mode};
use crate::layers::{BatchNorm, Conv, ConvBn, Linear};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    MfaS34,
    MeaFpm,
    Bmfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Add,
    Concat,
    Afm,
}

/// Which aggregation branches a `bmfa` model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    TopDown,
    BottomUp,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::MfaS34 => "mfa_s34",
            Strategy::MeaFpm => "mea_fpm",
            Strategy::Bmfa => "bmfa",
        }
    }
}

impl Fusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fusion::Add => "add",
            Fusion::Concat => "concat",
            Fusion::Afm => "afm",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown fusion `{s}`")))
    }
}

/// A strategy together with its fusion operator; `baseline` has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StrategyId {
    pub strategy: Strategy,
    pub fusion: Option<Fusion>,
}

impl StrategyId {
    pub fn new(strategy: Strategy, fusion: Option<Fusion>) -> Result<Self> {
        match (strategy, fusion) {
            (Strategy::Baseline, Some(f)) => Err(Error::Config(format!(
                "baseline takes no fusion method, got `{}`",
                f.as_str()
            ))),
            (Strategy::Baseline, None) => Ok(StrategyId { strategy, fusion }),
            (s, None) => Err(Error::Config(format!(
                "strategy `{}` needs a fusion method",
                s.as_str()
            ))),
            (_, Some(_)) => Ok(StrategyId { strategy, fusion }),
        }
    }

    /// The eight systems of the comparison grid, in report order.
    pub fn comparison_grid() -> Vec<StrategyId> {
        use Fusion::*;
        use Strategy::*;
        [
            (Baseline, None),
            (MfaS34, Some(Concat)),
            (MfaS34, Some(Afm)),
            (MeaFpm, Some(Add)),
            (MeaFpm, Some(Afm)),
            (Bmfa, Some(Concat)),
            (Bmfa, Some(Add)),
            (Bmfa, Some(Afm)),
        ]
        .into_iter()
        .map(|(s, f)| StrategyId { strategy: s, fusion: f })
        .collect()
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fusion {
            Some(fu) => write!(f, "{}+{}", self.strategy.as_str(), fu.as_str()),
            None => f.write_str(self.strategy.as_str()),
        }
    }
}

impl FromStr for StrategyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (st, fu) = match s.split_once('+') {
            Some((a, b)) => (a.parse()?, Some(b.parse()?)),
            None => (s.parse()?, None),
        };
        StrategyId::new(st, fu)
    }
}

/// Architecture description; the `model` section of the run configuration.
///
/// Omitted fields take the `Default` values (bmfa+afm at full size). Naming a
/// `strategy` without a `fusion` leaves the fusion unset, which only
/// `baseline` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub fusion: Option<Fusion>,
    pub r: usize,
    pub embedding_dim: usize,
    pub backbone: BackboneConfig,
    /// Lowest backbone stage fed into a `bmfa` model (1 = all four stages).
    pub lowest_stage: usize,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strategy: Strategy::Bmfa,
            fusion: Some(Fusion::Afm),
            r: REDUCTION,
            embedding_dim: 512,
            backbone: BackboneConfig::default(),
            lowest_stage: 1,
            branches: Branches::Both,
        }
    }
}

impl ModelConfig {
    pub fn with_strategy(mut self, id: StrategyId) -> Self {
        self.strategy = id.strategy;
        self.fusion = id.fusion;
        self
    }

    pub fn strategy_id(&self) -> Result<StrategyId> {
        StrategyId::new(self.strategy, self.fusion)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy_id()?;
        self.backbone.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(1..=3).contains(&self.lowest_stage) {
            return Err(Error::Config(format!(
                "lowest_stage must be 1, 2 or 3, got {}",
                self.lowest_stage
            )));
        }
        if self.strategy != Strategy::Bmfa && (self.lowest_stage != 1 || self.branches != Branches::Both) {
            return Err(Error::Config(
                "lowest_stage and branches apply to the bmfa strategy only".into(),
            ));
        }
        if self.fusion == Some(Fusion::Afm) {
            let c1 = self.backbone.stage_channels()[0];
            if self.r == 0 || c1 < self.r || !c1.is_multiple_of(self.r) {
                return Err(Error::Config(format!(
                    "AFM reduction r={} incompatible with stage-1 width {c1}",
                    self.r
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Fusion operators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Fuser {
    Add,
    /// `[x, y]` followed by a 1×1 conv from 2C back to C channels.
    Concat(Conv),
    Afm(AfmParams),
}

impl Fuser {
    /// Parameters live under `{prefix}.afm{level}` or `{prefix}.concat{level}`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level: &str,
        fusion: Fusion,
        channels: usize,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(match fusion {
            Fusion::Add => Fuser::Add,
            Fusion::Concat => Fuser::Concat(Conv::pointwise(
                store,
                &format!("{prefix}.concat{level}"),
                2 * channels,
                channels,
                seed,
            )?),
            Fusion::Afm => Fuser::Afm(AfmParams::new(store, &format!("{prefix}.afm{level}"), channels, r, seed)?),
        })
    }

    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        if g.shape(x) != g.shape(y) {
            return Err(Error::shape(format!(
                "fusion operands differ: {} vs {}",
                g.shape(x),
                g.shape(y)
            )));
        }
        match self {
            Fuser::Add => g.add(x, y),
            Fuser::Concat(conv) => {
                let z = g.concat_channels(x, y)?;
                conv.forward(g, z)
            }
            Fuser::Afm(afm) => afm.fuse(g, x, y),
        }
    }
}

/// 3×3 conv + BN + ReLU preserving channels.
#[derive(Debug, Clone, Copy)]
pub struct Refine {
    pub conv: ConvBn,
}

impl Refine {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, seed: u64) -> Result<Self> {
        Ok(Refine {
            conv: ConvBn::new(
                store,
                name,
                &format!("{name}_bn"),
                channels,
                channels,
                3,
                ConvGeometry::same(3),
                seed,
            )?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(g.relu(y))
    }
}

fn pointwise_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    tag: &str,
    level: usize,
    cin: usize,
    cout: usize,
    seed: u64,
) -> Result<ConvBn> {
    ConvBn::new(
        store,
        &format!("{prefix}.W{tag}{level}"),
        &format!("{prefix}.bn_{tag}{level}"),
        cin,
        cout,
        1,
        ConvGeometry::same(1),
        seed,
    )
}

// ---------------------------------------------------------------------------
// Top-down branch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TopDownLevel {
    pub stage: usize,
    /// 1×1 conv + BN reducing F_{i+1} to C_i channels.
    pub reduce: ConvBn,
    /// Lateral 1×1 conv + BN on C_i.
    pub lateral: ConvBn,
    pub fuser: Fuser,
}

/// Top-down path without refinement or pooling; shared by `bmfa` and `mea_fpm`.
#[derive(Debug, Clone)]
pub struct TopDownPath {
    pub levels: Vec<TopDownLevel>,
}

impl TopDownPath {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: [usize; 4],
        lowest: usize,
        fusion: Fusion,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut levels = Vec::new();
        for i in (lowest..=3).rev() {
            let (ci, cup) = (channels[i - 1], channels[i]);
            levels.push(TopDownLevel {
                stage: i,
                reduce: pointwise_bn(store, prefix, "tb", i, cup, ci, seed)?,
                lateral: pointwise_bn(store, prefix, "lc", i, ci, ci, seed)?,
                fuser: Fuser::new(store, prefix, &i.to_string(), fusion, ci, r, seed)?,
            });
        }
        Ok(TopDownPath { levels })
    }

    /// Returns `[F1, F2, F3, F4]`, with levels below the lowest stage left `None`.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bf: &BackboneFeatures) -> Result<[Option<Var>; 4]> {
        let mut f = [None; 4];
        let mut upper = bf.stage(4);
        f[3] = Some(upper);
        for lvl in &self.levels {
            let reduced = lvl.reduce.forward(g, upper)?;
            let up = g.upsample_freq(reduced);
            let lat = lvl.lateral.forward(g, bf.stage(lvl.stage))?;
            upper = lvl.fuser.fuse(g, up, lat)?;
            f[lvl.stage - 1] = Some(upper);
        }
        Ok(f)
    }
}

/// Feature maps and pooled vector of one aggregation branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    /// `F_i` at index `i − 1`; `None` for stages the branch does not visit.
    pub maps: [Option<Var>; 4],
    pub refined: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct TopDownBranch {
    pub path: TopDownPath,
    pub lowest: usize,
    pub refine: Refine,
}

impl TopDownBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: [usize; 4],
        lowest: usize,
        fusion: Fusion,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(TopDownBranch {
            path: TopDownPath::new(store, "topdown", channels, lowest, fusion, r, seed)?,
            lowest,
            refine: Refine::new(store, "topdown.refine", channels[lowest - 1], seed)?,
        })
    }

    /// Builds F3..F_lowest, refines the bottom map and pools it into `h_tb`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bf: &BackboneFeatures) -> Result<BranchTrace> {
        let maps = self.path.forward(g, bf)?;
        let bottom = maps[self.lowest - 1].expect("lowest level is always built");
        let refined = self.refine.forward(g, bottom)?;
        let pooled = g.stats_pool(refined);
        Ok(BranchTrace { maps, refined, pooled })
    }
}

// ---------------------------------------------------------------------------
// Bottom-up branch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BottomUpLevel {
    pub stage: usize,
    /// 3×3 stride-(1,2) conv halving frequency; channels preserved.
    pub down: Conv,
    /// 1×1 conv + BN raising to C_i channels.
    pub raise: ConvBn,
    pub lateral: ConvBn,
    pub fuser: Fuser,
}

#[derive(Debug, Clone)]
pub struct BottomUpBranch {
    pub levels: Vec<BottomUpLevel>,
    pub lowest: usize,
    pub refine: Refine,
}

impl BottomUpBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: [usize; 4],
        lowest: usize,
        fusion: Fusion,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        let prefix = "bottomup";
        let mut levels = Vec::new();
        for i in lowest + 1..=4 {
            let (cdown, ci) = (channels[i - 2], channels[i - 1]);
            levels.push(BottomUpLevel {
                stage: i,
                down: Conv::new(
                    store,
                    &format!("{prefix}.down{i}"),
                    cdown,
                    cdown,
                    (3, 3),
                    ConvGeometry::new((1, 2), (1, 1)),
                    false,
                    seed,
                )?,
                raise: pointwise_bn(store, prefix, "bt", i, cdown, ci, seed)?,
                lateral: pointwise_bn(store, prefix, "lc", i, ci, ci, seed)?,
                fuser: Fuser::new(store, prefix, &i.to_string(), fusion, ci, r, seed)?,
            });
        }
        Ok(BottomUpBranch {
            levels,
            lowest,
            refine: Refine::new(store, "bottomup.refine", channels[3], seed)?,
        })
    }

    /// Builds F_{lowest+1}..F4, refines F4 and pools it into `h_bt`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bf: &BackboneFeatures) -> Result<BranchTrace> {
        let mut maps = [None; 4];
        let mut lower = bf.stage(self.lowest);
        maps[self.lowest - 1] = Some(lower);
        for lvl in &self.levels {
            let down = lvl.down.forward(g, lower)?;
            let raised = lvl.raise.forward(g, down)?;
            let lat = lvl.lateral.forward(g, bf.stage(lvl.stage))?;
            lower = lvl.fuser.fuse(g, raised, lat)?;
            maps[lvl.stage - 1] = Some(lower);
        }
        let refined = self.refine.forward(g, lower)?;
        let pooled = g.stats_pool(refined);
        Ok(BranchTrace { maps, refined, pooled })
    }
}

// ---------------------------------------------------------------------------
// Comparison strategies
// ---------------------------------------------------------------------------

/// Fuses C3 with C4 projected to C3's channels and upsampled in frequency.
#[derive(Debug, Clone, Copy)]
pub struct MfaS34 {
    pub project: ConvBn,
    pub fuser: Fuser,
}

impl MfaS34 {
    fn new<T: Scalar>(store: &mut ParamStore<T>, channels: [usize; 4], fusion: Fusion, r: usize, seed: u64) -> Result<Self> {
        Ok(MfaS34 {
            project: ConvBn::new(
                store,
                "mfa.proj",
                "mfa.bn_proj",
                channels[3],
                channels[2],
                1,
                ConvGeometry::same(1),
                seed,
            )?,
            fuser: Fuser::new(store, "mfa", "", fusion, channels[2], r, seed)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bf: &BackboneFeatures) -> Result<Var> {
        let p = self.project.forward(g, bf.stage(4))?;
        let up = g.upsample_freq(p);
        let fused = self.fuser.fuse(g, up, bf.stage(3))?;
        Ok(g.stats_pool(fused))
    }
}

/// Top-down pyramid with a conv and statistics pooling at every level.
#[derive(Debug, Clone)]
pub struct MeaFpm {
    pub path: TopDownPath,
    pub smooth: [Refine; 4],
}

impl MeaFpm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, channels: [usize; 4], fusion: Fusion, r: usize, seed: u64) -> Result<Self> {
        let path = TopDownPath::new(store, "fpm", channels, 1, fusion, r, seed)?;
        let mut smooth = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            smooth.push(Refine::new(store, &format!("fpm.smooth{}", i + 1), c, seed)?);
        }
        Ok(MeaFpm {
            path,
            smooth: smooth.try_into().expect("four levels"),
        })
    }

    /// Per-level pooled vectors `[p1, p2, p3, p4]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, bf: &BackboneFeatures) -> Result<[Var; 4]> {
        let maps = self.path.forward(g, bf)?;
        let mut pooled = Vec::with_capacity(4);
        for (m, s) in maps.iter().zip(&self.smooth) {
            let y = s.forward(g, m.expect("all four levels built"))?;
            pooled.push(g.stats_pool(y));
        }
        Ok(pooled.try_into().expect("four levels"))
    }
}

// ---------------------------------------------------------------------------
// Embedding head
// ---------------------------------------------------------------------------

/// `fc1` (→ E) + BN + ReLU, then `fc2` (E → E). The fc2 output is the embedding.
///
/// fc1 has no bias: the batch norm right after it would cancel one.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl EmbeddingHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, input_dim: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        Ok(EmbeddingHead {
            fc1: Linear::new(store, "head.fc1", input_dim, embedding_dim, false, seed)?,
            bn: BatchNorm::new(store, "head.fc1_bn", embedding_dim)?,
            fc2: Linear::new(store, "head.fc2", embedding_dim, embedding_dim, true, seed)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        if g.shape(h).item_len() != self.fc1.in_dim {
            return Err(Error::shape(format!(
                "head expects {} inputs, got {}",
                self.fc1.in_dim,
                g.shape(h)
            )));
        }
        let y = self.fc1.forward(g, h)?;
        let y = self.bn.forward(g, y)?;
        let y = g.relu(y);
        self.fc2.forward(g, y)
    }

    /// Concatenates `h_tb` and `h_bt` and maps them to the embedding.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, h_tb: Var, h_bt: Var) -> Result<Var> {
        let (a, b) = (g.shape(h_tb), g.shape(h_bt));
        if a.plane_len() != 1 || b.plane_len() != 1 || a.c() != b.c() {
            return Err(Error::shape(format!("embed: {a} vs {b}")));
        }
        let h = g.concat_channels(h_tb, h_bt)?;
        self.forward(g, h)
    }
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Aggregator {
    Baseline,
    MfaS34(MfaS34),
    MeaFpm(MeaFpm),
    Bmfa {
        top_down: Option<TopDownBranch>,
        bottom_up: Option<BottomUpBranch>,
    },
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub aggregator: Aggregator,
    pub head: EmbeddingHead,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub features: BackboneFeatures,
    pub top_down: Option<BranchTrace>,
    pub bottom_up: Option<BranchTrace>,
    /// Per-level pooled vectors of `mea_fpm`.
    pub pyramid: Option<[Var; 4]>,
    /// Input to the embedding head.
    pub pooled: Var,
    pub embedding: Var,
}

impl Network {
    /// Statistics-pooled length of one stage-sized map: 2 · C_i · F_i.
    pub fn pooled_stage_dim(config: &ModelConfig) -> usize {
        2 * config.backbone.base_channels * (N_MELS / 2)
    }

    pub fn head_input_dim(config: &ModelConfig) -> usize {
        let d = Self::pooled_stage_dim(config);
        match config.strategy {
            Strategy::Baseline | Strategy::MfaS34 => d,
            Strategy::MeaFpm => 4 * d,
            Strategy::Bmfa => match config.branches {
                Branches::Both => 2 * d,
                _ => d,
            },
        }
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, config.backbone, seed)?;
        let ch = config.backbone.stage_channels();
        let r = config.r;
        let aggregator = match (config.strategy, config.fusion) {
            (Strategy::Baseline, _) => Aggregator::Baseline,
            (Strategy::MfaS34, Some(f)) => Aggregator::MfaS34(MfaS34::new(store, ch, f, r, seed)?),
            (Strategy::MeaFpm, Some(f)) => Aggregator::MeaFpm(MeaFpm::new(store, ch, f, r, seed)?),
            (Strategy::Bmfa, Some(f)) => {
                let lo = config.lowest_stage;
                let td = matches!(config.branches, Branches::Both | Branches::TopDown);
                let bu = matches!(config.branches, Branches::Both | Branches::BottomUp);
                Aggregator::Bmfa {
                    top_down: td.then(|| TopDownBranch::new(store, ch, lo, f, r, seed)).transpose()?,
                    bottom_up: bu.then(|| BottomUpBranch::new(store, ch, lo, f, r, seed)).transpose()?,
                }
            }
            (s, None) => {
                return Err(Error::Config(format!("strategy `{}` needs a fusion method", s.as_str())))
            }
        };
        let head = EmbeddingHead::new(store, Self::head_input_dim(&config), config.embedding_dim, seed)?;
        Ok(Network {
            config,
            backbone,
            aggregator,
            head,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ForwardTrace> {
        let features = self.backbone.forward(g, x)?;
        let (mut top_down, mut bottom_up, mut pyramid) = (None, None, None);
        let pooled = match &self.aggregator {
            Aggregator::Baseline => g.stats_pool(features.stage(4)),
            Aggregator::MfaS34(m) => m.forward(g, &features)?,
            Aggregator::MeaFpm(m) => {
                let p = m.forward(g, &features)?;
                pyramid = Some(p);
                let a = g.concat_channels(p[0], p[1])?;
                let b = g.concat_channels(a, p[2])?;
                g.concat_channels(b, p[3])?
            }
            Aggregator::Bmfa {
                top_down: td,
                bottom_up: bu,
            } => {
                top_down = td.as_ref().map(|b| b.forward(g, &features)).transpose()?;
                bottom_up = bu.as_ref().map(|b| b.forward(g, &features)).transpose()?;
                match (&top_down, &bottom_up) {
                    (Some(t), Some(b)) => g.concat_channels(t.pooled, b.pooled)?,
                    (Some(t), None) => t.pooled,
                    (None, Some(b)) => b.pooled,
                    (None, None) => unreachable!("bmfa has at least one branch"),
                }
            }
        };
        let embedding = self.head.forward(g, pooled)?;
        Ok(ForwardTrace {
            features,
            top_down,
            bottom_up,
            pyramid,
            pooled,
            embedding,
        })
    }

    /// Embeddings of a batch of (N, 1, T, 64) features with BN in infer mode.
    pub fn embed_batch<T: Scalar>(&self, store: &mut ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, Mode::Infer);
        let xv = g.input(x);
        let tr = self.forward(&mut g, xv)?;
        Ok(g.value(tr.embedding).clone())
    }
}
