//! Central finite-difference checks of every differentiable op and of the
//! composite blocks, always in f64.
//!
//! Each case registers its inputs as trainable parameters so that input and
//! parameter gradients are checked the same way. Non-scalar outputs are
//! reduced with a fixed random projection `L = Σ y ⊙ R`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::afm::AfmParams;
use crate::aggregation::{Branches, Fusion, ModelConfig, Network, Strategy};
use crate::backbone::{BackboneConfig, BasicBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{ConvGeometry, Mode};
use crate::layers::{BatchNorm, Conv, Linear};
use crate::params::{gaussian, param_rng, ParamId, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::training::am_softmax::{AmSoftmaxParams, DEFAULT_MARGIN, DEFAULT_SCALE};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all if the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Negative control: perturbs the analytic gradient before comparing.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords_per_tensor: 12,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub coords_checked: usize,
    /// `name[flat index]` of the worst coordinate.
    pub worst: String,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

type Forward = Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>;

struct Case {
    mode: Mode,
    forward: Forward,
}

/// Registered op ids, in report order.
pub const REGISTRY: &[&str] = &[
    "conv2d",
    "conv2d_stride",
    "conv2d_1x1",
    "batchnorm_train",
    "batchnorm_infer",
    "relu",
    "tanh",
    "upsample",
    "concat",
    "stats_pool",
    "linear",
    "ew_add",
    "ew_sub",
    "ew_mul",
    "scalar_add",
    "scalar_sub",
    "am_softmax",
    "basic_block",
    "basic_block_projection",
    "afm",
    "tiny_network",
];

/// Ids whose name contains `filter` (all ids for `None` or an empty filter).
pub fn select(filter: Option<&str>) -> Vec<&'static str> {
    REGISTRY
        .iter()
        .copied()
        .filter(|id| filter.is_none_or(|f| id.contains(f)))
        .collect()
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: Shape, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    store.add(format!("input.{name}"), gaussian(shape, 1.0, rng), ParamKind::Trainable)
}

/// Input whose entries stay at least 0.05 away from zero, so ReLU kinks are never straddled.
fn input_off_kink(store: &mut ParamStore<f64>, name: &str, shape: Shape, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    let t: Tensor<f64> = gaussian(shape, 1.0, rng);
    let t = t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
    store.add(format!("input.{name}"), t, ParamKind::Trainable)
}

/// Random non-trivial affine and running statistics for every batch norm in the store.
fn perturb_batch_norms(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let t = store.value_mut(id);
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if name.ends_with(".running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
}

fn tiny_network_config() -> ModelConfig {
    ModelConfig {
        strategy: Strategy::Bmfa,
        fusion: Some(Fusion::Afm),
        r: 4,
        embedding_dim: 8,
        backbone: BackboneConfig {
            base_channels: 4,
            blocks: [1, 1, 1, 1],
        },
        lowest_stage: 1,
        branches: Branches::Both,
    }
}

fn build(id: &str, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<Case> {
    let train = Mode::Train;
    let case = |mode, f: Forward| Ok(Case { mode, forward: f });
    match id {
        "conv2d" => {
            let x = input(store, "x", Shape::new(2, 3, 5, 6), rng)?;
            let conv = Conv::new(store, "conv", 3, 4, (3, 3), ConvGeometry::same(3), true, 1)?;
            store.value_mut(conv.bias.expect("bias")).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                conv.forward(g, xv)
            }))
        }
        "conv2d_stride" => {
            let x = input(store, "x", Shape::new(2, 2, 6, 7), rng)?;
            let conv = Conv::new(store, "conv", 2, 3, (3, 3), ConvGeometry::new((2, 2), (1, 1)), true, 2)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                conv.forward(g, xv)
            }))
        }
        "conv2d_1x1" => {
            let x = input(store, "x", Shape::new(2, 5, 3, 4), rng)?;
            let conv = Conv::new(store, "conv", 5, 3, (1, 1), ConvGeometry::new((1, 2), (0, 0)), false, 3)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                conv.forward(g, xv)
            }))
        }
        "batchnorm_train" | "batchnorm_infer" => {
            let x = input(store, "x", Shape::new(3, 2, 3, 4), rng)?;
            let bn = BatchNorm::new(store, "bn", 2)?;
            perturb_batch_norms(store, rng);
            let mode = if id == "batchnorm_train" { Mode::Train } else { Mode::Infer };
            case(mode, Box::new(move |g| {
                let xv = g.param(x);
                bn.forward(g, xv)
            }))
        }
        "relu" => {
            let x = input_off_kink(store, "x", Shape::new(2, 3, 4, 5), rng)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                Ok(g.relu(xv))
            }))
        }
        "tanh" => {
            let x = input(store, "x", Shape::new(2, 3, 4, 5), rng)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                Ok(g.tanh(xv))
            }))
        }
        "upsample" => {
            let x = input(store, "x", Shape::new(2, 3, 4, 5), rng)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                Ok(g.upsample_freq(xv))
            }))
        }
        "concat" => {
            let x = input(store, "x", Shape::new(2, 2, 3, 4), rng)?;
            let y = input(store, "y", Shape::new(2, 3, 3, 4), rng)?;
            case(train, Box::new(move |g| {
                let (xv, yv) = (g.param(x), g.param(y));
                g.concat_channels(xv, yv)
            }))
        }
        "stats_pool" => {
            let x = input(store, "x", Shape::new(2, 3, 6, 4), rng)?;
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                Ok(g.stats_pool(xv))
            }))
        }
        "linear" => {
            let x = input(store, "x", Shape::vectors(3, 7), rng)?;
            let lin = Linear::new(store, "fc", 7, 5, true, 4)?;
            store.value_mut(lin.bias.expect("bias")).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                lin.forward(g, xv)
            }))
        }
        "ew_add" | "ew_sub" | "ew_mul" => {
            let a = input(store, "a", Shape::new(2, 3, 4, 5), rng)?;
            let b = input(store, "b", Shape::new(2, 3, 4, 5), rng)?;
            let op = id.to_string();
            case(train, Box::new(move |g| {
                let (av, bv) = (g.param(a), g.param(b));
                match op.as_str() {
                    "ew_add" => g.add(av, bv),
                    "ew_sub" => g.sub(av, bv),
                    _ => g.mul(av, bv),
                }
            }))
        }
        "scalar_add" | "scalar_sub" => {
            let x = input(store, "x", Shape::new(2, 3, 4, 5), rng)?;
            let add = id == "scalar_add";
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                Ok(if add { g.scalar_add(1.0, xv) } else { g.scalar_sub(1.0, xv) })
            }))
        }
        "am_softmax" => {
            let e = input(store, "emb", Shape::vectors(4, 6), rng)?;
            let cls = AmSoftmaxParams::new(store, "classifier.weight", 6, 3, DEFAULT_MARGIN, DEFAULT_SCALE, 5)?;
            // Label each sample with its least similar class: a saturated softmax
            // would leave gradients below the finite-difference noise floor.
            let (ev, wv) = (store.value(e), store.value(cls.class_weights));
            let labels: Vec<usize> = (0..4)
                .map(|i| {
                    let cos = |j: usize| {
                        let col: Vec<f64> = (0..6).map(|r| wv.data()[r * 3 + j]).collect();
                        let dot: f64 = ev.item(i).iter().zip(&col).map(|(a, b)| a * b).sum();
                        dot / col.iter().map(|v| v * v).sum::<f64>().sqrt()
                    };
                    (0..3).min_by(|&a, &b| cos(a).total_cmp(&cos(b))).expect("classes")
                })
                .collect();
            case(train, Box::new(move |g| {
                let ev = g.param(e);
                Ok(g.am_softmax(ev, cls.class_weights, &labels, cls.margin, cls.scale)?.0)
            }))
        }
        "basic_block" | "basic_block_projection" => {
            let (cin, cout, stride) = if id == "basic_block" { (4, 4, (1, 1)) } else { (3, 4, (1, 2)) };
            let x = input(store, "x", Shape::new(2, cin, 4, 6), rng)?;
            let block = BasicBlock::new(store, "block", cin, cout, stride, 6)?;
            perturb_batch_norms(store, rng);
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                block.forward(g, xv)
            }))
        }
        "afm" => {
            let x = input(store, "x", Shape::new(2, 8, 3, 4), rng)?;
            let y = input(store, "y", Shape::new(2, 8, 3, 4), rng)?;
            let afm = AfmParams::new(store, "afm", 8, 4, 7)?;
            perturb_batch_norms(store, rng);
            case(train, Box::new(move |g| {
                let (xv, yv) = (g.param(x), g.param(y));
                afm.fuse(g, xv, yv)
            }))
        }
        "tiny_network" => {
            let x = input(store, "x", Shape::new(4, 1, 8, 64), rng)?;
            let net = Network::new(store, tiny_network_config(), 8)?;
            let cls = AmSoftmaxParams::new(store, "classifier.weight", 8, 3, DEFAULT_MARGIN, DEFAULT_SCALE, 8)?;
            perturb_batch_norms(store, rng);
            let labels = vec![0, 1, 2, 1];
            case(train, Box::new(move |g| {
                let xv = g.param(x);
                let tr = net.forward(g, xv)?;
                Ok(g.am_softmax(tr.embedding, cls.class_weights, &labels, cls.margin, cls.scale)?.0)
            }))
        }
        other => Err(Error::UnknownOp(other.to_string())),
    }
}

/// Forward pass reduced to a scalar; `proj` is created on first use.
fn loss(store: &mut ParamStore<f64>, case: &Case, proj: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng, backward: bool) -> Result<f64> {
    let mut g = Graph::new(store, case.mode);
    let y = (case.forward)(&mut g)?;
    let root = if g.shape(y) == Shape::scalar() {
        y
    } else {
        let r = proj.get_or_insert_with(|| gaussian(g.shape(y), 1.0, rng)).clone();
        let rv = g.input(r);
        let p = g.mul(y, rv)?;
        g.sum(p)
    };
    let value = g.value(root).data()[0];
    if backward {
        g.backward(root)?;
    }
    Ok(value)
}

/// Runs one registered check.
pub fn grad_check(id: &str, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = param_rng(cfg.seed, id);
    let mut store = ParamStore::<f64>::new();
    let case = build(id, &mut store, &mut rng)?;
    let mut proj = None;
    store.zero_grads();
    loss(&mut store, &case, &mut proj, &mut rng, true)?;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&i| store.grad(i).clone()).collect();

    let (mut worst_err, mut worst, mut coords) = (0.0f64, String::new(), 0usize);
    for (&pid, grad) in ids.iter().zip(&analytic) {
        let numel = grad.len();
        let picks: Vec<usize> = if numel <= cfg.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut rng, numel, cfg.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for k in picks {
            let orig = store.value(pid).data()[k];
            store.value_mut(pid).data_mut()[k] = orig + cfg.step;
            let lp = loss(&mut store, &case, &mut proj, &mut rng, false)?;
            store.value_mut(pid).data_mut()[k] = orig - cfg.step;
            let lm = loss(&mut store, &case, &mut proj, &mut rng, false)?;
            store.value_mut(pid).data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let mut a = grad.data()[k];
            if cfg.corrupt_analytic {
                a = a * 1.01 + 1e-6;
            }
            let err = relative_error(a, numeric);
            coords += 1;
            if err > worst_err || worst.is_empty() {
                worst_err = worst_err.max(err);
                worst = format!("{}[{k}]", store.entry(pid).name);
            }
        }
    }
    Ok(GradCheckReport {
        op: id.to_string(),
        max_rel_error: worst_err,
        tolerance: cfg.tolerance,
        passed: worst_err < cfg.tolerance,
        coords_checked: coords,
        worst,
    })
}

/// Runs every registered check whose id contains `filter`.
pub fn run_suite(filter: Option<&str>, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let ids = select(filter);
    if ids.is_empty() {
        return Err(Error::UnknownOp(filter.unwrap_or_default().to_string()));
    }
    ids.into_iter().map(|id| grad_check(id, cfg)).collect()
}
