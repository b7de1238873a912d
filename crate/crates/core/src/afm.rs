//! Attentional fusion of two equally shaped feature maps.
//!
//! The attention map is `S = tanh(BN(W2 ∗ ReLU(BN(W1 ∗ [X, Y]))))` with 1×1
//! convolutions `W1: 2C → C/r` and `W2: C/r → C`, and the fused output is
//! `(1 ⊕ S) ⊗ X + (1 ⊖ S) ⊗ Y`. The two weights sum to 2 at every position,
//! so with `S = 0` the module reduces to plain addition.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Conv};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Channel reduction ratio of the bottleneck.
pub const REDUCTION: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct AfmParams {
    pub w1: Conv,
    pub bn1: BatchNorm,
    pub w2: Conv,
    pub bn2: BatchNorm,
    pub channels: usize,
    pub reduction: usize,
}

impl AfmParams {
    /// Registers `{name}.W1.weight`, `{name}.bn1.*`, `{name}.W2.weight`, `{name}.bn2.*`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        seed: u64,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "AFM needs channels divisible by r with C >= r, got C={channels} r={reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(AfmParams {
            w1: Conv::pointwise(store, &format!("{name}.W1"), 2 * channels, mid, seed)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), mid)?,
            w2: Conv::pointwise(store, &format!("{name}.W2"), mid, channels, seed)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels)?,
            channels,
            reduction,
        })
    }

    fn check_operands<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, y: Var) -> Result<()> {
        let (sx, sy) = (g.shape(x), g.shape(y));
        if sx != sy {
            return Err(Error::shape(format!("AFM operands differ: {sx} vs {sy}")));
        }
        if sx.c() != self.channels {
            return Err(Error::shape(format!(
                "AFM built for {} channels, got {sx}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Time-frequency attention map `S`, same shape as `x`, bounded in (−1, 1).
    pub fn attention_map<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        self.check_operands(g, x, y)?;
        let z = g.concat_channels(x, y)?;
        let z = self.w1.forward(g, z)?;
        let z = self.bn1.forward(g, z)?;
        let z = g.relu(z);
        let z = self.w2.forward(g, z)?;
        let z = self.bn2.forward(g, z)?;
        Ok(g.tanh(z))
    }

    /// `(1 + S)·x + (1 − S)·y`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        let s = self.attention_map(g, x, y)?;
        let wx = g.scalar_add(T::one(), s);
        let wy = g.scalar_sub(T::one(), s);
        let a = g.mul(wx, x)?;
        let b = g.mul(wy, y)?;
        g.add(a, b)
    }
}
