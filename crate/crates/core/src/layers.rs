//! Parameterised layers: handles into a [`ParamStore`] plus the graph calls that use them.

use crate::error::Result;
use crate::graph::{BnIds, Graph, Var};
use crate::kernels::ConvGeometry;
use crate::params::{he_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// He-initialised `k×k` convolution registered as `{name}.weight` (and `{name}.bias`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        geometry: ConvGeometry,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = he_normal(Shape::new(cout, cin, k.0, k.1), cin * k.0 * k.1, seed, &wname);
        let weight = store.add(wname, w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::vectors(1, cout)),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            geometry,
            in_channels: cin,
            out_channels: cout,
        })
    }

    /// Bias-free 1×1 convolution.
    pub fn pointwise<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Self::new(store, name, cin, cout, (1, 1), ConvGeometry::same(1), false, seed)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.geometry)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub ids: BnIds,
}

impl BatchNorm {
    /// Registers gamma = 1, beta = 0 and running statistics (0, 1).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let s = Shape::vectors(1, channels);
        let ids = BnIds {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(s, T::one()), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(s), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(s, T::one()), ParamKind::Buffer)?,
        };
        Ok(BatchNorm { ids })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(x, &self.ids)
    }
}

/// Convolution immediately followed by batch normalisation.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    /// Registers `{conv_name}.weight` and `{bn_name}.*`; the convolution carries no bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geometry: ConvGeometry,
        seed: u64,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv::new(store, conv_name, cin, cout, (k, k), geometry, false, seed)?,
            bn: BatchNorm::new(store, bn_name, cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        self.bn.forward(g, y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.weight` (dout, din, 1, 1) and, if `bias`, `{name}.bias`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = he_normal(Shape::new(dout, din, 1, 1), din, seed, &wname);
        let weight = store.add(wname, w, ParamKind::Trainable)?;
        let bias = bias
            .then(|| {
                store.add(
                    format!("{name}.bias"),
                    Tensor::zeros(Shape::vectors(1, dout)),
                    ParamKind::Trainable,
                )
            })
            .transpose()?;
        Ok(Linear {
            weight,
            bias,
            in_dim: din,
            out_dim: dout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}
