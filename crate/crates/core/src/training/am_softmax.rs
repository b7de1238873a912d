//! Additive-margin softmax over cosine logits.
//!
//! For embedding `e` with label `y` and class weight columns `w_j`:
//! `z_j = s · cos(e, w_j)` for `j ≠ y` and `z_y = s · (cos(e, w_y) − m)`;
//! the loss is the batch mean of `−log softmax(z)_y`. Embeddings and weight
//! columns are normalised on every call, so both may be stored unnormalised.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_MARGIN: f64 = 0.15;
pub const DEFAULT_SCALE: f64 = 30.0;

/// Class-weight matrix (D × K) plus the margin and scale.
#[derive(Debug, Clone, Copy)]
pub struct AmSoftmaxParams {
    pub class_weights: ParamId,
    pub margin: f64,
    pub scale: f64,
}

impl AmSoftmaxParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_classes: usize,
        margin: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if margin < 0.0 || scale <= 0.0 || !margin.is_finite() || !scale.is_finite() {
            return Err(Error::Config(format!(
                "AM-softmax needs m >= 0 and s > 0, got m={margin} s={scale}"
            )));
        }
        if n_classes < 2 {
            return Err(Error::Config("AM-softmax needs at least two classes".into()));
        }
        let w = crate::params::he_normal(Shape::new(dim, n_classes, 1, 1), dim, seed, name);
        Ok(AmSoftmaxParams {
            class_weights: store.add(name, w, ParamKind::Trainable)?,
            margin,
            scale,
        })
    }
}

/// Quantities kept from the forward pass (all in f64).
#[derive(Debug, Clone)]
pub struct AmSoftmaxCache {
    e_hat: Vec<f64>,
    e_norm: Vec<f64>,
    w_hat: Vec<f64>,
    w_norm: Vec<f64>,
    probs: Vec<f64>,
    labels: Vec<usize>,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct AmSoftmaxOutput {
    pub loss: f64,
    /// Fraction of samples whose highest-cosine class is the label.
    pub accuracy: f64,
    pub cache: AmSoftmaxCache,
}

fn norm_floor(v: f64) -> f64 {
    v.max(1e-12)
}

/// Forward pass. `emb` is (N, D, 1, 1); `weights` is (D, K, 1, 1).
pub fn forward<T: Scalar>(
    emb: &Tensor<T>,
    weights: &Tensor<T>,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> Result<AmSoftmaxOutput> {
    let (n, d) = (emb.shape().n(), emb.shape().item_len());
    let (wd, k) = (weights.shape().n(), weights.shape().c());
    if wd != d || weights.shape().plane_len() != 1 {
        return Err(Error::shape(format!(
            "am_softmax: embeddings of length {d} vs class weights {}",
            weights.shape()
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "am_softmax: {} labels for {n} embeddings",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let mut e_hat = vec![0.0; n * d];
    let mut e_norm = vec![0.0; n];
    for i in 0..n {
        let row = &emb.data()[i * d..(i + 1) * d];
        let nrm = norm_floor(row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt());
        e_norm[i] = nrm;
        for (o, v) in e_hat[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = v.as_f64() / nrm;
        }
    }
    // columns of the D × K matrix
    let mut w_hat = vec![0.0; d * k];
    let mut w_norm = vec![0.0; k];
    for j in 0..k {
        let nrm = norm_floor(
            (0..d)
                .map(|r| weights.data()[r * k + j].as_f64().powi(2))
                .sum::<f64>()
                .sqrt(),
        );
        w_norm[j] = nrm;
        for r in 0..d {
            w_hat[r * k + j] = weights.data()[r * k + j].as_f64() / nrm;
        }
    }

    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut z = vec![0.0; k];
    for i in 0..n {
        let y = labels[i];
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, zj) in z.iter_mut().enumerate() {
            let cos: f64 = (0..d).map(|r| e_hat[i * d + r] * w_hat[r * k + j]).sum();
            if cos > best.0 {
                best = (cos, j);
            }
            *zj = scale * (cos - if j == y { margin } else { 0.0 });
        }
        if best.1 == y {
            correct += 1;
        }
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
        for j in 0..k {
            probs[i * k + j] = (z[j] - zmax).exp() / denom;
        }
        // -log p_y; the ln_1p form keeps precision when the target logit dominates
        let rest: f64 = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| (v - z[y]).exp())
            .sum();
        loss += if z[y] >= zmax {
            rest.ln_1p()
        } else {
            zmax + denom.ln() - z[y]
        };
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("AM-softmax loss".into()));
    }
    Ok(AmSoftmaxOutput {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        cache: AmSoftmaxCache {
            e_hat,
            e_norm,
            w_hat,
            w_norm,
            probs,
            labels: labels.to_vec(),
            scale,
        },
    })
}

/// Gradients of the mean loss with respect to embeddings and class weights.
pub fn backward<T: Scalar>(
    emb: &Tensor<T>,
    weights: &Tensor<T>,
    cache: &AmSoftmaxCache,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = (emb.shape().n(), emb.shape().item_len());
    let k = weights.shape().c();
    if cache.labels.len() != n || cache.w_norm.len() != k {
        return Err(Error::shape("am_softmax backward: cache does not match inputs"));
    }
    let s = cache.scale;
    // dL/dcos_ij
    let mut dcos = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let onehot = if j == cache.labels[i] { 1.0 } else { 0.0 };
            dcos[i * k + j] = s * (cache.probs[i * k + j] - onehot) / n as f64;
        }
    }
    let mut de = vec![0.0; n * d];
    for i in 0..n {
        let eh = &cache.e_hat[i * d..(i + 1) * d];
        let mut dhat = vec![0.0; d];
        for (r, dh) in dhat.iter_mut().enumerate() {
            *dh = (0..k).map(|j| dcos[i * k + j] * cache.w_hat[r * k + j]).sum();
        }
        let proj: f64 = dhat.iter().zip(eh).map(|(a, b)| a * b).sum();
        for r in 0..d {
            de[i * d + r] = (dhat[r] - eh[r] * proj) / cache.e_norm[i];
        }
    }
    let mut dw = vec![0.0; d * k];
    for j in 0..k {
        let dhat: Vec<f64> = (0..d)
            .map(|r| (0..n).map(|i| dcos[i * k + j] * cache.e_hat[i * d + r]).sum())
            .collect();
        let proj: f64 = (0..d).map(|r| dhat[r] * cache.w_hat[r * k + j]).sum();
        for r in 0..d {
            dw[r * k + j] = (dhat[r] - cache.w_hat[r * k + j] * proj) / cache.w_norm[j];
        }
    }
    Ok((
        Tensor::from_vec(emb.shape(), de.into_iter().map(T::from_f64).collect())?,
        Tensor::from_vec(weights.shape(), dw.into_iter().map(T::from_f64).collect())?,
    ))
}
