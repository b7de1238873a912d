//! Differentiable kernels. Each forward map has a matching backward that
//! returns analytic gradients for its inputs and parameters.
//!
//! Kernels are pure functions; the only mutation is the running-statistics
//! update in [`batchnorm`], which callers must serialise.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor applied before the square root in statistics pooling.
pub const STATS_POOL_EPS: f64 = 1e-10;

/// Train / infer switch for batch normalisation. Always explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Infer,
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub const fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Stride 1, "same" padding for an odd `k×k` kernel.
    pub const fn same(k: usize) -> Self {
        ConvGeometry {
            stride: (1, 1),
            padding: (k / 2, k / 2),
        }
    }

    pub fn output_dims(&self, t: usize, f: usize, kt: usize, kf: usize) -> Option<(usize, usize)> {
        let pt = t + 2 * self.padding.0;
        let pf = f + 2 * self.padding.1;
        if pt < kt || pf < kf || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((pt - kt) / self.stride.0 + 1, (pf - kf) / self.stride.1 + 1))
    }
}

/// Convolution weights with geometry. Weight layout is (Cout, Cin, kT, kF).
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

struct ConvDims {
    n: usize,
    cin: usize,
    t: usize,
    f: usize,
    cout: usize,
    kt: usize,
    kf: usize,
    tout: usize,
    fout: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kt * self.kf
    }
    fn p(&self) -> usize {
        self.tout * self.fout
    }
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c() != xs.c() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, weight {} expects {}",
            xs.c(),
            ws,
            ws.c()
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n() {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries for {} output channels",
                b.len(),
                ws.n()
            )));
        }
    }
    let (tout, fout) = geom
        .output_dims(xs.t(), xs.f(), ws.t(), ws.f())
        .ok_or_else(|| {
            Error::shape(format!(
                "conv2d: padded input {xs} smaller than kernel {ws} or zero stride"
            ))
        })?;
    Ok(ConvDims {
        n: xs.n(),
        cin: xs.c(),
        t: xs.t(),
        f: xs.f(),
        cout: ws.n(),
        kt: ws.t(),
        kf: ws.f(),
        tout,
        fout,
    })
}

fn is_pointwise(d: &ConvDims, geom: ConvGeometry) -> bool {
    d.kt == 1 && d.kf == 1 && geom.stride == (1, 1) && geom.padding == (0, 0)
}

/// Unfolds one batch item into a (Cin·kT·kF) × (Tout·Fout) column matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, geom: ConvGeometry, cols: &mut [T]) {
    let (st, sf) = geom.stride;
    let (pt, pf) = geom.padding;
    let p = d.p();
    for ci in 0..d.cin {
        let plane = &x[ci * d.t * d.f..(ci + 1) * d.t * d.f];
        for a in 0..d.kt {
            for b in 0..d.kf {
                let row = ((ci * d.kt + a) * d.kf + b) * p;
                for to in 0..d.tout {
                    let ti = (to * st + a) as isize - pt as isize;
                    let dst = &mut cols[row + to * d.fout..row + (to + 1) * d.fout];
                    if ti < 0 || ti >= d.t as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ti as usize * d.f..(ti as usize + 1) * d.f];
                    for (fo, v) in dst.iter_mut().enumerate() {
                        let fi = (fo * sf + b) as isize - pf as isize;
                        *v = if fi < 0 || fi >= d.f as isize {
                            T::zero()
                        } else {
                            src[fi as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto an input-shaped buffer, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, geom: ConvGeometry, dx: &mut [T]) {
    let (st, sf) = geom.stride;
    let (pt, pf) = geom.padding;
    let p = d.p();
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.t * d.f..(ci + 1) * d.t * d.f];
        for a in 0..d.kt {
            for b in 0..d.kf {
                let row = ((ci * d.kt + a) * d.kf + b) * p;
                for to in 0..d.tout {
                    let ti = (to * st + a) as isize - pt as isize;
                    if ti < 0 || ti >= d.t as isize {
                        continue;
                    }
                    let src = &cols[row + to * d.fout..row + (to + 1) * d.fout];
                    let dst = &mut plane[ti as usize * d.f..(ti as usize + 1) * d.f];
                    for (fo, &v) in src.iter().enumerate() {
                        let fi = (fo * sf + b) as isize - pf as isize;
                        if fi >= 0 && fi < d.f as isize {
                            dst[fi as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over the (T, F) plane.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, bias, geom)?;
    let (k, p) = (d.k(), d.p());
    let mut out = Tensor::zeros(Shape::new(d.n, d.cout, d.tout, d.fout));
    let pointwise = is_pointwise(&d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let w = weight.data();
    let out_item = d.cout * p;
    for n in 0..d.n {
        let xi = x.item(n);
        let rhs: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, &d, geom, &mut cols);
            &cols
        };
        let o = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        gemm(d.cout, k, p, T::one(), (w, k, 1), (rhs, p, 1), T::zero(), (o, p, 1));
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                o[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_opt(x, weight, has_bias, geom, upstream, true)
}

/// Like [`conv2d_backward`]; with `want_x == false` the input gradient is
/// left at zero and its gemm/col2im are skipped.
pub fn conv2d_backward_opt<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    upstream: &Tensor<T>,
    want_x: bool,
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, weight, None, geom)?;
    let out_shape = Shape::new(d.n, d.cout, d.tout, d.fout);
    if upstream.shape() != out_shape {
        return Err(Error::shape(format!(
            "conv2d_backward: upstream {} but output is {out_shape}",
            upstream.shape()
        )));
    }
    let (k, p) = (d.k(), d.p());
    let pointwise = is_pointwise(&d, geom);
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = has_bias.then(|| Tensor::zeros(Shape::vectors(1, d.cout)));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); k * p];
    let w = weight.data();
    let item = x.shape().item_len();
    for n in 0..d.n {
        let dy = upstream.item(n);
        let xi = x.item(n);
        let rhs: &[T] = if pointwise {
            xi
        } else {
            im2col(xi, &d, geom, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(
            d.cout,
            p,
            k,
            T::one(),
            (dy, p, 1),
            (rhs, 1, p),
            T::one(),
            (grad_w.data_mut(), k, 1),
        );
        let gx = &mut grad_x.data_mut()[n * item..(n + 1) * item];
        // grad_x stays zero when the caller does not need it
        if want_x && pointwise {
            // dX = Wᵀ · dY
            gemm(d.cin, d.cout, p, T::one(), (w, 1, k), (dy, p, 1), T::zero(), (gx, p, 1));
        } else if want_x {
            gemm(k, d.cout, p, T::one(), (w, 1, k), (dy, p, 1), T::zero(), (&mut dcols, p, 1));
            col2im(&dcols, &d, geom, gx);
        }
        if let Some(gb) = grad_b.as_mut() {
            for (co, g) in gb.data_mut().iter_mut().enumerate() {
                *g += dy[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
    Ok(ConvGrads {
        grad_x,
        grad_weight: grad_w,
        grad_bias: grad_b,
    })
}

impl<T: Scalar> ConvParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.geometry)
    }

    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<ConvGrads<T>> {
        conv2d_backward(x, &self.weight, self.bias.is_some(), self.geometry, upstream)
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation
// ---------------------------------------------------------------------------

/// Per-channel affine parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, zero mean, unit variance.
    pub fn identity(channels: usize, mode: Mode) -> Self {
        let s = Shape::vectors(1, channels);
        BatchNormState {
            gamma: Tensor::full(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode,
        }
    }
}

/// Cached quantities of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_bn_channels<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batchnorm: input has {c} channels, parameters have {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Per-channel (mean, biased variance) over N, T, F, accumulated in f64.
fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let plane = s.plane_len();
    let m = (s.n() * plane) as f64;
    let mut mean = vec![0.0; s.c()];
    let mut var = vec![0.0; s.c()];
    for c in 0..s.c() {
        let mut acc = 0.0;
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            acc += x.data()[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0;
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            sq += x.data()[base..base + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    (mean, var)
}

/// Train-mode forward: normalise by batch statistics over (N, T, F) per channel.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    check_bn_channels(x, gamma, beta)?;
    let s = x.shape();
    if s.n() * s.plane_len() < 2 {
        return Err(Error::InvalidInput(format!(
            "batchnorm in train mode needs more than one value per channel, got {s}"
        )));
    }
    let (mean, var) = channel_moments(x);
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    let plane = s.plane_len();
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * plane;
            let mu = T::from_f64(mean[c]);
            let (g, b, is) = (gamma.data()[c], beta.data()[c], inv_std[c]);
            for i in base..base + plane {
                let h = (x.data()[i] - mu) * is;
                x_hat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns (dx, dgamma, dbeta) for a train-mode forward.
pub fn batchnorm_train_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = cache.x_hat.shape();
    if upstream.shape() != s {
        return Err(Error::shape("batchnorm_backward: upstream shape mismatch"));
    }
    let plane = s.plane_len();
    let m = T::from_f64((s.n() * plane) as f64);
    let mut dgamma = Tensor::zeros(Shape::vectors(1, s.c()));
    let mut dbeta = Tensor::zeros(Shape::vectors(1, s.c()));
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c() {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in base..base + plane {
                let dy = upstream.data()[i];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.x_hat.data()[i];
            }
        }
        dgamma.data_mut()[c] = sum_dy_xhat;
        dbeta.data_mut()[c] = sum_dy;
        let k = gamma.data()[c] * cache.inv_std[c] / m;
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in base..base + plane {
                let dy = upstream.data()[i];
                dx.data_mut()[i] = k * (m * dy - sum_dy - cache.x_hat.data()[i] * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Infer-mode forward using running statistics.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_bn_channels(x, gamma, beta)?;
    let s = x.shape();
    let plane = s.plane_len();
    let mut y = Tensor::zeros(s);
    for c in 0..s.c() {
        let is = T::from_f64(1.0 / (running_var.data()[c].as_f64() + eps).sqrt());
        let scale = gamma.data()[c] * is;
        let mu = running_mean.data()[c];
        let b = beta.data()[c];
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in base..base + plane {
                y.data_mut()[i] = (x.data()[i] - mu) * scale + b;
            }
        }
    }
    Ok(y)
}

/// Returns (dx, dgamma, dbeta) for an infer-mode forward.
pub fn batchnorm_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    upstream: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if upstream.shape() != s {
        return Err(Error::shape("batchnorm_backward: upstream shape mismatch"));
    }
    let plane = s.plane_len();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::vectors(1, s.c()));
    let mut dbeta = Tensor::zeros(Shape::vectors(1, s.c()));
    for c in 0..s.c() {
        let is = T::from_f64(1.0 / (running_var.data()[c].as_f64() + eps).sqrt());
        let mu = running_mean.data()[c];
        let g = gamma.data()[c];
        for n in 0..s.n() {
            let base = (n * s.c() + c) * plane;
            for i in base..base + plane {
                let dy = upstream.data()[i];
                dx.data_mut()[i] = dy * g * is;
                dgamma.data_mut()[c] += dy * (x.data()[i] - mu) * is;
                dbeta.data_mut()[c] += dy;
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Momentum update of running statistics; uses the unbiased variance estimate.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    cache: &BnCache<T>,
    momentum: f64,
) {
    let s = cache.x_hat.shape();
    let m = (s.n() * s.plane_len()) as f64;
    let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    for c in 0..s.c() {
        let rm = &mut running_mean.data_mut()[c];
        *rm = T::from_f64((1.0 - momentum) * rm.as_f64() + momentum * cache.mean[c]);
        let rv = &mut running_var.data_mut()[c];
        *rv = T::from_f64((1.0 - momentum) * rv.as_f64() + momentum * cache.var[c] * correction);
    }
}

/// Batch normalisation driven by an explicit state record.
///
/// In train mode the running statistics are updated in place.
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    match state.mode {
        Mode::Train => {
            let (y, cache) = batchnorm_train(x, &state.gamma, &state.beta, state.eps)?;
            update_running_stats(
                &mut state.running_mean,
                &mut state.running_var,
                &cache,
                state.momentum,
            );
            Ok(y)
        }
        Mode::Infer => batchnorm_infer(
            x,
            &state.gamma,
            &state.beta,
            &state.running_mean,
            &state.running_var,
            state.eps,
        ),
    }
}

// ---------------------------------------------------------------------------
// Point-wise nonlinearities
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let mut g = upstream.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Saturated outputs are pulled back to the largest value below 1 in
/// magnitude, so `1 ± tanh(x)` never collapses to exactly 0.
pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lim = T::one() - T::epsilon() / T::from_f64(2.0);
    x.map(|v| v.tanh().max(-lim).min(lim))
}

/// Uses the forward output `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let mut g = upstream.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= T::one() - yv * yv;
    }
    g
}

// ---------------------------------------------------------------------------
// Frequency upsampling
// ---------------------------------------------------------------------------

/// Source taps for 2× half-pixel bilinear upsampling: (i0, i1, w0, w1) per output bin.
///
/// `src = (dst + 0.5) / 2 - 0.5`, clamped to the valid range at both edges.
pub fn upsample_taps(f_in: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * f_in)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(f_in - 1);
            let i1 = (i0 + 1).min(f_in - 1);
            let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - lambda, lambda)
        })
        .collect()
}

/// Bilinear ×2 upsampling along frequency; time and channels unchanged.
pub fn upsample_bilinear_freq<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let taps = upsample_taps(s.f());
    let out_shape = Shape::new(s.n(), s.c(), s.t(), 2 * s.f());
    let mut out = Tensor::zeros(out_shape);
    let rows = s.n() * s.c() * s.t();
    let (fi, fo) = (s.f(), 2 * s.f());
    for r in 0..rows {
        let src = &x.data()[r * fi..(r + 1) * fi];
        let dst = &mut out.data_mut()[r * fo..(r + 1) * fo];
        for (d, &(i0, i1, w0, w1)) in dst.iter_mut().zip(&taps) {
            *d = src[i0] * T::from_f64(w0) + src[i1] * T::from_f64(w1);
        }
    }
    out
}

pub fn upsample_bilinear_freq_backward<T: Scalar>(
    input_shape: Shape,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input_shape;
    if upstream.shape() != Shape::new(s.n(), s.c(), s.t(), 2 * s.f()) {
        return Err(Error::shape("upsample backward: upstream shape mismatch"));
    }
    let taps = upsample_taps(s.f());
    let mut dx = Tensor::zeros(s);
    let (fi, fo) = (s.f(), 2 * s.f());
    for r in 0..s.n() * s.c() * s.t() {
        let g = &upstream.data()[r * fo..(r + 1) * fo];
        let d = &mut dx.data_mut()[r * fi..(r + 1) * fi];
        for (&gv, &(i0, i1, w0, w1)) in g.iter().zip(&taps) {
            d[i0] += gv * T::from_f64(w0);
            d[i1] += gv * T::from_f64(w1);
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

/// `[x, y]` along channels; `x` occupies the leading block.
pub fn concat_channels<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = (x.shape(), y.shape());
    if a.n() != b.n() || a.t() != b.t() || a.f() != b.f() {
        return Err(Error::shape(format!("concat_channels: {a} vs {b}")));
    }
    let out_shape = Shape::new(a.n(), a.c() + b.c(), a.t(), a.f());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..a.n() {
        data.extend_from_slice(x.item(n));
        data.extend_from_slice(y.item(n));
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits off the first `c_first` channels.
pub fn split_channels<T: Scalar>(z: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = z.shape();
    if c_first == 0 || c_first >= s.c() {
        return Err(Error::shape(format!("cannot split {s} at channel {c_first}")));
    }
    let plane = s.plane_len();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in 0..s.n() {
        let item = z.item(n);
        a.extend_from_slice(&item[..c_first * plane]);
        b.extend_from_slice(&item[c_first * plane..]);
    }
    Ok((
        Tensor::from_vec(Shape::new(s.n(), c_first, s.t(), s.f()), a)?,
        Tensor::from_vec(Shape::new(s.n(), s.c() - c_first, s.t(), s.f()), b)?,
    ))
}

// ---------------------------------------------------------------------------
// Statistics pooling
// ---------------------------------------------------------------------------

/// Mean and standard deviation over time of every (channel, frequency) pair.
///
/// Output is (N, 2·C·F, 1, 1): all means (in (C, F) order) followed by all stds.
/// Population variance, floored at [`STATS_POOL_EPS`] before the square root.
pub fn stats_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let d = s.c() * s.f();
    let tn = T::from_f64(s.t() as f64);
    let eps = T::from_f64(STATS_POOL_EPS);
    let mut out = Tensor::zeros(Shape::vectors(s.n(), 2 * d));
    for n in 0..s.n() {
        for c in 0..s.c() {
            for f in 0..s.f() {
                let j = c * s.f() + f;
                let mut sum = T::zero();
                for t in 0..s.t() {
                    sum += x.at(n, c, t, f);
                }
                let mean = sum / tn;
                let mut sq = T::zero();
                for t in 0..s.t() {
                    let dv = x.at(n, c, t, f) - mean;
                    sq += dv * dv;
                }
                let var = (sq / tn).max(eps);
                let o = out.data_mut();
                o[n * 2 * d + j] = mean;
                o[n * 2 * d + d + j] = var.sqrt();
            }
        }
    }
    out
}

pub fn stats_pool_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let d = s.c() * s.f();
    if upstream.shape() != Shape::vectors(s.n(), 2 * d) {
        return Err(Error::shape("stats_pool backward: upstream shape mismatch"));
    }
    let tn = T::from_f64(s.t() as f64);
    let eps = T::from_f64(STATS_POOL_EPS);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            for f in 0..s.f() {
                let j = c * s.f() + f;
                let g_mean = upstream.data()[n * 2 * d + j];
                let g_std = upstream.data()[n * 2 * d + d + j];
                let mut sum = T::zero();
                for t in 0..s.t() {
                    sum += x.at(n, c, t, f);
                }
                let mean = sum / tn;
                let mut sq = T::zero();
                for t in 0..s.t() {
                    let dv = x.at(n, c, t, f) - mean;
                    sq += dv * dv;
                }
                let var = sq / tn;
                // d std / d x_t = (x_t - mean) / (T · std), zero where the floor is active
                let k = if var > eps { g_std / (tn * var.sqrt()) } else { T::zero() };
                for t in 0..s.t() {
                    let v = g_mean / tn + k * (x.at(n, c, t, f) - mean);
                    dx.set(n, c, t, f, v);
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

/// `y = x·Wᵀ + b` for a batch of row vectors. `x` is (N, Din, 1, 1), `W` is (Dout, Din, 1, 1).
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din) = (x.shape().n(), x.shape().item_len());
    let (dout, wdin) = (w.shape().n(), w.shape().item_len());
    if din != wdin {
        return Err(Error::shape(format!(
            "linear: input length {din}, weight expects {wdin}"
        )));
    }
    if let Some(b) = b {
        if b.len() != dout {
            return Err(Error::shape("linear: bias length mismatch"));
        }
    }
    let mut y = Tensor::zeros(Shape::vectors(n, dout));
    gemm(
        n,
        din,
        dout,
        T::one(),
        (x.data(), din, 1),
        (w.data(), 1, din),
        T::zero(),
        (y.data_mut(), dout, 1),
    );
    if let Some(b) = b {
        for row in y.data_mut().chunks_exact_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Returns (dx, dW, db).
#[allow(clippy::type_complexity)]
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, din) = (x.shape().n(), x.shape().item_len());
    let dout = w.shape().n();
    if upstream.shape() != Shape::vectors(n, dout) {
        return Err(Error::shape("linear backward: upstream shape mismatch"));
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        n,
        dout,
        din,
        T::one(),
        (upstream.data(), dout, 1),
        (w.data(), din, 1),
        T::zero(),
        (dx.data_mut(), din, 1),
    );
    let mut dw = Tensor::zeros(w.shape());
    gemm(
        dout,
        n,
        din,
        T::one(),
        (upstream.data(), 1, dout),
        (x.data(), din, 1),
        T::zero(),
        (dw.data_mut(), din, 1),
    );
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(Shape::vectors(1, dout));
        for row in upstream.data().chunks_exact(dout) {
            for (g, &v) in db.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        db
    });
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// Element-wise arithmetic
// ---------------------------------------------------------------------------

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn ew_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "ew_add", |x, y| x + y)
}

pub fn ew_sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "ew_sub", |x, y| x - y)
}

pub fn ew_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, "ew_mul", |x, y| x * y)
}

/// `s ⊕ x`: the scalar broadcast over every element.
pub fn scalar_add<T: Scalar>(s: T, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| s + v)
}

/// `s ⊖ x`.
pub fn scalar_sub<T: Scalar>(s: T, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| s - v)
}
