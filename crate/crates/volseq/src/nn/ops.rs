//! Elementwise and per-row kernels: linear maps, layer normalization, GELU,
//! tanh, softmax helpers, dropout and pooling.

use rand::Rng;

/// Sum of `values` in a canonical order (ascending by total order).
///
/// Invariant: the result depends only on the multiset of addends, never on
/// their original order. Cross-token reductions in attention use this so that
/// permuting token slots permutes outputs without perturbing a single bit.
pub fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// `y = x W + b` for a row-major `rows x in_dim` input.
///
/// Weights are stored input-major (`w[i*out_dim + o]`), so the inner loop
/// runs over contiguous output slices and vectorizes.
pub fn linear_forward(
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(y.len(), rows * out_dim);
    for r in 0..rows {
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        yr.copy_from_slice(b);
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[i * out_dim..(i + 1) * out_dim];
            for (yo, &wv) in yr.iter_mut().zip(wrow) {
                *yo += xv * wv;
            }
        }
    }
}

/// Backward of [`linear_forward`]. Accumulates into `dw`/`db`, overwrites `dx`.
pub fn linear_backward(
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            let wrow = &w[i * out_dim..(i + 1) * out_dim];
            let mut acc = 0.0;
            for (dv, wv) in dyr.iter().zip(wrow) {
                acc += dv * wv;
            }
            dxr[i] = acc;
            let xv = xr[i];
            if xv != 0.0 {
                let dwrow = &mut dw[i * out_dim..(i + 1) * out_dim];
                for (dwv, dv) in dwrow.iter_mut().zip(dyr) {
                    *dwv += xv * dv;
                }
            }
        }
        for (dbv, dv) in db.iter_mut().zip(dyr) {
            *dbv += dv;
        }
    }
}

/// Per-row statistics cached by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-6;

/// Layer normalization over the trailing dimension of a `rows x dim` matrix:
/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm_forward(
    rows: usize,
    dim: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
) -> LayerNormCache {
    let mut cache = LayerNormCache { mean: vec![0.0; rows], rstd: vec![0.0; rows] };
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let yr = &mut y[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..dim {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        cache.mean[r] = mean;
        cache.rstd[r] = rstd;
    }
    cache
}

/// Backward of [`layer_norm_forward`]. Accumulates into `dgamma`/`dbeta`,
/// overwrites `dx`.
pub fn layer_norm_backward(
    rows: usize,
    dim: usize,
    x: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = dim as f64;
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        let mean = cache.mean[r];
        let rstd = cache.rstd[r];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..dim {
            let xhat = (xr[i] - mean) * rstd;
            let g = dyr[i] * gamma[i];
            sum_g += g;
            sum_gx += g * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        for i in 0..dim {
            let xhat = (xr[i] - mean) * rstd;
            let g = dyr[i] * gamma[i];
            dxr[i] = rstd * (g - sum_g / n - xhat * sum_gx / n);
        }
    }
}

/// Exact GELU: `x/2 * (1 + erf(x / sqrt(2)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_forward(x: &[f64], y: &mut [f64]) {
    for (yo, &xv) in y.iter_mut().zip(x) {
        *yo = gelu(xv);
    }
}

/// `dx = dy * gelu'(x)`, overwriting `dx`.
pub fn gelu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        dx[i] = dy[i] * gelu_grad(x[i]);
    }
}

pub fn tanh_forward(x: &[f64], y: &mut [f64]) {
    for (yo, &xv) in y.iter_mut().zip(x) {
        *yo = xv.tanh();
    }
}

/// `dx = dy * (1 - tanh(x)^2)` given the cached output `y = tanh(x)`.
pub fn tanh_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..y.len() {
        dx[i] = dy[i] * (1.0 - y[i] * y[i]);
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax; returns the probabilities.
pub fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Numerically stable log-softmax; returns the log-probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logz = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - logz).collect()
}

/// Inverted dropout. Scales kept activations by `1/(1-p)` in place and
/// returns the mask; with `p = 0` the input is untouched and the mask empty.
pub fn dropout_forward<R: Rng>(x: &mut [f64], p: f64, rng: &mut R) -> Vec<bool> {
    if p <= 0.0 {
        return Vec::new();
    }
    let scale = 1.0 / (1.0 - p);
    let mut mask = vec![false; x.len()];
    for i in 0..x.len() {
        if rng.random::<f64>() < p {
            x[i] = 0.0;
        } else {
            x[i] *= scale;
            mask[i] = true;
        }
    }
    mask
}

/// Applies the dropout mask to a gradient in place.
pub fn dropout_backward(mask: &[bool], p: f64, dx: &mut [f64]) {
    if mask.is_empty() {
        return;
    }
    let scale = 1.0 / (1.0 - p);
    for i in 0..dx.len() {
        dx[i] = if mask[i] { dx[i] * scale } else { 0.0 };
    }
}

/// Mean over spatial positions, per channel: `n_pos x c -> c`.
pub fn global_avg_pool_forward(n_pos: usize, c: usize, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..n_pos {
        let xr = &x[p * c..(p + 1) * c];
        for (yo, &xv) in y.iter_mut().zip(xr) {
            *yo += xv;
        }
    }
    let inv = 1.0 / n_pos as f64;
    for v in y.iter_mut() {
        *v *= inv;
    }
}

pub fn global_avg_pool_backward(n_pos: usize, c: usize, dy: &[f64], dx: &mut [f64]) {
    let inv = 1.0 / n_pos as f64;
    for p in 0..n_pos {
        let dxr = &mut dx[p * c..(p + 1) * c];
        for (dv, &gy) in dxr.iter_mut().zip(dy) {
            *dv = gy * inv;
        }
    }
}
