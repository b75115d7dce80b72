//! Dense kernels with hand-written backward passes.
//!
//! Matrices are row-major `f64` slices. A linear layer stores its weight as
//! `[out, in]` so `out = inp · wᵀ + b`. Parameters live in `f32` and are
//! widened once per step; every kernel processes rows independently, which
//! keeps outputs at position `t` bit-identical whatever follows it.

mod params;

pub use params::{AdamW, ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Dot product with four fixed accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha · x`
#[inline]
pub fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n, o] = inp[n, :] · w[o, :] + b[o]`
pub fn linear_forward(out: &mut [f64], inp: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, i_dim: usize, o_dim: usize) {
    for r in 0..n {
        let x = &inp[r * i_dim..(r + 1) * i_dim];
        let y = &mut out[r * o_dim..(r + 1) * o_dim];
        for o in 0..o_dim {
            let bias = b.map_or(0.0, |b| b[o]);
            y[o] = bias + dot(x, &w[o * i_dim..(o + 1) * i_dim]);
        }
    }
}

/// Accumulates input, weight and bias gradients of `linear_forward`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dinp: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    n: usize,
    i_dim: usize,
    o_dim: usize,
) {
    if let Some(dinp) = dinp {
        for r in 0..n {
            let dx = &mut dinp[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let d = dout[r * o_dim + o];
                if d != 0.0 {
                    axpy(dx, &w[o * i_dim..(o + 1) * i_dim], d);
                }
            }
        }
    }
    for r in 0..n {
        let x = &inp[r * i_dim..(r + 1) * i_dim];
        for o in 0..o_dim {
            let d = dout[r * o_dim + o];
            if d != 0.0 {
                axpy(&mut dw[o * i_dim..(o + 1) * i_dim], x, d);
            }
        }
    }
    if let Some(db) = db {
        for r in 0..n {
            axpy(db, &dout[r * o_dim..(r + 1) * o_dim], 1.0);
        }
    }
}

/// Row-wise layer norm; returns per-row `(mean, rstd)` for the backward.
pub fn layernorm_forward(out: &mut [f64], inp: &[f64], g: &[f64], b: &[f64], n: usize, dim: usize) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(n);
    for r in 0..n {
        let x = &inp[r * dim..(r + 1) * dim];
        let mean = x.iter().sum::<f64>() / dim as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let y = &mut out[r * dim..(r + 1) * dim];
        for i in 0..dim {
            y[i] = (x[i] - mean) * rstd * g[i] + b[i];
        }
        stats.push((mean, rstd));
    }
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dinp: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    g: &[f64],
    stats: &[(f64, f64)],
    dim: usize,
) {
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let x = &inp[r * dim..(r + 1) * dim];
        let dy = &dout[r * dim..(r + 1) * dim];
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..dim {
            let norm = (x[i] - mean) * rstd;
            let dnorm = g[i] * dy[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= dim as f64;
        dnorm_norm_mean /= dim as f64;
        let dx = &mut dinp[r * dim..(r + 1) * dim];
        for i in 0..dim {
            let norm = (x[i] - mean) * rstd;
            let dnorm = g[i] * dy[i];
            db[i] += dy[i];
            dg[i] += norm * dy[i];
            dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * rstd;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let cube = 0.044715 * x * x * x;
    let t = (GELU_SCALE * (x + cube)).tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax in place.
pub fn softmax(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Causal multi-head attention over `qkv` rows `[q | k | v]` of width
/// `3·dim`. Fills `att` (`heads × n × n`, zero above the diagonal) and `out`.
pub fn attention_forward(out: &mut [f64], att: &mut [f64], qkv: &[f64], n: usize, dim: usize, heads: usize) {
    let hs = dim / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let w3 = 3 * dim;
    out.fill(0.0);
    for h in 0..heads {
        for t in 0..n {
            let q = &qkv[t * w3 + h * hs..t * w3 + (h + 1) * hs];
            let row = &mut att[(h * n + t) * n..(h * n + t + 1) * n];
            for t2 in 0..=t {
                let k = &qkv[t2 * w3 + dim + h * hs..t2 * w3 + dim + (h + 1) * hs];
                row[t2] = dot(q, k) * scale;
            }
            softmax(&mut row[..=t]);
            for x in row[t + 1..].iter_mut() {
                *x = 0.0;
            }
            let o = &mut out[t * dim + h * hs..t * dim + (h + 1) * hs];
            for t2 in 0..=t {
                let v = &qkv[t2 * w3 + 2 * dim + h * hs..t2 * w3 + 2 * dim + (h + 1) * hs];
                axpy(o, v, row[t2]);
            }
        }
    }
}

pub fn attention_backward(dqkv: &mut [f64], dout: &[f64], qkv: &[f64], att: &[f64], n: usize, dim: usize, heads: usize) {
    let hs = dim / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let w3 = 3 * dim;
    let mut datt = vec![0.0; n];
    for h in 0..heads {
        for t in 0..n {
            let row = &att[(h * n + t) * n..(h * n + t + 1) * n];
            let dout_t = &dout[t * dim + h * hs..t * dim + (h + 1) * hs];
            for t2 in 0..=t {
                let v_off = t2 * w3 + 2 * dim + h * hs;
                datt[t2] = dot(&qkv[v_off..v_off + hs], dout_t);
                axpy(&mut dqkv[v_off..v_off + hs], dout_t, row[t2]);
            }
            // Softmax backward: dpre = att ⊙ (datt − Σ att·datt).
            let inner = dot(&row[..=t], &datt[..=t]);
            let q_off = t * w3 + h * hs;
            for t2 in 0..=t {
                let dpre = row[t2] * (datt[t2] - inner) * scale;
                if dpre == 0.0 {
                    continue;
                }
                let k_off = t2 * w3 + dim + h * hs;
                for i in 0..hs {
                    dqkv[q_off + i] += qkv[k_off + i] * dpre;
                    dqkv[k_off + i] += qkv[q_off + i] * dpre;
                }
            }
        }
    }
}
