//! Small f64 MLPs with tanh hidden layers, flat parameter vectors and
//! batched analytic backprop.

use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations kept for backprop: `acts[0]` is the input, `acts[l]` the
/// post-activation output of layer `l` (the last one linear).
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub n: usize,
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Weights `N(0, 1/fan_in)`, last layer scaled by `out_scale`, biases 0.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let mut std = (1.0 / i as f64).sqrt();
            if l + 1 == layers {
                std *= out_scale;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            params.extend((0..i * o).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.sizes[k] * self.sizes[k + 1] + self.sizes[k + 1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    /// Forward over `n` row-major inputs.
    pub fn forward(&self, x: &[f64], n: usize) -> MlpCache {
        assert_eq!(x.len(), n * self.input_dim(), "input size mismatch");
        let layers = self.sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        for l in 0..layers {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let w = &self.params[wo..wo + i * o];
            let b = &self.params[bo..bo + o];
            let inp = &acts[l];
            let mut out = vec![0.0; n * o];
            for r in 0..n {
                let xi = &inp[r * i..(r + 1) * i];
                for j in 0..o {
                    let wj = &w[j * i..(j + 1) * i];
                    let mut s = b[j];
                    for k in 0..i {
                        s += wj[k] * xi[k];
                    }
                    out[r * o + j] = if l + 1 < layers { s.tanh() } else { s };
                }
            }
            acts.push(out);
        }
        MlpCache { n, acts }
    }

    pub fn predict(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward(x, n).acts.pop().unwrap_or_default()
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut [f64]) {
        let n = cache.n;
        let layers = self.sizes.len() - 1;
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            if l + 1 < layers {
                let y = &cache.acts[l + 1];
                for (d, yv) in delta.iter_mut().zip(y) {
                    *d *= 1.0 - yv * yv;
                }
            }
            let inp = &cache.acts[l];
            let mut dinp = vec![0.0; if l > 0 { n * i } else { 0 }];
            for r in 0..n {
                let xi = &inp[r * i..(r + 1) * i];
                for j in 0..o {
                    let d = delta[r * o + j];
                    if d == 0.0 {
                        continue;
                    }
                    grads[bo + j] += d;
                    let gw = &mut grads[wo + j * i..wo + (j + 1) * i];
                    for k in 0..i {
                        gw[k] += d * xi[k];
                    }
                    if l > 0 {
                        let wj = &self.params[wo + j * i..wo + (j + 1) * i];
                        let di = &mut dinp[r * i..(r + 1) * i];
                        for k in 0..i {
                            di[k] += d * wj[k];
                        }
                    }
                }
            }
            delta = dinp;
        }
    }

    /// `self ← (1−rate)·self + rate·src`.
    pub fn polyak_from(&mut self, src: &Mlp, rate: f64) {
        for (t, s) in self.params.iter_mut().zip(&src.params) {
            *t = (1.0 - rate) * *t + rate * s;
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub lr: f64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}
