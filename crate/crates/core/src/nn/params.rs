use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Named `f32` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: data does not match shape");
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Parameters widened to `f64` for a forward/backward pass.
    pub fn widen(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.iter().map(|&x| x as f64).collect()).collect()
    }

    pub fn zeros_f64(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f32` so that a
/// checkpoint holds the optimizer state exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with 1-based step count `t`. Decay applies to matrices only.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64, t: usize) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (id, g) in grads.iter().enumerate() {
            let tensor = params.tensor_mut(id);
            let decay = if tensor.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..g.len() {
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g[i];
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g[i] * g[i];
                m[i] = mi as f32;
                v[i] = vi as f32;
                let p = tensor.data[i] as f64;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps) + decay * p;
                tensor.data[i] = (p - lr * update) as f32;
            }
        }
    }
}
