use rand::Rng as _;
use serde::Serialize;

use super::{example_loss, LossWeights, RewardNet};
use crate::error::Result;
use crate::pairsampler::TrainingExample;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Analytic gradient of the total loss for one example (eval mode).
pub fn loss_and_grad(net: &RewardNet, ex: &TrainingExample, weights: LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    let w = net.params.widen();
    let (out, cache) = net.forward_example(&w, ex, None)?;
    let (c, g) = example_loss(&out, &ex.targets_a, ex.pref_target, net.cfg.n_bins, weights)?;
    let mut grads = net.params.zeros_f64();
    net.backward_example(&w, &cache, &g, &mut grads);
    Ok((c.total, grads))
}

fn loss_only(net: &RewardNet, ex: &TrainingExample, weights: LossWeights) -> Result<f64> {
    let w = net.params.widen();
    let (out, _) = net.forward_example(&w, ex, None)?;
    Ok(example_loss(&out, &ex.targets_a, ex.pref_target, net.cfg.n_bins, weights)?.0.total)
}

/// Central differences on 64 random parameters (tensor drawn uniformly,
/// then an element). The step actually taken is measured after rounding
/// the perturbed parameter to `f32`.
pub fn grad_check(net: &RewardNet, ex: &TrainingExample, eps: f64, weights: LossWeights, seed: u64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(net, ex, weights)?;
    let mut probe = net.clone();
    let mut rng = rng_for(&[0x6C, seed]);
    let mut entries = Vec::with_capacity(64);
    for _ in 0..64 {
        let id = rng.random_range(0..probe.params.len());
        let idx = rng.random_range(0..probe.params.tensor(id).data.len());
        let orig = probe.params.tensor(id).data[idx];
        let up = (orig as f64 + eps) as f32;
        let down = (orig as f64 - eps) as f32;
        probe.params.tensor_mut(id).data[idx] = up;
        let l_up = loss_only(&probe, ex, weights)?;
        probe.params.tensor_mut(id).data[idx] = down;
        let l_down = loss_only(&probe, ex, weights)?;
        probe.params.tensor_mut(id).data[idx] = orig;
        let numeric = (l_up - l_down) / (up as f64 - down as f64);
        let analytic = grads[id][idx];
        let rel_err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        entries.push(GradCheckEntry {
            param: probe.params.tensor(id).name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, entries })
}
