use serde::{Deserialize, Serialize};

use super::{project_to_bins, HeadOutputs};
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::pairsampler::Slot;
use crate::trajdata::SupervisionTargets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pref: f64,
    pub lambda_prog: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pref: 1.0,
            lambda_prog: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub l_pref: f64,
    pub l_prog: f64,
    pub l_succ: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.l_pref.is_finite() && self.l_prog.is_finite() && self.l_succ.is_finite()
    }
}

/// Gradient of the total loss with respect to one example's head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    /// Flattened `T × N` progress logits.
    pub progress: Vec<f64>,
    pub success: Vec<f64>,
    pub pref: f64,
}

/// `−[y·ln σ(z) + (1−y)·ln σ(−z)]`, through probabilities so saturation
/// shows up as an infinite loss.
fn bce(z: f64, y: bool) -> f64 {
    if y {
        -sigmoid(z).ln()
    } else {
        -sigmoid(-z).ln()
    }
}

/// Batch loss `λ_pref·L_pref + λ_prog·L_prog + L_succ` and its gradients.
///
/// `L_pref` averages over examples, `L_prog` over every unmasked frame of
/// the batch. `L_succ` weights positives by `n_neg/max(n_pos, 1)` and then
/// rescales all weights to mean 1; with only one class present the weights
/// are uniform. Empty components are 0.
pub fn composite_loss(
    outputs: &[HeadOutputs],
    targets: &[&SupervisionTargets],
    prefs: &[Slot],
    n_bins: usize,
    weights: LossWeights,
) -> Result<(LossComponents, Vec<HeadGrads>)> {
    if outputs.len() != targets.len() || outputs.len() != prefs.len() || outputs.is_empty() {
        return Err(Error::InvalidArgument("outputs, targets and preferences must align".into()));
    }
    for (o, t) in outputs.iter().zip(targets) {
        if o.progress_dists.len() != t.len() || o.success_logits.len() != t.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames of outputs vs {} targets",
                o.progress_dists.len(),
                t.len()
            )));
        }
    }
    let b = outputs.len() as f64;
    let mut grads: Vec<HeadGrads> = outputs
        .iter()
        .map(|o| HeadGrads {
            progress: vec![0.0; o.progress_logits.len() * n_bins],
            success: vec![0.0; o.success_logits.len()],
            pref: 0.0,
        })
        .collect();

    let mut l_pref = 0.0;
    for ((o, &slot), g) in outputs.iter().zip(prefs).zip(grads.iter_mut()) {
        let y = slot == Slot::A;
        l_pref += bce(o.pref_logit, y);
        g.pref = weights.lambda_pref * (sigmoid(o.pref_logit) - if y { 1.0 } else { 0.0 }) / b;
    }
    l_pref /= b;

    let n_prog: usize = targets.iter().map(|t| t.progress_mask.iter().filter(|&&m| m).count()).sum();
    let mut l_prog = 0.0;
    if n_prog > 0 {
        for ((o, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
            for f in 0..t.len() {
                if !t.progress_mask[f] {
                    continue;
                }
                let y = project_to_bins(t.progress[f], n_bins)?;
                let p = &o.progress_dists[f];
                l_prog -= y.iter().zip(p).filter(|(&yi, _)| yi > 0.0).map(|(&yi, &pi)| yi * pi.ln()).sum::<f64>();
                for i in 0..n_bins {
                    g.progress[f * n_bins + i] = weights.lambda_prog * (p[i] - y[i]) / n_prog as f64;
                }
            }
        }
        l_prog /= n_prog as f64;
    }

    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for t in targets {
        for f in 0..t.len() {
            if t.success_mask[f] {
                if t.success[f] {
                    n_pos += 1;
                } else {
                    n_neg += 1;
                }
            }
        }
    }
    let n_succ = n_pos + n_neg;
    let mut l_succ = 0.0;
    if n_succ > 0 {
        let (w_pos, w_neg) = if n_pos > 0 && n_neg > 0 {
            let raw = n_neg as f64 / n_pos as f64;
            let mean = (raw * n_pos as f64 + n_neg as f64) / n_succ as f64;
            (raw / mean, 1.0 / mean)
        } else {
            (1.0, 1.0)
        };
        for ((o, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
            for f in 0..t.len() {
                if !t.success_mask[f] {
                    continue;
                }
                let y = t.success[f];
                let wt = if y { w_pos } else { w_neg };
                let z = o.success_logits[f];
                l_succ += wt * bce(z, y);
                g.success[f] = wt * (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n_succ as f64;
            }
        }
        l_succ /= n_succ as f64;
    }

    let total = weights.lambda_pref * l_pref + weights.lambda_prog * l_prog + l_succ;
    Ok((
        LossComponents {
            total,
            l_pref,
            l_prog,
            l_succ,
        },
        grads,
    ))
}

/// `composite_loss` for a batch of one.
pub fn example_loss(
    out: &HeadOutputs,
    targets: &SupervisionTargets,
    pref: Slot,
    n_bins: usize,
    weights: LossWeights,
) -> Result<(LossComponents, HeadGrads)> {
    let (c, mut g) = composite_loss(std::slice::from_ref(out), &[targets], &[pref], n_bins, weights)?;
    Ok((c, g.pop().unwrap()))
}
