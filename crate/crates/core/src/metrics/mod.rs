//! Evaluation metrics as pure kernels, plus a dataset-level report.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairsampler::Slot;
use crate::scoring::{ClipRef, RewardModel};
use crate::trajdata::{Dataset, Quality, Trajectory};

fn need_len(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least 2 values, got {n}")));
    }
    Ok(())
}

/// Pearson r with the two-pass centred formula; 0 when either side has
/// zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    need_len(x.len(), "pearson")?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of a reward trace with time.
pub fn voc(rewards: &[f64]) -> Result<f64> {
    let t: Vec<f64> = (1..=rewards.len()).map(|i| i as f64).collect();
    pearson(rewards, &t)
}

/// `(concordant − discordant) / (n(n−1)/2)`; pairs tied on either side
/// count as neither.
pub fn kendall_tau_a(scores: &[f64], gt_ranks: &[i64]) -> Result<f64> {
    if scores.len() != gt_ranks.len() {
        return Err(Error::InvalidArgument("scores and ranks differ in length".into()));
    }
    let n = scores.len();
    need_len(n, "kendall_tau_a")?;
    let mut s: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = scores[i].partial_cmp(&scores[j]).map_or(0, |o| o as i64);
            let b = (gt_ranks[i] - gt_ranks[j]).signum();
            s += a * b;
        }
    }
    Ok(s as f64 / (n * (n - 1) / 2) as f64)
}

/// Mean final reward of experts minus that of failures.
pub fn succ_fail_gap(finals_by_quality: &HashMap<Quality, Vec<f64>>) -> Result<f64> {
    let mean = |q: Quality| -> Result<f64> {
        match finals_by_quality.get(&q) {
            Some(v) if !v.is_empty() => Ok(v.iter().sum::<f64>() / v.len() as f64),
            _ => Err(Error::InvalidArgument(format!("no {q:?} trajectories"))),
        }
    };
    Ok(mean(Quality::Expert)? - mean(Quality::Fail)?)
}

/// Mean over columns of the column-normalised diagonal entry.
pub fn confusion_diag_mean(r: &[Vec<f64>]) -> Result<f64> {
    let k = r.len();
    if k < 2 || r.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidArgument(format!("confusion matrix must be K×K with K ≥ 2, got {k} rows")));
    }
    if r.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("confusion entries must be finite and nonnegative".into()));
    }
    let mut total = 0.0;
    for j in 0..k {
        let col: f64 = r.iter().map(|row| row[j]).sum();
        if col == 0.0 {
            return Err(Error::InvalidArgument(format!("column {j} is all zero")));
        }
        total += r[j][j] / col;
    }
    Ok(total / k as f64)
}

/// `R[i][j]` = final expected progress of video `i` under instruction `j`.
pub fn build_confusion(model: &dyn RewardModel, tasks: &[(ClipRef<'_>, String)]) -> Result<Vec<Vec<f64>>> {
    if tasks.len() < 2 {
        return Err(Error::InvalidArgument("confusion needs at least 2 tasks".into()));
    }
    tasks
        .iter()
        .map(|(clip, _)| {
            tasks
                .iter()
                .map(|(_, instr)| Ok(model.trace(instr, clip)?.final_progress()))
                .collect()
        })
        .collect()
}

/// A comparison with a known winner.
#[derive(Debug, Clone)]
pub struct LabeledPair<'a> {
    pub instruction: String,
    pub a: ClipRef<'a>,
    pub b: ClipRef<'a>,
    pub winner: Slot,
}

/// Fraction of correct orderings, each pair scored in both slot orders.
pub fn pref_accuracy(model: &dyn RewardModel, pairs: &[LabeledPair<'_>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    let mut correct = 0usize;
    for p in pairs {
        let fwd = model.prefer(&p.instruction, &p.a, &p.b)? > 0.5;
        let rev = model.prefer(&p.instruction, &p.b, &p.a)? > 0.5;
        correct += usize::from(fwd == (p.winner == Slot::A));
        correct += usize::from(rev == (p.winner == Slot::B));
    }
    Ok(correct as f64 / (2 * pairs.len()) as f64)
}

/// Score on the 1–5 scale: `round(1 + 4p)` clamped.
pub fn progress_to_score(p: f64) -> i64 {
    ((1.0 + 4.0 * p).round() as i64).clamp(1, 5)
}

pub fn binned_mae(pred_progress: &[f64], gt_scores: &[i64]) -> Result<f64> {
    if pred_progress.len() != gt_scores.len() || pred_progress.is_empty() {
        return Err(Error::InvalidArgument("predictions and scores must be nonempty and aligned".into()));
    }
    if let Some(g) = gt_scores.iter().find(|g| !(1..=5).contains(*g)) {
        return Err(Error::InvalidArgument(format!("ground-truth score {g} outside 1..5")));
    }
    let total: i64 = pred_progress
        .iter()
        .zip(gt_scores)
        .map(|(&p, &g)| (progress_to_score(p) - g).abs())
        .sum();
    Ok(total as f64 / pred_progress.len() as f64)
}

/// How a trajectory is reduced to one number for ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScore {
    /// Expected progress at the final frame.
    #[default]
    Final,
    /// Mean expected progress over the trajectory.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub instruction: String,
    pub n: usize,
    pub voc_mean: Option<f64>,
    pub kendall_tau_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean VOC over expert trajectories.
    pub voc_mean: Option<f64>,
    /// Mean over instructions of τ_a between scores and outcome rank.
    pub kendall_tau_a: Option<f64>,
    pub succ_fail_gap: Option<f64>,
    pub confusion_diag_mean: Option<f64>,
    pub pref_accuracy: Option<f64>,
    pub binned_mae: Option<f64>,
    pub per_task: Vec<TaskMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub rank_score: RankScore,
    /// Ground-truth final progress per trajectory id, for binned MAE on
    /// trajectories whose manifest carries none.
    pub gt_final: HashMap<String, f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Every metric that the dataset's composition allows. Trajectories are
/// grouped by instruction; the confusion matrix uses the first expert of
/// each instruction and preference pairs are all same-instruction pairs of
/// distinct outcome rank.
pub fn evaluate(model: &dyn RewardModel, ds: &Dataset, opts: &EvalOptions) -> Result<MetricReport> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in ds.trajectories.iter().enumerate() {
        groups.entry(t.instruction.as_str()).or_default().push(i);
    }
    let mut traces = Vec::with_capacity(ds.len());
    for t in &ds.trajectories {
        traces.push(model.trace(&t.instruction, &ClipRef::full(t))?);
    }
    let score = |i: usize| -> f64 {
        match opts.rank_score {
            RankScore::Final => traces[i].final_progress(),
            RankScore::Mean => mean(&traces[i].progress).unwrap_or(0.0),
        }
    };

    let mut per_task = Vec::new();
    let mut vocs_all = Vec::new();
    let mut taus = Vec::new();
    for (instr, idx) in &groups {
        let mut vocs = Vec::new();
        for &i in idx {
            if ds.trajectories[i].quality == Quality::Expert && traces[i].progress.len() >= 2 {
                vocs.push(voc(&traces[i].progress)?);
            }
        }
        vocs_all.extend_from_slice(&vocs);
        let labeled: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| ds.trajectories[i].quality != Quality::Unlabeled)
            .collect();
        let ranks: Vec<i64> = labeled.iter().map(|&i| ds.trajectories[i].quality.rank() as i64).collect();
        let tau = if labeled.len() >= 2 && ranks.iter().any(|&r| r != ranks[0]) {
            let s: Vec<f64> = labeled.iter().map(|&i| score(i)).collect();
            let t = kendall_tau_a(&s, &ranks)?;
            taus.push(t);
            Some(t)
        } else {
            None
        };
        per_task.push(TaskMetrics {
            instruction: instr.to_string(),
            n: idx.len(),
            voc_mean: mean(&vocs),
            kendall_tau_a: tau,
        });
    }

    let mut finals: HashMap<Quality, Vec<f64>> = HashMap::new();
    for (i, t) in ds.trajectories.iter().enumerate() {
        finals.entry(t.quality).or_default().push(traces[i].final_progress());
    }
    let gap = succ_fail_gap(&finals).ok();

    let firsts: Vec<(ClipRef<'_>, String)> = groups
        .iter()
        .filter_map(|(instr, idx)| {
            idx.iter()
                .find(|&&i| ds.trajectories[i].quality == Quality::Expert)
                .map(|&i| (ClipRef::full(&ds.trajectories[i]), instr.to_string()))
        })
        .collect();
    let confusion = if firsts.len() >= 2 {
        confusion_diag_mean(&build_confusion(model, &firsts)?).ok()
    } else {
        None
    };

    let mut pairs = Vec::new();
    for idx in groups.values() {
        for (x, &i) in idx.iter().enumerate() {
            for &j in &idx[x + 1..] {
                let (a, b) = (&ds.trajectories[i], &ds.trajectories[j]);
                if a.quality == Quality::Unlabeled || b.quality == Quality::Unlabeled {
                    continue;
                }
                let winner = match a.quality.rank().cmp(&b.quality.rank()) {
                    std::cmp::Ordering::Greater => Slot::A,
                    std::cmp::Ordering::Less => Slot::B,
                    std::cmp::Ordering::Equal => continue,
                };
                pairs.push(LabeledPair {
                    instruction: a.instruction.clone(),
                    a: ClipRef::full(a),
                    b: ClipRef::full(b),
                    winner,
                });
            }
        }
    }
    let pref = if pairs.is_empty() {
        None
    } else {
        Some(pref_accuracy(model, &pairs)?)
    };

    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for (i, t) in ds.trajectories.iter().enumerate() {
        if let Some(p) = gt_final(t, opts) {
            preds.push(traces[i].final_progress());
            gts.push(progress_to_score(p));
        }
    }
    let mae = if preds.is_empty() {
        None
    } else {
        Some(binned_mae(&preds, &gts)?)
    };

    Ok(MetricReport {
        voc_mean: mean(&vocs_all),
        kendall_tau_a: mean(&taus),
        succ_fail_gap: gap,
        confusion_diag_mean: confusion,
        pref_accuracy: pref,
        binned_mae: mae,
        per_task,
    })
}

fn gt_final(t: &Trajectory, opts: &EvalOptions) -> Option<f64> {
    t.final_progress.or_else(|| opts.gt_final.get(&t.id).copied())
}

#[cfg(test)]
mod tests;
