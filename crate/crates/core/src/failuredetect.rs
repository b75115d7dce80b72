//! Zero-shot failure detection from a per-frame progress trace: flag the
//! first window whose progress–time correlation drops below a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pearson;

/// How the window flag and the success probability combine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    /// A flag means failure; otherwise success iff the final success
    /// probability clears the cut.
    #[default]
    FlagOverrides,
    /// Success if either no flag fires or the success probability clears
    /// the cut.
    Either,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub window: usize,
    pub threshold: f64,
    pub success_prob_cut: f64,
    pub combine: CombineRule,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 5,
            threshold: -0.5,
            success_prob_cut: 0.5,
            combine: CombineRule::FlagOverrides,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [-1, 1]".into()));
        }
        if !(self.success_prob_cut > 0.0 && self.success_prob_cut < 1.0) {
            return Err(Error::Config("success_prob_cut must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub label: Verdict,
    /// 1-based frame at which the first flagged window ends.
    pub flag_index: Option<usize>,
}

/// Entry `k` is the correlation of `progress[k..k+w]` with its frame indices.
pub fn sliding_corr(progress: &[f64], w: usize) -> Result<Vec<f64>> {
    if w < 2 || progress.len() < w {
        return Err(Error::InvalidArgument(format!(
            "trace of {} frames is shorter than window {w}",
            progress.len()
        )));
    }
    (0..=progress.len() - w)
        .map(|k| {
            let t: Vec<f64> = (k..k + w).map(|i| i as f64).collect();
            pearson(&progress[k..k + w], &t)
        })
        .collect()
}

pub fn detect(progress: &[f64], final_success_prob: f64, cfg: &DetectorConfig) -> Result<Detection> {
    let corr = sliding_corr(progress, cfg.window)?;
    let flag_index = corr.iter().position(|&c| c < cfg.threshold).map(|k| k + cfg.window);
    let confident = final_success_prob >= cfg.success_prob_cut;
    let success = match cfg.combine {
        CombineRule::FlagOverrides => flag_index.is_none() && confident,
        CombineRule::Either => flag_index.is_none() || confident,
    };
    Ok(Detection {
        label: if success { Verdict::Success } else { Verdict::Failure },
        flag_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub progress: Vec<f64>,
    pub success_prob: f64,
    /// Suboptimal outcomes count as failures.
    pub truth: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub tpr: f64,
    pub tnr: f64,
    pub f1: f64,
}

/// Rates with failure as the positive class.
pub fn evaluate_detector(cfg: &DetectorConfig, traces: &[LabeledTrace]) -> Result<DetectorScore> {
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for t in traces {
        let pred = detect(&t.progress, t.success_prob, cfg)?.label;
        match (t.truth, pred) {
            (Verdict::Failure, Verdict::Failure) => tp += 1,
            (Verdict::Failure, Verdict::Success) => fneg += 1,
            (Verdict::Success, Verdict::Success) => tn += 1,
            (Verdict::Success, Verdict::Failure) => fp += 1,
        }
    }
    if tp + fneg == 0 || tn + fp == 0 {
        return Err(Error::InvalidArgument("evaluation needs both successes and failures".into()));
    }
    let tpr = tp as f64 / (tp + fneg) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(DetectorScore { tpr, tnr, f1 })
}
