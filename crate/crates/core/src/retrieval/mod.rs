//! Segment play trajectories at grasp pauses and rank the segments for a
//! query instruction.

use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::voc;
use crate::rng::rng_for;
use crate::scoring::{ClipRef, RewardModel};
use crate::synthworld::PlayTrajectory;
use crate::trajdata::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Agent speed (units per frame) below which a frame counts as paused.
    pub eps_v: f64,
    pub min_frames: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            eps_v: 0.02,
            min_frames: 5,
        }
    }
}

/// Frames `start..end` of a parent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Subtrajectory<'a> {
    pub traj: &'a Trajectory,
    pub start: usize,
    pub end: usize,
}

impl<'a> Subtrajectory<'a> {
    pub fn parent_id(&self) -> &str {
        &self.traj.id
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn clip(&self) -> ClipRef<'a> {
        ClipRef::range(self.traj, self.start, self.end)
    }
}

/// Cut points from per-frame speed and grasp flags: frame `t` starts a new
/// segment when the agent is slower than `eps_v` there and the grasp state
/// toggled at `t−1`, `t` or `t+1`. Runs shorter than `min_frames` are
/// merged into the previous run (the first into the next).
pub fn segment_bounds(speed: &[f64], grasp: &[bool], initial_grasp: bool, cfg: &SegmentConfig) -> Vec<(usize, usize)> {
    let n = speed.len().min(grasp.len());
    if n == 0 {
        return Vec::new();
    }
    let toggled: Vec<bool> = (0..n)
        .map(|t| grasp[t] != if t == 0 { initial_grasp } else { grasp[t - 1] })
        .collect();
    let mut cuts = vec![0];
    for t in 1..n {
        let near = toggled[t - 1] || toggled[t] || (t + 1 < n && toggled[t + 1]);
        if speed[t] < cfg.eps_v && near {
            cuts.push(t);
        }
    }
    cuts.push(n);
    let mut runs: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for r in runs.drain(..) {
        match merged.last_mut() {
            Some(last) if r.1 - r.0 < cfg.min_frames || last.1 - last.0 < cfg.min_frames => last.1 = r.1,
            _ => merged.push(r),
        }
    }
    merged
}

pub fn segment<'a>(play: &'a PlayTrajectory, cfg: &SegmentConfig) -> Vec<Subtrajectory<'a>> {
    let traj = &play.rollout.trajectory;
    segment_bounds(&play.agent_speed(), &play.grasp_flags(), play.initial_grasp(), cfg)
        .into_iter()
        .map(|(start, end)| Subtrajectory { traj, start, end })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked<'a> {
    pub seg: Subtrajectory<'a>,
    /// VOC for the VOC ranker, Copeland score for the win-matrix ranker.
    pub score: f64,
    pub voc: f64,
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub parent_id: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub rank: usize,
}

pub fn to_records(ranked: &[Ranked<'_>]) -> Vec<RankRecord> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, r)| RankRecord {
            parent_id: r.seg.parent_id().to_string(),
            start: r.seg.start,
            end: r.seg.end,
            score: r.score,
            rank: i + 1,
        })
        .collect()
}

fn key_order(a: &Subtrajectory<'_>, b: &Subtrajectory<'_>) -> Ordering {
    a.parent_id().cmp(b.parent_id()).then(a.start.cmp(&b.start))
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn check(segs: &[Subtrajectory<'_>], k: usize) -> Result<()> {
    if segs.is_empty() {
        return Err(Error::InvalidArgument("no segments to rank".into()));
    }
    if k > segs.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} segments", segs.len())));
    }
    Ok(())
}

fn voc_scores(segs: &[Subtrajectory<'_>], instruction: &str, model: &dyn RewardModel) -> Result<Vec<f64>> {
    segs.iter()
        .map(|s| {
            let tr = model.trace(instruction, &s.clip())?;
            voc(&tr.progress)
        })
        .collect()
}

pub fn rank_by_voc<'a>(
    segs: &[Subtrajectory<'a>],
    instruction: &str,
    model: &dyn RewardModel,
    k: usize,
) -> Result<Vec<Ranked<'a>>> {
    check(segs, k)?;
    let vocs = voc_scores(segs, instruction, model)?;
    let mut out: Vec<Ranked<'a>> = segs
        .iter()
        .zip(&vocs)
        .map(|(s, &v)| Ranked {
            seg: s.clone(),
            score: v,
            voc: v,
        })
        .collect();
    out.sort_by(|a, b| desc(a.score, b.score).then_with(|| key_order(&a.seg, &b.seg)));
    out.truncate(k);
    Ok(out)
}

/// Pairwise preferences aggregated by Copeland score (wins − losses).
///
/// Every pair is compared in both slot orders; the mean of `P(i ≻ j)` and
/// `1 − P(j ≻ i)` decides the pair, exactly 0.5 being a tie. All pairs are
/// used when `n² ≤ pair_budget`; otherwise `pair_budget / 2` distinct pairs
/// are drawn uniformly from a stream keyed by `seed`.
pub fn rank_by_winmatrix<'a>(
    segs: &[Subtrajectory<'a>],
    instruction: &str,
    model: &dyn RewardModel,
    pair_budget: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Ranked<'a>>> {
    check(segs, k)?;
    let n = segs.len();
    if pair_budget < n {
        return Err(Error::InvalidArgument(format!(
            "pair budget {pair_budget} is below the segment count {n}"
        )));
    }
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let pairs: Vec<(usize, usize)> = if n.saturating_mul(n) <= pair_budget {
        all
    } else {
        let m = (pair_budget / 2).min(all.len());
        let mut picked = sample(&mut rng_for(&[0x3A1C, seed]), all.len(), m).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|p| all[p]).collect()
    };
    let clips: Vec<ClipRef<'a>> = segs.iter().map(Subtrajectory::clip).collect();
    let mut copeland = vec![0i64; n];
    for (i, j) in pairs {
        let fwd = model.prefer(instruction, &clips[i], &clips[j])?;
        let rev = model.prefer(instruction, &clips[j], &clips[i])?;
        let p = 0.5 * (fwd + 1.0 - rev);
        if p > 0.5 {
            copeland[i] += 1;
            copeland[j] -= 1;
        } else if p < 0.5 {
            copeland[i] -= 1;
            copeland[j] += 1;
        }
    }
    let vocs = voc_scores(segs, instruction, model)?;
    let mut out: Vec<Ranked<'a>> = (0..n)
        .map(|i| Ranked {
            seg: segs[i].clone(),
            score: copeland[i] as f64,
            voc: vocs[i],
        })
        .collect();
    out.sort_by(|a, b| {
        desc(a.score, b.score)
            .then_with(|| desc(a.voc, b.voc))
            .then_with(|| key_order(&a.seg, &b.seg))
    });
    out.truncate(k);
    Ok(out)
}

#[cfg(test)]
mod tests;
