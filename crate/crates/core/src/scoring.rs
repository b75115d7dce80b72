//! Uniform scoring interface over the learned model and the analytic oracle.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pairsampler::even_positions;
use crate::rewardnet::RewardNet;
use crate::synthworld::{oracle_progress, PlayTrajectory, SynthDataset, TaskSpec, WorldState};
use crate::trainer::Checkpoint;
use crate::trajdata::{Frame, Trajectory};

/// Frames of a trajectory at the given indices.
#[derive(Debug, Clone)]
pub struct ClipRef<'a> {
    pub traj: &'a Trajectory,
    pub indices: Vec<usize>,
}

impl<'a> ClipRef<'a> {
    pub fn full(traj: &'a Trajectory) -> Self {
        ClipRef {
            traj,
            indices: (0..traj.num_frames).collect(),
        }
    }

    /// Frames `start..end`.
    pub fn range(traj: &'a Trajectory, start: usize, end: usize) -> Self {
        ClipRef {
            traj,
            indices: (start..end).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn frames(&self) -> Vec<Frame> {
        self.indices.iter().map(|&i| self.traj.frames[i].clone()).collect()
    }
}

/// Per-frame outputs along a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub progress: Vec<f64>,
    pub success: Vec<f64>,
}

impl Trace {
    pub fn final_progress(&self) -> f64 {
        self.progress.last().copied().unwrap_or(0.0)
    }

    pub fn final_success(&self) -> f64 {
        self.success.last().copied().unwrap_or(0.0)
    }
}

pub trait RewardModel {
    /// Expected progress and success probability at every frame of `clip`,
    /// each computed from that frame and the ones before it.
    fn trace(&self, instruction: &str, clip: &ClipRef<'_>) -> Result<Trace>;

    /// Probability that `a` better satisfies `instruction` than `b`.
    fn prefer(&self, instruction: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<f64>;
}

/// Ground-truth scorer for synthetic trajectories. Returns zero progress
/// whenever the instruction is not the trajectory's own.
#[derive(Debug, Clone, Default)]
pub struct OracleModel {
    entries: HashMap<String, (TaskSpec, Vec<WorldState>)>,
}

impl OracleModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, task: TaskSpec, states: Vec<WorldState>) {
        self.entries.insert(id.to_string(), (task, states));
    }

    pub fn from_synth(sd: &SynthDataset) -> Self {
        let mut m = Self::new();
        for (i, t) in sd.dataset.trajectories.iter().enumerate() {
            m.insert(&t.id, sd.task_of(i).clone(), sd.records[i].states.clone());
        }
        m
    }

    pub fn from_play(play: &[PlayTrajectory]) -> Self {
        let mut m = Self::new();
        for p in play {
            let r = &p.rollout;
            m.insert(&r.trajectory.id, r.task.clone(), r.states.clone());
        }
        m
    }

    fn progress(&self, instruction: &str, clip: &ClipRef<'_>) -> Result<Vec<f64>> {
        let (task, states) = self
            .entries
            .get(&clip.traj.id)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no states for {:?}", clip.traj.id)))?;
        if instruction != task.instruction {
            return Ok(vec![0.0; clip.len()]);
        }
        clip.indices
            .iter()
            .map(|&i| {
                states
                    .get(i)
                    .map(|s| oracle_progress(task, s))
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {i} out of range for {:?}", clip.traj.id)))
            })
            .collect()
    }
}

impl RewardModel for OracleModel {
    fn trace(&self, instruction: &str, clip: &ClipRef<'_>) -> Result<Trace> {
        let progress = self.progress(instruction, clip)?;
        let success = progress.iter().map(|&p| if p == 1.0 { 1.0 } else { 0.0 }).collect();
        Ok(Trace { progress, success })
    }

    fn prefer(&self, instruction: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<f64> {
        let pa = self.progress(instruction, a)?.last().copied().unwrap_or(0.0);
        let pb = self.progress(instruction, b)?.last().copied().unwrap_or(0.0);
        Ok(match pa.partial_cmp(&pb) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        })
    }
}

/// A trained network with the clip length it was trained on.
///
/// Clips longer than `t_model` are scored per frame from an evenly spaced
/// `t_model`-frame subsample of the prefix ending at that frame; by
/// causality this agrees with a single pass on shorter clips.
#[derive(Debug, Clone)]
pub struct NetModel {
    pub net: RewardNet,
    pub t_model: usize,
}

impl NetModel {
    pub fn new(net: RewardNet, t_model: usize) -> Self {
        NetModel { net, t_model }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        NetModel::new(ckpt.net.clone(), ckpt.sampler.t_model)
    }
}

impl RewardModel for NetModel {
    fn trace(&self, instruction: &str, clip: &ClipRef<'_>) -> Result<Trace> {
        let frames = clip.frames();
        let head = frames.len().min(self.t_model);
        let (mut progress, mut success) = self.net.progress_trace(instruction, &frames[..head])?;
        for t in head..frames.len() {
            let sub: Vec<Frame> = even_positions(t + 1, self.t_model)
                .into_iter()
                .map(|i| frames[i].clone())
                .collect();
            let (p, s) = self.net.progress_trace(instruction, &sub)?;
            progress.push(*p.last().unwrap_or(&0.0));
            success.push(*s.last().unwrap_or(&0.0));
        }
        Ok(Trace { progress, success })
    }

    fn prefer(&self, instruction: &str, a: &ClipRef<'_>, b: &ClipRef<'_>) -> Result<f64> {
        let n = a.len().min(b.len()).min(self.t_model);
        if n == 0 {
            return Err(Error::InvalidArgument("empty clip".into()));
        }
        let pick = |c: &ClipRef<'_>| -> Vec<Frame> {
            even_positions(c.len(), n)
                .into_iter()
                .map(|i| c.traj.frames[c.indices[i]].clone())
                .collect()
        };
        self.net.prefer(instruction, &pick(a), &pick(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewardnet::ModelConfig;
    use crate::synthworld::{gen_dataset, DatasetConfig};

    fn synth() -> SynthDataset {
        gen_dataset(&DatasetConfig {
            n_tasks: 3,
            trajs_per_task: 4,
            t_range: [10, 20],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_zero_for_other_instruction() {
        let sd = synth();
        let m = OracleModel::from_synth(&sd);
        let t = &sd.dataset.trajectories[0];
        let own = m.trace(&t.instruction, &ClipRef::full(t)).unwrap();
        assert!(own.final_progress() > 0.0);
        let other = sd.tasks.iter().find(|k| k.instruction != t.instruction).unwrap();
        let tr = m.trace(&other.instruction, &ClipRef::full(t)).unwrap();
        assert!(tr.progress.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn long_clip_trace_extends_single_pass() {
        let sd = synth();
        let net = RewardNet::new(ModelConfig::tiny(), 3).unwrap();
        let m = NetModel::new(net, 8);
        let t = sd.dataset.trajectories.iter().find(|t| t.num_frames > 8).unwrap();
        let full = m.trace(&t.instruction, &ClipRef::full(t)).unwrap();
        assert_eq!(full.progress.len(), t.num_frames);
        let short = m.trace(&t.instruction, &ClipRef::range(t, 0, 8)).unwrap();
        assert_eq!(&full.progress[..8], &short.progress[..]);
        assert!(full.progress.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn net_preference_is_a_probability() {
        let sd = synth();
        let m = NetModel::new(RewardNet::new(ModelConfig::tiny(), 3).unwrap(), 8);
        let (a, b) = (&sd.dataset.trajectories[0], &sd.dataset.trajectories[1]);
        let p = m.prefer(&a.instruction, &ClipRef::full(a), &ClipRef::full(b)).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}
