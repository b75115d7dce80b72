//! Trajectory data model, on-disk formats and supervision targets.

mod io;

pub use io::{
    load_manifest, read_frame_file, read_manifest, set_source_cutoff, write_frame_file,
    write_trajectory, DatasetWriter, ManifestRecord, FRAME_MAGIC, FRAME_VERSION, MANIFEST_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default success-supervision gate.
pub const DEFAULT_TAU_SUCC: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Suboptimal,
    Fail,
    Unlabeled,
}

impl Quality {
    /// Outcome rank used for preference labels. Fail and unlabeled share the
    /// bottom rank, so they are never paired against each other.
    pub fn rank(self) -> u8 {
        match self {
            Quality::Expert => 2,
            Quality::Suboptimal => 1,
            Quality::Fail | Quality::Unlabeled => 0,
        }
    }
}

/// One `C×H×W` grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Frame {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Row-major `C×H×W` nested arrays, used by the annotation service.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f32>>> {
        (0..self.channels)
            .map(|c| {
                (0..self.height)
                    .map(|y| (0..self.width).map(|x| self.get(c, y, x)).collect())
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub source: String,
    pub instruction: String,
    pub quality: Quality,
    pub final_progress: Option<f64>,
    pub num_frames: usize,
    pub frames: Vec<Frame>,
    pub cutoff: Option<f64>,
}

impl Trajectory {
    pub fn frame_shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Frame::shape)
    }

    /// Invariant violations of this trajectory in isolation.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_frames == 0 {
            out.push("num_frames must be >= 1".to_string());
        }
        if self.frames.len() != self.num_frames {
            out.push(format!(
                "num_frames {} but {} frames present",
                self.num_frames,
                self.frames.len()
            ));
        }
        if self.instruction.trim().is_empty() {
            out.push("empty instruction".to_string());
        }
        if let Some(p) = self.final_progress {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("final_progress {p} outside [0,1]"));
            }
        }
        if self.quality == Quality::Expert && self.final_progress != Some(1.0) {
            out.push(format!(
                "expert trajectory must have final_progress 1.0, got {:?}",
                self.final_progress
            ));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0 && c <= 1.0) {
                out.push(format!("cutoff {c} outside (0,1]"));
            }
        }
        if let Some(shape) = self.frame_shape() {
            if self.frames.iter().any(|f| f.shape() != shape) {
                out.push("frames do not share one shape".to_string());
            }
        }
        if self
            .frames
            .iter()
            .any(|f| f.data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)))
        {
            out.push("frame values must be finite and in [0,1]".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Dataset { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Distinct source names in first-seen order.
    pub fn sources(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trajectories {
            if !out.contains(&t.source) {
                out.push(t.source.clone());
            }
        }
        out
    }

    /// Distinct instructions in first-seen order.
    pub fn instructions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trajectories {
            if !out.contains(&t.instruction) {
                out.push(t.instruction.clone());
            }
        }
        out
    }
}

/// Per-frame supervision for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    pub progress: Vec<f64>,
    pub progress_mask: Vec<bool>,
    pub success: Vec<bool>,
    pub success_mask: Vec<bool>,
}

impl SupervisionTargets {
    pub fn unsupervised(len: usize) -> Self {
        SupervisionTargets {
            progress: vec![0.0; len],
            progress_mask: vec![false; len],
            success: vec![false; len],
            success_mask: vec![false; len],
        }
    }

    /// All-zero progress with full masks: correct behaviour for the wrong task.
    pub fn zero_progress(len: usize) -> Self {
        SupervisionTargets {
            progress: vec![0.0; len],
            progress_mask: vec![true; len],
            success: vec![false; len],
            success_mask: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.progress.len()
    }

    pub fn is_empty(&self) -> bool {
        self.progress.is_empty()
    }

    /// Targets at the given original frame indices (0-based).
    pub fn select(&self, indices: &[usize]) -> SupervisionTargets {
        SupervisionTargets {
            progress: indices.iter().map(|&i| self.progress[i]).collect(),
            progress_mask: indices.iter().map(|&i| self.progress_mask[i]).collect(),
            success: indices.iter().map(|&i| self.success[i]).collect(),
            success_mask: indices.iter().map(|&i| self.success_mask[i]).collect(),
        }
    }
}

/// Index `k = ceil(cutoff·T)` (1-based) of the first frame at which the task
/// counts as complete.
pub fn cutoff_frame(num_frames: usize, cutoff: f64) -> usize {
    let k = (cutoff * num_frames as f64 - 1e-9).ceil() as usize;
    k.clamp(1, num_frames)
}

/// Dense progress/success targets for an expert trajectory.
///
/// With `k = ceil(cutoff·T)`, frame `t` (1-based) gets progress `t/k` up to
/// `k` and 1.0 afterwards; success is true from `k` on. Success is only
/// supervised where the progress target is below `tau_succ` or exactly 1.
pub fn apply_cutoff(traj: &Trajectory, tau_succ: f64) -> Result<SupervisionTargets> {
    if traj.quality != Quality::Expert {
        return Err(Error::InvalidArgument(format!(
            "dense progress targets are defined only for expert data, {:?} is {:?}",
            traj.id, traj.quality
        )));
    }
    let t_len = traj.num_frames;
    if t_len == 0 {
        return Err(Error::InvalidTrajectory {
            id: traj.id.clone(),
            message: "no frames".into(),
        });
    }
    let k = cutoff_frame(t_len, traj.cutoff.unwrap_or(1.0));
    let progress: Vec<f64> = (1..=t_len)
        .map(|t| if t <= k { t as f64 / k as f64 } else { 1.0 })
        .collect();
    let success: Vec<bool> = (1..=t_len).map(|t| t >= k).collect();
    let success_mask = progress.iter().map(|&p| p < tau_succ || p == 1.0).collect();
    Ok(SupervisionTargets {
        progress,
        progress_mask: vec![true; t_len],
        success,
        success_mask,
    })
}

/// Targets for any trajectory: dense for experts, final-frame-only when a
/// partial-completion label exists, none otherwise.
pub fn supervision_for(traj: &Trajectory, tau_succ: f64) -> Result<SupervisionTargets> {
    if traj.quality == Quality::Expert {
        return apply_cutoff(traj, tau_succ);
    }
    let n = traj.num_frames;
    let mut targets = SupervisionTargets::unsupervised(n);
    match traj.quality {
        // Labelled non-completions never reach success.
        Quality::Fail | Quality::Suboptimal => {
            targets.success_mask = vec![true; n];
        }
        _ => {}
    }
    if let Some(p) = traj.final_progress {
        targets.progress[n - 1] = p;
        targets.progress_mask[n - 1] = true;
        if p == 1.0 {
            targets.success[n - 1] = true;
            targets.success_mask[n - 1] = true;
        }
    }
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let shape = ds.trajectories.iter().find_map(Trajectory::frame_shape);
    for t in &ds.trajectories {
        if !seen.insert(t.id.as_str()) {
            violations.push(Violation {
                id: t.id.clone(),
                message: "duplicate id".into(),
            });
        }
        for message in t.violations() {
            violations.push(Violation {
                id: t.id.clone(),
                message,
            });
        }
        if let (Some(s), Some(own)) = (shape, t.frame_shape()) {
            if s != own {
                violations.push(Violation {
                    id: t.id.clone(),
                    message: format!("frame shape {own:?} differs from dataset shape {s:?}"),
                });
            }
        }
    }
    ValidationReport { violations }
}
