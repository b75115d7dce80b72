use rand::Rng as _;

use super::{clamp_unit, dist, lerp, render_frame, FrameShape, RolloutMode, TaskSpec, Vec2, WorldState};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::trajdata::{Quality, Trajectory};

pub const MIN_ROLLOUT_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub shape: FrameShape,
    /// Static frames inserted after every grasp toggle.
    pub pause_frames: usize,
    /// Static frames appended after the scripted motion ends.
    pub idle_tail: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            shape: FrameShape::default(),
            pause_frames: 0,
            idle_tail: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task: TaskSpec,
    pub mode: RolloutMode,
    pub initial: WorldState,
    /// One state per frame of `trajectory`.
    pub states: Vec<WorldState>,
    pub trajectory: Trajectory,
}

impl Rollout {
    pub fn oracle_trace(&self) -> Vec<f64> {
        self.states.iter().map(|s| super::oracle_progress(&self.task, s)).collect()
    }
}

fn held(task: &TaskSpec, agent: Vec2, object: usize, obj_pos: Vec2) -> WorldState {
    let mut s = task.initial_state();
    s.agent_pos = agent;
    s.object_pos[object] = obj_pos;
    s.grasped = Some(object);
    s
}

fn free(task: &TaskSpec, agent: Vec2) -> WorldState {
    let mut s = task.initial_state();
    s.agent_pos = agent;
    s
}

/// Pick up `object` during the first half of progress time, carry it along
/// `path` during the second half.
fn carry(task: &TaskSpec, object: usize, u: f64, path: impl Fn(f64) -> Vec2) -> WorldState {
    let start = task.object_slots[object].position;
    if u < 0.5 {
        free(task, lerp(task.agent_start, start, 2.0 * u))
    } else {
        let p = path(2.0 * u - 1.0);
        held(task, p, object, p)
    }
}

fn expert_states(task: &TaskSpec, t_len: usize) -> Vec<WorldState> {
    let target = task.target_object;
    let start = task.target_start();
    let goal = task.goal_region.center;
    (1..=t_len)
        .map(|t| {
            let u = t as f64 / t_len as f64;
            if t == t_len {
                let mut s = held(task, goal, target, goal);
                s.grasped = None;
                s
            } else {
                carry(task, target, u, |v| lerp(start, goal, v))
            }
        })
        .collect()
}

fn suboptimal_states(task: &TaskSpec, t_len: usize, rng: &mut Rng) -> Vec<WorldState> {
    let target = task.target_object;
    let start = task.target_start();
    let goal = task.goal_region.center;
    let final_progress: f64 = rng.random_range(0.55..0.85);
    let advance: f64 = rng.random_range(0.3..0.5);
    let a = lerp(start, goal, advance);
    let away = {
        let d = dist(a, goal).max(1e-9);
        [(a[0] - goal[0]) / d, (a[1] - goal[1]) / d]
    };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let w = clamp_unit([
        a[0] + 0.15 * away[0] - side * 0.1 * away[1],
        a[1] + 0.15 * away[1] + side * 0.1 * away[0],
    ]);
    let w = [w[0].clamp(0.05, 0.95), w[1].clamp(0.05, 0.95)];
    let end = lerp(start, goal, 2.0 * final_progress - 1.0);
    (1..=t_len)
        .map(|t| {
            let u = t as f64 / t_len as f64;
            carry(task, target, u, |v| {
                if v < 1.0 / 3.0 {
                    lerp(start, a, 3.0 * v)
                } else if v < 2.0 / 3.0 {
                    lerp(a, w, 3.0 * v - 1.0)
                } else {
                    lerp(w, end, 3.0 * v - 2.0)
                }
            })
        })
        .collect()
}

fn wrong_object_states(task: &TaskSpec, t_len: usize, rng: &mut Rng) -> Vec<WorldState> {
    let others: Vec<usize> = (0..task.object_slots.len()).filter(|&i| i != task.target_object).collect();
    let object = others[rng.random_range(0..others.len())];
    let start = task.object_slots[object].position;
    let goal = task.goal_region.center;
    (1..=t_len)
        .map(|t| {
            let u = t as f64 / t_len as f64;
            let mut s = carry(task, object, u, |v| lerp(start, goal, v));
            if t == t_len {
                s.grasped = None;
            }
            s
        })
        .collect()
}

fn drop_states(task: &TaskSpec, t_len: usize, rng: &mut Rng) -> Vec<WorldState> {
    let target = task.target_object;
    let start = task.target_start();
    let goal = task.goal_region.center;
    let u_drop: f64 = rng.random_range(0.65..0.8);
    let min_drop = (0.6 * t_len as f64).ceil() as usize;
    let t_drop = ((u_drop * t_len as f64).ceil() as usize)
        .min(t_len.saturating_sub(2))
        .max(min_drop)
        .min(t_len - 1);
    let dropped_at = lerp(start, goal, 2.0 * t_drop as f64 / t_len as f64 - 1.0);
    (1..=t_len)
        .map(|t| {
            let u = t as f64 / t_len as f64;
            if t <= t_drop {
                carry(task, target, u, |v| lerp(start, goal, v))
            } else {
                let mut s = free(task, lerp(start, goal, 2.0 * u - 1.0));
                s.object_pos[target] = dropped_at;
                s
            }
        })
        .collect()
}

fn stall_states(task: &TaskSpec, t_len: usize, rng: &mut Rng) -> Vec<WorldState> {
    let target = task.target_start();
    let fraction: f64 = rng.random_range(0.3..0.8);
    let moving = ((fraction * t_len as f64 / 2.0).round() as usize).max(1);
    let stall_at = lerp(task.agent_start, target, 2.0 * moving as f64 / t_len as f64);
    (1..=t_len)
        .map(|t| {
            if t <= moving {
                free(task, lerp(task.agent_start, target, 2.0 * t as f64 / t_len as f64))
            } else {
                let jitter = [rng.random_range(-0.004..0.004), rng.random_range(-0.004..0.004)];
                free(task, clamp_unit([stall_at[0] + jitter[0], stall_at[1] + jitter[1]]))
            }
        })
        .collect()
}

fn insert_pauses(states: Vec<WorldState>, initial: &WorldState, pause: usize) -> Vec<WorldState> {
    if pause == 0 {
        return states;
    }
    let mut out = Vec::with_capacity(states.len() + 4 * pause);
    let mut prev_grasp = initial.grasped;
    for s in states {
        let toggled = s.grasped != prev_grasp;
        prev_grasp = s.grasped;
        out.push(s.clone());
        if toggled {
            out.extend(std::iter::repeat_n(s, pause));
        }
    }
    out
}

pub fn rollout(task: &TaskSpec, mode: RolloutMode, t_len: usize, seed: u64) -> Result<Rollout> {
    rollout_with(task, mode, t_len, seed, RolloutOptions::default())
}

/// Scripted rollout of `t_len` motion frames (plus pauses and idle tail).
///
/// Expert motion is uniform in progress time, so the oracle at frame `t`
/// equals `t/T` exactly when no pauses are inserted.
pub fn rollout_with(
    task: &TaskSpec,
    mode: RolloutMode,
    t_len: usize,
    seed: u64,
    opts: RolloutOptions,
) -> Result<Rollout> {
    if t_len < MIN_ROLLOUT_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "rollouts need at least {MIN_ROLLOUT_FRAMES} frames, got {t_len}"
        )));
    }
    let mut rng = rng_for(&[0x2011_0u64, task.seed, seed, mode as u64]);
    let initial = task.initial_state();
    let states = match mode {
        RolloutMode::Expert => expert_states(task, t_len),
        RolloutMode::Suboptimal => suboptimal_states(task, t_len, &mut rng),
        RolloutMode::FailWrongObject => wrong_object_states(task, t_len, &mut rng),
        RolloutMode::FailDrop => drop_states(task, t_len, &mut rng),
        RolloutMode::FailStall => stall_states(task, t_len, &mut rng),
    };
    let mut states = insert_pauses(states, &initial, opts.pause_frames);
    if let Some(last) = states.last().cloned() {
        states.extend(std::iter::repeat_n(last, opts.idle_tail));
    }
    let frames = states.iter().map(|s| render_frame(task, s, opts.shape)).collect::<Vec<_>>();
    let (quality, final_progress) = match mode {
        RolloutMode::Expert => (Quality::Expert, Some(1.0)),
        RolloutMode::Suboptimal => (Quality::Suboptimal, None),
        _ => (Quality::Fail, None),
    };
    let trajectory = Trajectory {
        id: format!("task{}-{}-T{}-r{}", task.seed, mode.name(), t_len, seed),
        source: "synth".into(),
        instruction: task.instruction.clone(),
        quality,
        final_progress,
        num_frames: frames.len(),
        frames,
        cutoff: None,
    };
    Ok(Rollout {
        task: task.clone(),
        mode,
        initial,
        states,
        trajectory,
    })
}

/// A rollout exposing per-frame agent speed and grasp state.
#[derive(Debug, Clone)]
pub struct PlayTrajectory {
    pub rollout: Rollout,
}

impl PlayTrajectory {
    pub fn agent_speed(&self) -> Vec<f64> {
        let mut prev = self.rollout.initial.agent_pos;
        self.rollout
            .states
            .iter()
            .map(|s| {
                let v = dist(s.agent_pos, prev);
                prev = s.agent_pos;
                v
            })
            .collect()
    }

    pub fn grasp_flags(&self) -> Vec<bool> {
        self.rollout.states.iter().map(|s| s.grasped.is_some()).collect()
    }

    pub fn initial_grasp(&self) -> bool {
        self.rollout.initial.grasped.is_some()
    }
}

/// Unlabelled play data: `per_task` rollouts for each task with pauses at
/// every grasp toggle. Mostly expert, with a drop or stall mixed in.
pub fn gen_play_set(tasks: &[TaskSpec], per_task: usize, seed: u64) -> Result<Vec<PlayTrajectory>> {
    let mut out = Vec::new();
    for task in tasks {
        for i in 0..per_task {
            let mut rng = rng_for(&[0x91A7, seed, task.seed, i as u64]);
            let mode = match i % 4 {
                3 => RolloutMode::FailDrop,
                _ => RolloutMode::Expert,
            };
            let t_len = rng.random_range(14..=22);
            let opts = RolloutOptions {
                pause_frames: 2,
                ..Default::default()
            };
            let mut r = rollout_with(task, mode, t_len, rng.random(), opts)?;
            r.trajectory.quality = Quality::Unlabeled;
            r.trajectory.final_progress = None;
            r.trajectory.source = "play".into();
            out.push(PlayTrajectory { rollout: r });
        }
    }
    Ok(out)
}
