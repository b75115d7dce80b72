//! Deterministic 2-D pick-and-place world with an analytic progress oracle.
//!
//! Coordinates live in the unit square with `y` growing downwards, so row 0
//! of a rendered frame is the "top" of the scene.

mod dataset;
mod render;
mod rollout;

pub use dataset::{gen_dataset, load_synth, write_dataset, DatasetConfig, SourceSpec, SynthDataset, SynthRecord, SYNTH_CONFIG_FILE};
pub use render::{render_frame, FrameShape};
pub use rollout::{gen_play_set, rollout, rollout_with, PlayTrajectory, Rollout, RolloutOptions, MIN_ROLLOUT_FRAMES};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;

pub type Vec2 = [f64; 2];

pub const COLORS: [&str; 10] = [
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink", "brown", "white",
];

/// Goal regions on a 3×3 grid: (name, center).
pub const REGIONS: [(&str, Vec2); 9] = [
    ("top left", [0.2, 0.2]),
    ("top", [0.5, 0.2]),
    ("top right", [0.8, 0.2]),
    ("left", [0.2, 0.5]),
    ("center", [0.5, 0.5]),
    ("right", [0.8, 0.5]),
    ("bottom left", [0.2, 0.8]),
    ("bottom", [0.5, 0.8]),
    ("bottom right", [0.8, 0.8]),
];

pub const GOAL_RADIUS: f64 = 0.12;
/// Ceiling on progress while the target is still held; 1.0 requires release.
pub const MAX_HELD_PROGRESS: f64 = 0.99;

/// Every word any generated instruction can contain.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ["move", "the", "object", "to", "region", "top", "bottom", "left", "right", "center"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(COLORS.iter().map(|s| s.to_string()));
    v
}

pub fn instruction_for(color_id: usize, region: usize) -> String {
    format!("move the {} object to the {} region", COLORS[color_id], REGIONS[region].0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Expert,
    Suboptimal,
    FailWrongObject,
    FailDrop,
    FailStall,
}

impl RolloutMode {
    pub const ALL: [RolloutMode; 5] = [
        RolloutMode::Expert,
        RolloutMode::Suboptimal,
        RolloutMode::FailWrongObject,
        RolloutMode::FailDrop,
        RolloutMode::FailStall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::Expert => "expert",
            RolloutMode::Suboptimal => "suboptimal",
            RolloutMode::FailWrongObject => "fail_wrong_object",
            RolloutMode::FailDrop => "fail_drop",
            RolloutMode::FailStall => "fail_stall",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_failure(self) -> bool {
        matches!(
            self,
            RolloutMode::FailWrongObject | RolloutMode::FailDrop | RolloutMode::FailStall
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub position: Vec2,
    pub color_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub name: String,
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub object_slots: Vec<ObjectSlot>,
    pub target_object: usize,
    pub goal_region: GoalRegion,
    pub agent_start: Vec2,
    pub num_colors: usize,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: Vec2,
    pub object_pos: Vec<Vec2>,
    pub grasped: Option<usize>,
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn lerp(a: Vec2, b: Vec2, u: f64) -> Vec2 {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
}

pub fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Instruction combination for a task seed. Consecutive seeds walk a
/// permutation of all 90 (color, region) pairs.
fn combo_for(seed: u64) -> (usize, usize) {
    let n = (COLORS.len() * REGIONS.len()) as u64;
    let idx = ((seed % n) * 37 + 11) % n;
    ((idx % COLORS.len() as u64) as usize, (idx / COLORS.len() as u64) as usize)
}

/// Deterministic task for a seed: 2–3 distinctly colored objects, one target,
/// a goal region on the 3×3 grid and an agent start position.
pub fn gen_task(seed: u64) -> TaskSpec {
    let (target_color, region) = combo_for(seed);
    let mut rng = rng_for(&[0x7A5C, seed]);
    let goal = REGIONS[region].1;
    let n_objects = rng.random_range(2..=3usize);

    let mut colors = vec![target_color];
    while colors.len() < n_objects {
        let c = rng.random_range(0..COLORS.len());
        if !colors.contains(&c) {
            colors.push(c);
        }
    }
    let sample = |rng: &mut crate::rng::Rng| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];

    loop {
        let positions: Vec<Vec2> = (0..n_objects).map(|_| sample(&mut rng)).collect();
        let agent = sample(&mut rng);
        let separated = positions
            .iter()
            .enumerate()
            .all(|(i, p)| positions[..i].iter().all(|q| dist(*p, *q) >= 0.25));
        let clear_of_goal = positions
            .iter()
            .enumerate()
            .all(|(i, p)| dist(*p, goal) >= GOAL_RADIUS + if i == 0 { 0.2 } else { 0.08 });
        let agent_ok = dist(agent, positions[0]) >= 0.25 && positions.iter().all(|p| dist(agent, *p) >= 0.1);
        if separated && clear_of_goal && agent_ok {
            // Target goes into a seeded slot so it is not always object 0.
            let target_object = rng.random_range(0..n_objects);
            let mut slots: Vec<ObjectSlot> = positions
                .into_iter()
                .zip(colors.iter().copied())
                .map(|(position, color_id)| ObjectSlot { position, color_id })
                .collect();
            slots.swap(0, target_object);
            return TaskSpec {
                seed,
                object_slots: slots,
                target_object,
                goal_region: GoalRegion {
                    name: REGIONS[region].0.to_string(),
                    center: goal,
                    radius: GOAL_RADIUS,
                },
                agent_start: agent,
                num_colors: COLORS.len(),
                instruction: instruction_for(target_color, region),
            };
        }
    }
}

impl TaskSpec {
    pub fn initial_state(&self) -> WorldState {
        WorldState {
            agent_pos: self.agent_start,
            object_pos: self.object_slots.iter().map(|s| s.position).collect(),
            grasped: None,
        }
    }

    pub fn target_start(&self) -> Vec2 {
        self.object_slots[self.target_object].position
    }

    fn reach_scale(&self) -> f64 {
        dist(self.agent_start, self.target_start()).max(1e-9)
    }

    fn transport_scale(&self) -> f64 {
        dist(self.target_start(), self.goal_region.center).max(1e-9)
    }

    pub fn is_complete(&self, state: &WorldState) -> bool {
        state.grasped != Some(self.target_object)
            && dist(state.object_pos[self.target_object], self.goal_region.center) <= self.goal_region.radius
    }
}

/// Two-phase milestone progress.
///
/// Reaching contributes `0.5·(1 − d(agent, target)/d₀)` until the target is
/// held; transport contributes `0.5 + 0.5·(1 − d(target, goal)/d₀')` while it
/// is held (capped below 1). Exactly 1.0 once the target rests inside the
/// goal disk and is released.
pub fn oracle_progress(task: &TaskSpec, state: &WorldState) -> f64 {
    let target = state.object_pos[task.target_object];
    if task.is_complete(state) {
        return 1.0;
    }
    if state.grasped == Some(task.target_object) {
        let d = dist(target, task.goal_region.center);
        (0.5 + 0.5 * (1.0 - d / task.transport_scale())).clamp(0.5, MAX_HELD_PROGRESS)
    } else {
        let d = dist(state.agent_pos, target);
        (0.5 * (1.0 - d / task.reach_scale())).clamp(0.0, 0.5)
    }
}
