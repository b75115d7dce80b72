//! Continuous-control version of one synthetic task: the agent moves with a
//! bounded 2-D velocity and toggles its gripper.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::synthworld::{clamp_unit, dist, gen_task, TaskSpec, Vec2, WorldState};

pub const ACTION_DIM: usize = 3;
pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task_seed: u64,
    pub horizon: usize,
    /// Distance covered per step at full action.
    pub v_max: f64,
    pub grasp_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task_seed: 7,
            horizon: 40,
            v_max: 0.1,
            grasp_radius: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    pub cfg: EnvConfig,
    pub task: TaskSpec,
}

impl ToyEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        let task = gen_task(cfg.task_seed);
        ToyEnv { cfg, task }
    }

    pub fn state_dim(&self) -> usize {
        4 + 5 * self.task.object_slots.len()
    }

    /// Task layout with the agent placed uniformly at random.
    pub fn reset(&self, rng: &mut Rng) -> WorldState {
        let mut s = self.task.initial_state();
        s.agent_pos = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        s
    }

    /// Agent position, every object position, then a one-hot of the held object.
    pub fn features(&self, s: &WorldState) -> Vec<f64> {
        let n = s.object_pos.len();
        let mut f = Vec::with_capacity(4 + 5 * n);
        let a = s.agent_pos;
        f.extend_from_slice(&a);
        for p in &s.object_pos {
            f.extend_from_slice(p);
        }
        for p in &s.object_pos {
            f.extend([p[0] - a[0], p[1] - a[1]]);
        }
        let g = self.task.goal_region.center;
        f.extend([g[0] - a[0], g[1] - a[1]]);
        f.extend((0..n).map(|i| if s.grasped == Some(i) { 1.0 } else { 0.0 }));
        f
    }

    /// Moves (carrying any held object), then grips when `a[2] > 0` or
    /// releases otherwise. Gripping takes the nearest object in reach.
    pub fn step(&self, s: &WorldState, a: &Action) -> WorldState {
        let mut next = s.clone();
        let (vx, vy) = (a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0));
        next.agent_pos = clamp_unit([s.agent_pos[0] + self.cfg.v_max * vx, s.agent_pos[1] + self.cfg.v_max * vy]);
        if let Some(h) = next.grasped {
            next.object_pos[h] = next.agent_pos;
        }
        if a[2] > 0.0 {
            if next.grasped.is_none() {
                next.grasped = next
                    .object_pos
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist(*p, next.agent_pos)))
                    .filter(|(_, d)| *d <= self.cfg.grasp_radius)
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .map(|(i, _)| i);
            }
        } else {
            next.grasped = None;
        }
        next
    }

    pub fn is_success(&self, s: &WorldState) -> bool {
        self.task.is_complete(s)
    }

    fn heading(&self, from: Vec2, to: Vec2) -> (f64, f64, Vec2) {
        let d = [(to[0] - from[0]) / self.cfg.v_max, (to[1] - from[1]) / self.cfg.v_max];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let scale = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        let (vx, vy) = (d[0] * scale, d[1] * scale);
        (vx, vy, [from[0] + self.cfg.v_max * vx, from[1] + self.cfg.v_max * vy])
    }

    /// Scripted optimal controller.
    pub fn expert_action(&self, s: &WorldState) -> Action {
        self.scripted_action(s, self.task.target_object)
    }

    /// Expert logic applied to `target`, which need not be the task's object.
    pub fn scripted_action(&self, s: &WorldState, target: usize) -> Action {
        match s.grasped {
            Some(h) if h == target => {
                let goal = self.task.goal_region.center;
                let (vx, vy, after) = self.heading(s.agent_pos, goal);
                let release = dist(after, goal) <= 0.5 * self.task.goal_region.radius;
                [vx, vy, if release { -1.0 } else { 1.0 }]
            }
            Some(_) => [0.0, 0.0, -1.0],
            None => {
                let obj = s.object_pos[target];
                let (vx, vy, after) = self.heading(s.agent_pos, obj);
                let grip = dist(after, obj) <= 0.5 * self.cfg.grasp_radius;
                [vx, vy, if grip { 1.0 } else { -1.0 }]
            }
        }
    }
}

/// Something that picks actions.
pub trait Controller {
    fn act(&self, env: &ToyEnv, s: &WorldState, rng: &mut Rng) -> Action;
}

pub struct Expert;

impl Controller for Expert {
    fn act(&self, env: &ToyEnv, s: &WorldState, _: &mut Rng) -> Action {
        env.expert_action(s)
    }
}

/// Expert with Gaussian velocity noise and random gripper flips, optionally
/// fetching the wrong object.
pub struct NoisyExpert {
    pub velocity_std: f64,
    pub flip_prob: f64,
    pub aim: Option<usize>,
}

impl NoisyExpert {
    /// Noise level `scale = 1` is the default mix.
    pub fn with_scale(scale: f64) -> Self {
        NoisyExpert {
            velocity_std: 0.5 * scale,
            flip_prob: 0.05 * scale,
            aim: None,
        }
    }
}

impl Controller for NoisyExpert {
    fn act(&self, env: &ToyEnv, s: &WorldState, rng: &mut Rng) -> Action {
        let mut a = env.scripted_action(s, self.aim.unwrap_or(env.task.target_object));
        if self.velocity_std > 0.0 {
            let n = Normal::new(0.0, self.velocity_std).expect("finite std");
            a[0] = (a[0] + n.sample(rng)).clamp(-1.0, 1.0);
            a[1] = (a[1] + n.sample(rng)).clamp(-1.0, 1.0);
        }
        if self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob {
            a[2] = -a[2];
        }
        a
    }
}

/// Uniform actions in `[-1, 1]³`.
pub struct RandomPolicy;

impl Controller for RandomPolicy {
    fn act(&self, _: &ToyEnv, _: &WorldState, rng: &mut Rng) -> Action {
        [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    }
}

/// States `s_0..s_T` and the actions between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Vec<WorldState>,
    pub actions: Vec<Action>,
    pub success: bool,
}

impl ToyEnv {
    /// Runs until success or the horizon.
    pub fn run(&self, ctrl: &dyn Controller, start: WorldState, rng: &mut Rng) -> Episode {
        let mut states = vec![start];
        let mut actions = Vec::new();
        let mut success = false;
        for _ in 0..self.cfg.horizon {
            let s = states.last().unwrap();
            let a = ctrl.act(self, s, rng);
            let next = self.step(s, &a);
            success = self.is_success(&next);
            states.push(next);
            actions.push(a);
            if success {
                break;
            }
        }
        Episode {
            states,
            actions,
            success,
        }
    }
}
