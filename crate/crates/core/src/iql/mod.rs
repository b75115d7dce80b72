//! Offline RL on a continuous-control version of the synthetic world:
//! mixed-quality data, reward relabelling and implicit Q-learning with
//! advantage-weighted policy extraction.

mod env;
mod mlp;

pub use env::{Action, Controller, EnvConfig, Episode, Expert, NoisyExpert, RandomPolicy, ToyEnv, ACTION_DIM};
pub use mlp::{Adam, Mlp, MlpCache};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::scoring::{ClipRef, RewardModel};
use crate::synthworld::{oracle_progress, render_frame, FrameShape, WorldState};
use crate::trajdata::{Quality, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqlConfig {
    pub gamma: f64,
    pub expectile: f64,
    /// Advantage temperature: weights are `exp(A/β)`.
    pub beta: f64,
    pub target_rate: f64,
    pub n_critics: usize,
    /// Upper bound on the advantage weight.
    pub adv_clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr_q: f64,
    pub lr_v: f64,
    pub lr_pi: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            gamma: 0.9,
            expectile: 0.7,
            beta: 2.0,
            target_rate: 0.005,
            n_critics: 2,
            adv_clip: 100.0,
            steps: 3000,
            batch: 128,
            lr_q: 3e-4,
            lr_v: 3e-4,
            lr_pi: 3e-4,
            hidden: 64,
            seed: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::Config("expectile must lie in (0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if self.beta <= 0.0 || self.n_critics == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(Error::Config("beta, n_critics, batch and hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Rollouts with their origin.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineData {
    pub episodes: Vec<Episode>,
    pub n_expert: usize,
}

fn start_rng(seed: u64, episode: usize) -> Rng {
    rng_for(&[0x0FF1, seed, episode as u64])
}

/// `n_expert` scripted rollouts followed by `n_noisy` rollouts of the expert
/// with noise at `noise_scale` (1 = default mix). With positive noise, every
/// other noisy rollout fetches a distractor object instead of the target.
/// Episode `e` starts from a stream keyed by `(seed, e)`.
pub fn gen_offline_data(env: &ToyEnv, n_expert: usize, n_noisy: usize, noise_scale: f64, seed: u64) -> Result<OfflineData> {
    if n_expert == 0 || n_noisy == 0 {
        return Err(Error::InvalidArgument("need at least one expert and one noisy rollout".into()));
    }
    let n_obj = env.task.object_slots.len();
    let target = env.task.target_object;
    let episodes = (0..n_expert + n_noisy)
        .map(|e| {
            let mut rng = start_rng(seed, e);
            let start = env.reset(&mut rng);
            if e < n_expert {
                return env.run(&Expert, start, &mut rng);
            }
            let mut noisy = NoisyExpert::with_scale(noise_scale);
            let k = e - n_expert;
            if noise_scale > 0.0 && k % 2 == 1 {
                noisy.aim = Some((target + 1 + (k / 2) % (n_obj - 1)) % n_obj);
            }
            env.run(&noisy, start, &mut rng)
        })
        .collect();
    Ok(OfflineData { episodes, n_expert })
}

/// Reward source for relabelling.
pub enum Relabel<'a> {
    /// 0 on the transition that completes the task, −1 otherwise.
    Sparse,
    /// Oracle progress of the reached state, minus 1.
    Oracle,
    /// Model progress at the reached frame (computed on the episode prefix), minus 1.
    Model(&'a dyn RewardModel),
}

/// Renders an episode as a trajectory for reward-model scoring.
pub fn episode_trajectory(env: &ToyEnv, ep: &Episode, id: &str) -> Trajectory {
    let frames: Vec<_> = ep
        .states
        .iter()
        .map(|s| render_frame(&env.task, s, FrameShape::default()))
        .collect();
    Trajectory {
        id: id.to_string(),
        source: "iql".into(),
        instruction: env.task.instruction.clone(),
        quality: Quality::Unlabeled,
        final_progress: None,
        num_frames: frames.len(),
        frames,
        cutoff: None,
    }
}

pub fn relabel(env: &ToyEnv, data: &OfflineData, mode: &Relabel<'_>) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for (e, ep) in data.episodes.iter().enumerate() {
        let n = ep.actions.len();
        let rewards: Vec<f64> = match mode {
            Relabel::Sparse => (0..n)
                .map(|t| if ep.success && t + 1 == n { 0.0 } else { -1.0 })
                .collect(),
            Relabel::Oracle => (0..n).map(|t| oracle_progress(&env.task, &ep.states[t + 1]) - 1.0).collect(),
            Relabel::Model(model) => {
                let traj = episode_trajectory(env, ep, &format!("episode{e}"));
                let trace = model.trace(&traj.instruction, &ClipRef::full(&traj))?;
                (0..n).map(|t| trace.progress[t + 1] - 1.0).collect()
            }
        };
        for t in 0..n {
            out.push(Transition {
                state: env.features(&ep.states[t]),
                action: ep.actions[t],
                reward: rewards[t],
                next_state: env.features(&ep.states[t + 1]),
                done: ep.success && t + 1 == n,
            });
        }
    }
    if out.iter().any(|t| !t.reward.is_finite()) {
        return Err(Error::InvalidArgument("relabelled reward is not finite".into()));
    }
    Ok(out)
}

/// `|τ − 1(u < 0)|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

pub fn awr_weight(adv: f64, beta: f64, clip: f64) -> f64 {
    (adv / beta).exp().min(clip)
}

pub fn td_target(reward: f64, gamma: f64, done: bool, v_next: f64) -> f64 {
    reward + if done { 0.0 } else { gamma * v_next }
}

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 1.0;

/// Diagonal Gaussian with `tanh`-squashed mean and a learned,
/// state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mlp: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn mean(&self, state: &[f64]) -> Action {
        let o = self.mlp.predict(state, 1);
        [o[0].tanh(), o[1].tanh(), o[2].tanh()]
    }
}

impl Controller for GaussianPolicy {
    fn act(&self, env: &ToyEnv, s: &WorldState, _: &mut Rng) -> Action {
        self.mean(&env.features(s))
    }
}

/// Mean squared TD error and its gradient.
pub fn q_loss(q: &Mlp, sa: &[f64], n: usize, y: &[f64]) -> (f64, Vec<f64>) {
    let cache = q.forward(sa, n);
    let out = cache.output();
    let mut loss = 0.0;
    let mut d = vec![0.0; n];
    for i in 0..n {
        let e = out[i] - y[i];
        loss += e * e / n as f64;
        d[i] = 2.0 * e / n as f64;
    }
    let mut g = vec![0.0; q.params.len()];
    q.backward(&cache, &d, &mut g);
    (loss, g)
}

/// Expectile regression of `V(s)` toward `q`.
pub fn v_loss(v: &Mlp, s: &[f64], n: usize, q: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let cache = v.forward(s, n);
    let out = cache.output();
    let mut loss = 0.0;
    let mut d = vec![0.0; n];
    for i in 0..n {
        let u = q[i] - out[i];
        loss += expectile_loss(u, tau) / n as f64;
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        d[i] = -2.0 * w * u / n as f64;
    }
    let mut g = vec![0.0; v.params.len()];
    v.backward(&cache, &d, &mut g);
    (loss, g)
}

/// Weighted negative log-likelihood `−mean(w·log π(a|s))`; gradients for the
/// network and for the log standard deviations.
pub fn pi_loss(pi: &GaussianPolicy, s: &[f64], a: &[f64], n: usize, w: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let cache = pi.mlp.forward(s, n);
    let out = cache.output();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut loss = 0.0;
    let mut dout = vec![0.0; n * ACTION_DIM];
    let mut dls = vec![0.0; ACTION_DIM];
    for i in 0..n {
        for k in 0..ACTION_DIM {
            let raw = pi.log_std[k];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let var = (2.0 * ls).exp();
            let mu = out[i * ACTION_DIM + k].tanh();
            let diff = a[i * ACTION_DIM + k] - mu;
            let logp = -diff * diff / (2.0 * var) - ls - half_log_2pi;
            let c = w[i] / n as f64;
            loss -= c * logp;
            dout[i * ACTION_DIM + k] = -c * (diff / var) * (1.0 - mu * mu);
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                dls[k] -= c * (diff * diff / var - 1.0);
            }
        }
    }
    let mut g = vec![0.0; pi.mlp.params.len()];
    pi.mlp.backward(&cache, &dout, &mut g);
    (loss, g, dls)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlLosses {
    pub l_q: f64,
    pub l_v: f64,
    pub l_pi: f64,
}

#[derive(Debug, Clone)]
pub struct IqlOutcome {
    pub policy: GaussianPolicy,
    pub last: IqlLosses,
    /// Step after which the returned policy was taken, when selected by validation.
    pub best_step: Option<usize>,
    pub val_success: Option<f64>,
}

/// Periodic policy validation; the best-scoring snapshot is returned.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub env: &'a ToyEnv,
    pub every: usize,
    pub episodes: usize,
    pub seed: u64,
}

fn pack(batch: &[&Transition]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut s, mut sa, mut a, mut s2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in batch {
        s.extend_from_slice(&t.state);
        sa.extend_from_slice(&t.state);
        sa.extend_from_slice(&t.action);
        a.extend_from_slice(&t.action);
        s2.extend_from_slice(&t.next_state);
    }
    (s, sa, a, s2)
}

fn min_over(critics: &[Mlp], sa: &[f64], n: usize) -> Vec<f64> {
    let mut m = vec![f64::INFINITY; n];
    for q in critics {
        for (x, y) in m.iter_mut().zip(q.predict(sa, n)) {
            *x = x.min(y);
        }
    }
    m
}

/// Implicit Q-learning. Each step draws a uniform batch from a stream keyed
/// by `(seed, step)`, fits V by expectile regression toward the target
/// critics' minimum, fits each critic to `r + γ·V(s')`, and fits the policy by
/// advantage-weighted regression; targets track the critics by Polyak
/// averaging.
pub fn iql_train(transitions: &[Transition], cfg: &IqlConfig) -> Result<IqlOutcome> {
    train_impl(transitions, cfg, None)
}

/// As [`iql_train`], but validates every `val.every` steps (and at the end)
/// and returns the snapshot with the highest validation success; ties keep
/// the earlier snapshot.
pub fn iql_train_validated(transitions: &[Transition], cfg: &IqlConfig, val: &Validation<'_>) -> Result<IqlOutcome> {
    if val.every == 0 || val.episodes == 0 {
        return Err(Error::Config("validation needs positive every and episodes".into()));
    }
    train_impl(transitions, cfg, Some(val))
}

fn train_impl(transitions: &[Transition], cfg: &IqlConfig, val: Option<&Validation<'_>>) -> Result<IqlOutcome> {
    cfg.validate()?;
    let first = transitions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no transitions".into()))?;
    let sd = first.state.len();
    let h = cfg.hidden;
    let mut init = rng_for(&[0x1A1, cfg.seed]);
    let mut critics: Vec<Mlp> = (0..cfg.n_critics)
        .map(|_| Mlp::new(&[sd + ACTION_DIM, h, h, 1], 1.0, &mut init))
        .collect();
    let mut targets = critics.clone();
    let mut value = Mlp::new(&[sd, h, h, 1], 1.0, &mut init);
    let mut policy = GaussianPolicy {
        mlp: Mlp::new(&[sd, h, h, ACTION_DIM], 0.1, &mut init),
        log_std: vec![0.0; ACTION_DIM],
    };
    let mut q_opt: Vec<Adam> = critics.iter().map(|q| Adam::new(q.params.len(), cfg.lr_q)).collect();
    let mut v_opt = Adam::new(value.params.len(), cfg.lr_v);
    let mut pi_opt = Adam::new(policy.mlp.params.len(), cfg.lr_pi);
    let mut ls_opt = Adam::new(ACTION_DIM, cfg.lr_pi);
    let n = cfg.batch;
    let mut last = IqlLosses {
        l_q: 0.0,
        l_v: 0.0,
        l_pi: 0.0,
    };
    let mut best: Option<(usize, f64, GaussianPolicy)> = None;
    for step in 0..cfg.steps {
        let mut rng = rng_for(&[0xB47C, cfg.seed, step as u64]);
        let batch: Vec<&Transition> = (0..n)
            .map(|_| &transitions[rng.random_range(0..transitions.len())])
            .collect();
        let (s, sa, a, s2) = pack(&batch);

        let q_min = min_over(&targets, &sa, n);
        let (l_v, gv) = v_loss(&value, &s, n, &q_min, cfg.expectile);
        v_opt.step(&mut value.params, &gv);

        let v_next = value.predict(&s2, n);
        let y: Vec<f64> = batch
            .iter()
            .zip(&v_next)
            .map(|(t, &vn)| td_target(t.reward, cfg.gamma, t.done, vn))
            .collect();
        let mut l_q = 0.0;
        for (q, opt) in critics.iter_mut().zip(q_opt.iter_mut()) {
            let (l, g) = q_loss(q, &sa, n, &y);
            l_q += l;
            opt.step(&mut q.params, &g);
        }

        let v_now = value.predict(&s, n);
        let w: Vec<f64> = q_min
            .iter()
            .zip(&v_now)
            .map(|(q, v)| awr_weight(q - v, cfg.beta, cfg.adv_clip))
            .collect();
        let (l_pi, gp, gls) = pi_loss(&policy, &s, &a, n, &w);
        pi_opt.step(&mut policy.mlp.params, &gp);
        ls_opt.step(&mut policy.log_std, &gls);

        for (t, q) in targets.iter_mut().zip(&critics) {
            t.polyak_from(q, cfg.target_rate);
        }
        last = IqlLosses { l_q, l_v, l_pi };
        if !(l_q.is_finite() && l_v.is_finite() && l_pi.is_finite()) {
            return Err(Error::IqlDiverged { step, l_q, l_v, l_pi });
        }
        if step % 500 == 0 {
            log::debug!("iql step {step}: q {l_q:.4} v {l_v:.4} pi {l_pi:.4}");
        }
        if let Some(v) = val {
            let done = step + 1;
            if done % v.every == 0 || done == cfg.steps {
                let sr = evaluate_policy(v.env, &policy, v.episodes, v.seed);
                log::debug!("iql step {done}: validation success {sr:.3}");
                if best.as_ref().is_none_or(|(_, b, _)| sr > *b) {
                    best = Some((done, sr, policy.clone()));
                }
            }
        }
    }
    Ok(match best {
        Some((step, sr, p)) => IqlOutcome {
            policy: p,
            last,
            best_step: Some(step),
            val_success: Some(sr),
        },
        None => IqlOutcome {
            policy,
            last,
            best_step: None,
            val_success: None,
        },
    })
}

/// Fraction of episodes that complete the task within the horizon. Episode
/// `e` starts from a stream keyed by `(seed, e)`.
pub fn evaluate_policy(env: &ToyEnv, ctrl: &dyn Controller, n_episodes: usize, seed: u64) -> f64 {
    if n_episodes == 0 {
        return 0.0;
    }
    let wins = (0..n_episodes)
        .filter(|&e| {
            let mut rng = rng_for(&[0xE7A1, seed, e as u64]);
            let start = env.reset(&mut rng);
            env.run(ctrl, start, &mut rng).success
        })
        .count();
    wins as f64 / n_episodes as f64
}

/// Largest relative error between analytic and central-difference gradients
/// of each loss on tiny random networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlGradCheck {
    pub q: f64,
    pub v: f64,
    pub pi: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn check_flat(params: &mut Vec<f64>, analytic: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let keep = params[i];
        params[i] = keep + eps;
        let up = f(params);
        params[i] = keep - eps;
        let down = f(params);
        params[i] = keep;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    worst
}

pub fn iql_grad_check(seed: u64) -> IqlGradCheck {
    let mut rng = rng_for(&[0x6C4E, seed]);
    let (sd, n, h) = (5, 12, 8);
    let s: Vec<f64> = (0..n * sd).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..n * ACTION_DIM).map(|_| rng.random_range(-0.95..0.95)).collect();
    let sa: Vec<f64> = (0..n)
        .flat_map(|i| {
            s[i * sd..(i + 1) * sd]
                .iter()
                .chain(&a[i * ACTION_DIM..(i + 1) * ACTION_DIM])
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let eps = 1e-6;

    let mut q = Mlp::new(&[sd + ACTION_DIM, h, h, 1], 1.0, &mut rng);
    let (_, gq) = q_loss(&q, &sa, n, &y);
    let sizes = q.sizes.clone();
    let eq = check_flat(&mut q.params, &gq, eps, |p| {
        let m = Mlp {
            sizes: sizes.clone(),
            params: p.to_vec(),
        };
        q_loss(&m, &sa, n, &y).0
    });

    let mut v = Mlp::new(&[sd, h, h, 1], 1.0, &mut rng);
    let (_, gv) = v_loss(&v, &s, n, &y, 0.7);
    let sizes = v.sizes.clone();
    let ev = check_flat(&mut v.params, &gv, eps, |p| {
        let m = Mlp {
            sizes: sizes.clone(),
            params: p.to_vec(),
        };
        v_loss(&m, &s, n, &y, 0.7).0
    });

    let mut pi = GaussianPolicy {
        mlp: Mlp::new(&[sd, h, h, ACTION_DIM], 1.0, &mut rng),
        log_std: (0..ACTION_DIM).map(|_| rng.random_range(-1.0..0.5)).collect(),
    };
    let (_, gp, gls) = pi_loss(&pi, &s, &a, n, &w);
    let base = pi.clone();
    let e1 = check_flat(&mut pi.mlp.params, &gp, eps, |p| {
        let mut m = base.clone();
        m.mlp.params = p.to_vec();
        pi_loss(&m, &s, &a, n, &w).0
    });
    let e2 = check_flat(&mut pi.log_std, &gls, eps, |p| {
        let mut m = base.clone();
        m.log_std = p.to_vec();
        pi_loss(&m, &s, &a, n, &w).0
    });
    IqlGradCheck {
        q: eq,
        v: ev,
        pi: e1.max(e2),
    }
}
