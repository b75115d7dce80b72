//! Preference-pair construction: expertise pairs, different-task pairs and
//! rewind augmentation, with subsequence trimming and per-frame targets.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::trajdata::{apply_cutoff, cutoff_frame, supervision_for, Dataset, Frame, Quality, SupervisionTargets, Trajectory, DEFAULT_TAU_SUCC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Expertise,
    DifferentTask,
    Rewind,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Expertise, Strategy::DifferentTask, Strategy::Rewind];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    A,
    B,
}

impl Slot {
    pub fn other(self) -> Slot {
        match self {
            Slot::A => Slot::B,
            Slot::B => Slot::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyWeights {
    pub expertise: f64,
    pub different_task: f64,
    pub rewind: f64,
}

impl Default for StrategyWeights {
    fn default() -> Self {
        StrategyWeights {
            expertise: 1.0,
            different_task: 1.0,
            rewind: 1.0,
        }
    }
}

impl StrategyWeights {
    pub fn only(s: Strategy) -> Self {
        let mut w = StrategyWeights {
            expertise: 0.0,
            different_task: 0.0,
            rewind: 0.0,
        };
        *w.get_mut(s) = 1.0;
        w
    }

    pub fn get(&self, s: Strategy) -> f64 {
        match s {
            Strategy::Expertise => self.expertise,
            Strategy::DifferentTask => self.different_task,
            Strategy::Rewind => self.rewind,
        }
    }

    fn get_mut(&mut self, s: Strategy) -> &mut f64 {
        match s {
            Strategy::Expertise => &mut self.expertise,
            Strategy::DifferentTask => &mut self.different_task,
            Strategy::Rewind => &mut self.rewind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub t_model: usize,
    pub rho_same: f64,
    pub strategy_weights: StrategyWeights,
    pub seed: u64,
    pub min_frames: usize,
    pub tau_succ: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_model: 8,
            rho_same: 0.5,
            strategy_weights: StrategyWeights::default(),
            seed: 0,
            min_frames: 5,
            tau_succ: DEFAULT_TAU_SUCC,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.strategy_weights;
        let ws = [w.expertise, w.different_task, w.rewind];
        if ws.iter().any(|x| !x.is_finite() || *x < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("strategy weights must be nonnegative with a positive sum".into()));
        }
        if self.t_model < self.min_frames || self.t_model < 2 {
            return Err(Error::Config(format!(
                "t_model {} must be at least min_frames {} (and 2)",
                self.t_model, self.min_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.rho_same) {
            return Err(Error::Config("rho_same must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub instruction: String,
    pub frames_a: Vec<Frame>,
    pub frames_b: Vec<Frame>,
    pub pref_target: Slot,
    pub targets_a: SupervisionTargets,
    pub strategy: Strategy,
    /// Original 0-based frame indices behind each slot.
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub ids: [String; 2],
}

/// `n` indices spaced evenly over `0..len` including both ends.
/// Repeats appear only when `len < n`.
pub fn even_positions(len: usize, n: usize) -> Vec<usize> {
    if n == 1 || len == 1 {
        return vec![0; n];
    }
    (0..n)
        .map(|k| {
            let x = k as f64 * (len - 1) as f64 / (n - 1) as f64;
            x.round() as usize
        })
        .collect()
}

/// Evenly spaced `t_model` indices from `start..=end`.
pub fn trim_with(start: usize, end: usize, t_model: usize) -> Vec<usize> {
    even_positions(end - start + 1, t_model).into_iter().map(|p| start + p).collect()
}

/// Uniform start over `0..=T−t_model`, then uniform end among those leaving
/// room for `t_model` distinct frames. Trajectories shorter than `t_model`
/// are stretched with repeats.
pub fn trim_subsequence(num_frames: usize, t_model: usize, min_frames: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if num_frames < min_frames {
        return Err(Error::Ineligible(format!(
            "trajectory has {num_frames} frames, fewer than min_frames {min_frames}"
        )));
    }
    if num_frames < t_model {
        return Ok(trim_with(0, num_frames - 1, t_model));
    }
    let start = rng.random_range(0..=num_frames - t_model);
    let end = rng.random_range(start + t_model - 1..num_frames);
    Ok(trim_with(start, end, t_model))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewindVariant {
    /// `o_{t1..t3}` followed by `o_{t3−1..t2}`.
    Suffix,
    /// `o_{t3..t1}`.
    Reverse,
}

/// Original frame indices of the rejected sequence (0-based `t1 < t2 < t3`).
pub fn rewind_indices(t1: usize, t2: usize, t3: usize, variant: RewindVariant) -> Vec<usize> {
    match variant {
        RewindVariant::Suffix => (t1..=t3).chain((t2..t3).rev()).collect(),
        RewindVariant::Reverse => (t1..=t3).rev().collect(),
    }
}

/// Evenly resample `seq` to `n` entries, forcing position `keep` in.
fn resample_keeping(seq: &[usize], n: usize, keep: usize) -> Vec<usize> {
    let mut pos = even_positions(seq.len(), n);
    if !pos.contains(&keep) {
        // Swap the nearest interior position for `keep` to stay sorted.
        let k = (1..n - 1)
            .min_by_key(|&k| pos[k].abs_diff(keep))
            .expect("n >= 3 when forcing a position");
        pos[k] = keep;
        pos.sort_unstable();
    }
    pos.into_iter().map(|p| seq[p]).collect()
}

fn take_frames(traj: &Trajectory, indices: &[usize]) -> Vec<Frame> {
    indices.iter().map(|&i| traj.frames[i].clone()).collect()
}

/// Preference order between two same-instruction trajectories: labelled
/// final progress when both carry one, quality rank otherwise.
pub fn compare_outcome(a: &Trajectory, b: &Trajectory) -> std::cmp::Ordering {
    match (a.final_progress, b.final_progress) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => a.quality.rank().cmp(&b.quality.rank()),
    }
}

fn assemble(
    instruction: String,
    strategy: Strategy,
    a: (&Trajectory, Vec<usize>),
    b: (&Trajectory, Vec<usize>),
    pref_target: Slot,
    targets_a: SupervisionTargets,
) -> TrainingExample {
    TrainingExample {
        instruction,
        frames_a: take_frames(a.0, &a.1),
        frames_b: take_frames(b.0, &b.1),
        pref_target,
        targets_a,
        strategy,
        indices_a: a.1,
        indices_b: b.1,
        ids: [a.0.id.clone(), b.0.id.clone()],
    }
}

/// Rewind augmentation of an expert trajectory.
pub fn rewind_augment(traj: &Trajectory, rng: &mut Rng, cfg: &SamplerConfig) -> Result<TrainingExample> {
    let full = apply_cutoff(traj, cfg.tau_succ)?;
    let n = traj.num_frames;
    let k = cutoff_frame(n, traj.cutoff.unwrap_or(1.0));
    // 1-based t2 < k keeps the rewound suffix strictly below the peak.
    if n < 4 || k < 3 || cfg.t_model < 3 {
        return Err(Error::Ineligible(format!("{:?} too short to rewind", traj.id)));
    }
    let t2 = rng.random_range(1..k - 1);
    let t1 = rng.random_range(0..t2);
    let t3 = rng.random_range(t2 + 1..n);
    let variant = if rng.random_bool(0.5) {
        RewindVariant::Suffix
    } else {
        RewindVariant::Reverse
    };
    Ok(rewind_from(traj, &full, cfg, [t1, t2, t3], variant, rng.random_bool(0.5)))
}

/// Deterministic core of `rewind_augment` with explicit 0-based cut points.
pub fn rewind_from(
    traj: &Trajectory,
    full: &SupervisionTargets,
    cfg: &SamplerConfig,
    [t1, t2, t3]: [usize; 3],
    variant: RewindVariant,
    chosen_in_a: bool,
) -> TrainingExample {
    let chosen_seq: Vec<usize> = (t1..=t3).collect();
    let chosen = resample_keeping(&chosen_seq, cfg.t_model, chosen_seq.len() - 1);
    let rejected_seq = rewind_indices(t1, t2, t3, variant);
    let peak = rejected_seq.iter().position(|&i| i == t3).unwrap();
    let rejected = resample_keeping(&rejected_seq, cfg.t_model, peak);
    let (a, b, pref) = if chosen_in_a {
        (chosen, rejected, Slot::A)
    } else {
        (rejected, chosen, Slot::B)
    };
    let targets_a = full.select(&a);
    assemble(traj.instruction.clone(), Strategy::Rewind, (traj, a), (traj, b), pref, targets_a)
}

/// Dataset index shared by the strategies.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    ds: &'a Dataset,
    cfg: SamplerConfig,
    experts: Vec<usize>,
    n_instructions: usize,
    /// Per eligible instruction, every comparable (better, worse) pair.
    expertise_pairs: Vec<Vec<(usize, usize)>>,
}

impl<'a> PairSampler<'a> {
    pub fn new(ds: &'a Dataset, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let usable = |t: &Trajectory| t.num_frames >= cfg.min_frames;
        let experts: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.trajectories[i].quality == Quality::Expert && usable(&ds.trajectories[i]))
            .collect();
        let mut by_instr: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in ds.trajectories.iter().enumerate() {
            if usable(t) {
                by_instr.entry(&t.instruction).or_default().push(i);
            }
        }
        let mut expertise_pairs = Vec::new();
        for group in by_instr.values() {
            let mut pairs = Vec::new();
            for (x, &i) in group.iter().enumerate() {
                for &j in &group[x + 1..] {
                    match compare_outcome(&ds.trajectories[i], &ds.trajectories[j]) {
                        std::cmp::Ordering::Greater => pairs.push((i, j)),
                        std::cmp::Ordering::Less => pairs.push((j, i)),
                        std::cmp::Ordering::Equal => {}
                    }
                }
            }
            if !pairs.is_empty() {
                expertise_pairs.push(pairs);
            }
        }
        let n_instructions = experts
            .iter()
            .map(|&i| ds.trajectories[i].instruction.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        Ok(PairSampler {
            ds,
            cfg,
            experts,
            n_instructions,
            expertise_pairs,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn traj(&self, i: usize) -> &'a Trajectory {
        &self.ds.trajectories[i]
    }

    fn trim(&self, t: &Trajectory, rng: &mut Rng) -> Result<Vec<usize>> {
        trim_subsequence(t.num_frames, self.cfg.t_model, self.cfg.min_frames, rng)
    }

    /// Clip ending at the final frame with a uniform start.
    fn trim_to_end(&self, t: &Trajectory, rng: &mut Rng) -> Vec<usize> {
        let n = t.num_frames;
        let start = if n > self.cfg.t_model {
            rng.random_range(0..=n - self.cfg.t_model)
        } else {
            0
        };
        trim_with(start, n - 1, self.cfg.t_model)
    }

    pub fn expertise_pair(&self, rng: &mut Rng) -> Result<TrainingExample> {
        if self.expertise_pairs.is_empty() {
            return Err(Error::Ineligible("no instruction has trajectories of differing outcome".into()));
        }
        let group = &self.expertise_pairs[rng.random_range(0..self.expertise_pairs.len())];
        let (better, worse) = group[rng.random_range(0..group.len())];
        let (a, b, pref) = if rng.random_bool(0.5) {
            (better, worse, Slot::A)
        } else {
            (worse, better, Slot::B)
        };
        let (ta, tb) = (self.traj(a), self.traj(b));
        let ia = self.trim_to_end(ta, rng);
        let ib = self.trim_to_end(tb, rng);
        let targets_a = supervision_for(ta, self.cfg.tau_succ)?.select(&ia);
        Ok(assemble(ta.instruction.clone(), Strategy::Expertise, (ta, ia), (tb, ib), pref, targets_a))
    }

    pub fn different_task_pair(&self, rng: &mut Rng) -> Result<TrainingExample> {
        if self.n_instructions < 2 {
            return Err(Error::Ineligible("different-task pairs need two expert instructions".into()));
        }
        let first = self.experts[rng.random_range(0..self.experts.len())];
        let t1 = self.traj(first);
        let want_same = rng.random_bool(self.cfg.rho_same);
        let pool = |same: bool| -> Vec<usize> {
            self.experts
                .iter()
                .copied()
                .filter(|&j| {
                    let t = self.traj(j);
                    t.instruction != t1.instruction && (t.source == t1.source) == same
                })
                .collect()
        };
        let mut candidates = pool(want_same);
        if candidates.is_empty() {
            candidates = pool(!want_same);
        }
        let second = candidates[rng.random_range(0..candidates.len())];
        let t2 = self.traj(second);
        let (ta, tb) = if rng.random_bool(0.5) { (t1, t2) } else { (t2, t1) };
        let instruction = if rng.random_bool(0.5) {
            ta.instruction.clone()
        } else {
            tb.instruction.clone()
        };
        let ia = self.trim(ta, rng)?;
        let ib = self.trim(tb, rng)?;
        let (pref, targets_a) = if ta.instruction == instruction {
            (Slot::A, apply_cutoff(ta, self.cfg.tau_succ)?.select(&ia))
        } else {
            (Slot::B, SupervisionTargets::zero_progress(self.cfg.t_model))
        };
        Ok(assemble(instruction, Strategy::DifferentTask, (ta, ia), (tb, ib), pref, targets_a))
    }

    pub fn rewind_pair(&self, rng: &mut Rng) -> Result<TrainingExample> {
        if self.experts.is_empty() {
            return Err(Error::Ineligible("rewind needs expert trajectories".into()));
        }
        let t = self.traj(self.experts[rng.random_range(0..self.experts.len())]);
        rewind_augment(t, rng, &self.cfg)
    }

    pub fn sample_with(&self, strategy: Strategy, rng: &mut Rng) -> Result<TrainingExample> {
        match strategy {
            Strategy::Expertise => self.expertise_pair(rng),
            Strategy::DifferentTask => self.different_task_pair(rng),
            Strategy::Rewind => self.rewind_pair(rng),
        }
    }

    /// Example for a global sample index; a pure function of
    /// (dataset, config, index).
    pub fn sample(&self, index: u64) -> Result<TrainingExample> {
        let mut rng = rng_for(&[0x5A3E, self.cfg.seed, index]);
        // A strategy found ineligible is dropped from later draws.
        let mut w = self.cfg.strategy_weights;
        let mut last = None;
        for _ in 0..10 {
            let total: f64 = Strategy::ALL.iter().map(|&s| w.get(s)).sum();
            if total <= 0.0 {
                break;
            }
            let mut u = rng.random::<f64>() * total;
            let mut strategy = *Strategy::ALL.iter().rev().find(|&&s| w.get(s) > 0.0).unwrap();
            for s in Strategy::ALL {
                if w.get(s) > 0.0 && u < w.get(s) {
                    strategy = s;
                    break;
                }
                u -= w.get(s);
            }
            match self.sample_with(strategy, &mut rng) {
                Err(Error::Ineligible(msg)) => {
                    *w.get_mut(strategy) = 0.0;
                    last = Some(msg);
                }
                other => return other,
            }
        }
        Err(Error::Ineligible(format!(
            "no strategy produced an example: {}",
            last.unwrap_or_default()
        )))
    }
}

/// Example for training step `step`; convenience over `PairSampler`.
pub fn sample_example(ds: &Dataset, step: u64, cfg: &SamplerConfig) -> Result<TrainingExample> {
    PairSampler::new(ds, cfg.clone())?.sample(step)
}

#[cfg(test)]
mod tests;
