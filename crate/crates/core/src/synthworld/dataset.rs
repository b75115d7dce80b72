use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{gen_task, rollout_with, RolloutMode, RolloutOptions, TaskSpec, WorldState};
use crate::error::{Error, Result};
use crate::rng::{derive, rng_for};
use crate::trajdata::{Dataset, DatasetWriter};

pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    /// Static frames appended after task completion, emulating a recording
    /// that keeps running past the end of the task.
    #[serde(default)]
    pub idle_tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_tasks: usize,
    pub trajs_per_task: usize,
    /// Keys are rollout mode names; `fail` or `fail_*` spreads its weight
    /// evenly over the three failure modes.
    pub mode_mix: BTreeMap<String, f64>,
    pub t_range: [usize; 2],
    pub seed: u64,
    /// First task seed; disjoint offsets give disjoint task splits.
    pub task_seed_offset: u64,
    pub sources: Vec<SourceSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_tasks: 50,
            trajs_per_task: 6,
            mode_mix: [("expert", 0.5), ("fail_*", 0.3), ("suboptimal", 0.2)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            t_range: [12, 24],
            seed: 0,
            task_seed_offset: 0,
            sources: vec![
                SourceSpec {
                    name: "synth-a".into(),
                    idle_tail: 0,
                },
                SourceSpec {
                    name: "synth-b".into(),
                    idle_tail: 0,
                },
            ],
        }
    }
}

impl DatasetConfig {
    /// Normalized weight per mode in `RolloutMode::ALL` order.
    pub fn mode_weights(&self) -> Result<[f64; 5]> {
        let mut w = [0.0; 5];
        for (key, &v) in &self.mode_mix {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("mode_mix weight for {key:?} must be finite and >= 0")));
            }
            if key == "fail" || key == "fail_*" {
                for (i, m) in RolloutMode::ALL.iter().enumerate() {
                    if m.is_failure() {
                        w[i] += v / 3.0;
                    }
                }
            } else {
                let m = RolloutMode::parse(key)
                    .ok_or_else(|| Error::Config(format!("unknown rollout mode {key:?} in mode_mix")))?;
                w[m as usize] += v;
            }
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("mode_mix weights sum to zero".into()));
        }
        Ok(w.map(|x| x / total))
    }

    /// Exact trajectory count per mode by largest remainder.
    pub fn mode_counts(&self) -> Result<[usize; 5]> {
        let w = self.mode_weights()?;
        let total = self.n_tasks * self.trajs_per_task;
        let raw = w.map(|x| x * total as f64);
        let mut counts = raw.map(|x| x.floor() as usize);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(counts)
    }

    fn check(&self) -> Result<()> {
        if self.n_tasks == 0 || self.trajs_per_task == 0 {
            return Err(Error::Config("n_tasks and trajs_per_task must be positive".into()));
        }
        let [lo, hi] = self.t_range;
        if lo < super::rollout::MIN_ROLLOUT_FRAMES || hi < lo {
            return Err(Error::Config(format!("t_range must satisfy 5 <= lo <= hi, got {lo}..{hi}")));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        Ok(())
    }
}

/// Generation record kept alongside each trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub task_index: usize,
    pub mode: RolloutMode,
    pub rollout_seed: u64,
    pub states: Vec<WorldState>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: DatasetConfig,
    pub dataset: Dataset,
    pub tasks: Vec<TaskSpec>,
    /// Parallel to `dataset.trajectories`.
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    pub fn task_of(&self, traj_index: usize) -> &TaskSpec {
        &self.tasks[self.records[traj_index].task_index]
    }
}

/// Modes are laid out in `RolloutMode::ALL` order and dealt round-robin over
/// tasks, so item `i` belongs to task `i mod n_tasks`.
pub fn gen_dataset(config: &DatasetConfig) -> Result<SynthDataset> {
    config.check()?;
    let counts = config.mode_counts()?;
    let tasks: Vec<TaskSpec> = (0..config.n_tasks as u64)
        .map(|j| gen_task(config.task_seed_offset + j))
        .collect();
    let modes: Vec<RolloutMode> = RolloutMode::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&m, n)| std::iter::repeat_n(m, n))
        .collect();

    let mut trajectories = Vec::with_capacity(modes.len());
    let mut records = Vec::with_capacity(modes.len());
    for (i, &mode) in modes.iter().enumerate() {
        let task_index = i % config.n_tasks;
        let task = &tasks[task_index];
        let source = &config.sources[task_index % config.sources.len()];
        let mut rng = rng_for(&[0xDA7A, config.seed, i as u64]);
        let t_len = rng.random_range(config.t_range[0]..=config.t_range[1]);
        let rollout_seed = derive(&[config.seed, i as u64]) % 1_000_000_007;
        let opts = RolloutOptions {
            idle_tail: source.idle_tail,
            ..Default::default()
        };
        let r = rollout_with(task, mode, t_len, rollout_seed, opts)?;
        let mut traj = r.trajectory;
        traj.id = format!("task{}-{}-r{}", task.seed, mode.name(), rollout_seed);
        traj.source = source.name.clone();
        trajectories.push(traj);
        records.push(SynthRecord {
            task_index,
            mode,
            rollout_seed,
            states: r.states,
        });
    }
    Ok(SynthDataset {
        config: config.clone(),
        dataset: Dataset::new(trajectories),
        tasks,
        records,
    })
}

/// Writes frames, manifest and the generating config.
pub fn write_dataset(sd: &SynthDataset, dir: &Path) -> Result<()> {
    let mut writer = DatasetWriter::open(dir)?;
    for traj in &sd.dataset.trajectories {
        writer.write(traj)?;
    }
    let path = dir.join(SYNTH_CONFIG_FILE);
    let mut text = serde_json::to_string_pretty(&sd.config)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Regenerates the synthetic dataset behind a directory written by
/// `write_dataset`, recovering world states for the oracle.
pub fn load_synth(dir: &Path) -> Result<SynthDataset> {
    let path = dir.join(SYNTH_CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: DatasetConfig = serde_json::from_str(&text)?;
    gen_dataset(&config)
}
