//! Loss/data ablation: progress-only vs. +preference vs. +failed data,
//! scored on held-out tasks.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::failuredetect::{evaluate_detector, DetectorConfig, LabeledTrace, Verdict};
use crate::metrics::{build_confusion, confusion_diag_mean, kendall_tau_a, succ_fail_gap};
use crate::pairsampler::SamplerConfig;
use crate::rewardnet::ModelConfig;
use crate::scoring::{ClipRef, NetModel, RewardModel};
use crate::synthworld::{gen_dataset, DatasetConfig, SynthDataset};
use crate::trainer::{train, Checkpoint, TrainConfig, TrainOutput};
use crate::trajdata::{Dataset, Quality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Progress and success losses only, expert data only.
    ProgressOnly,
    /// Adds the preference loss, still expert data only.
    Preference,
    /// Preference loss with suboptimal and failed rollouts mixed in.
    FailedData,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ProgressOnly, Variant::Preference, Variant::FailedData];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProgressOnly => "progress_only",
            Variant::Preference => "preference",
            Variant::FailedData => "failed_data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Full training mix; expert-only variants keep its expert subset.
    pub data: DatasetConfig,
    /// Held-out tasks for ranking, each with one expert, one suboptimal and
    /// one failed rollout.
    pub eval_tasks: usize,
    /// Size of the held-out failure-detection mix.
    pub detect_trajs: usize,
    /// Distinct held-out instructions in the confusion matrix.
    pub confusion_k: usize,
    /// Task seeds at or above this offset are held out.
    pub heldout_offset: u64,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            data: DatasetConfig {
                n_tasks: 40,
                ..Default::default()
            },
            eval_tasks: 30,
            detect_trajs: 200,
            confusion_k: 10,
            heldout_offset: 100_000,
            model: ModelConfig::toy(),
            sampler: SamplerConfig::default(),
            train: TrainConfig {
                steps: 2000,
                batch_size: 8,
                lr: 1e-3,
                eval_every: 0,
                ..Default::default()
            },
            detector: DetectorConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.eval_tasks == 0 || self.detect_trajs == 0 {
            return Err(Error::Config("eval_tasks and detect_trajs must be positive".into()));
        }
        if self.confusion_k < 2 {
            return Err(Error::Config("confusion_k must be at least 2".into()));
        }
        if self.heldout_offset < self.data.task_seed_offset + self.data.n_tasks as u64 {
            return Err(Error::Config("held-out task seeds overlap the training tasks".into()));
        }
        self.detector.validate()?;
        self.sampler.validate()?;
        self.train.validate()
    }

    /// Held-out ranking set: one expert, suboptimal and failed rollout per task.
    pub fn ranking_set(&self) -> Result<SynthDataset> {
        gen_dataset(&DatasetConfig {
            n_tasks: self.eval_tasks,
            trajs_per_task: 3,
            mode_mix: [("expert", 1.0), ("suboptimal", 1.0), ("fail_*", 1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            seed: 0xE7A1,
            task_seed_offset: self.heldout_offset,
            ..self.data.clone()
        })
    }

    /// Held-out failure-detection mix with the training mode proportions.
    pub fn detection_set(&self) -> Result<SynthDataset> {
        let per_task = self.data.trajs_per_task.max(1);
        let n_tasks = self.detect_trajs.div_ceil(per_task);
        let mut sd = gen_dataset(&DatasetConfig {
            n_tasks,
            trajs_per_task: per_task,
            seed: 0xDE7E,
            task_seed_offset: self.heldout_offset + 50_000,
            ..self.data.clone()
        })?;
        sd.dataset.trajectories.truncate(self.detect_trajs);
        sd.records.truncate(self.detect_trajs);
        Ok(sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub kendall_tau_a: f64,
    pub succ_fail_gap: f64,
    pub confusion_diag_mean: f64,
    pub detect_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub kendall_tau_a: f64,
    pub succ_fail_gap: f64,
    pub confusion_diag_mean: f64,
    pub detect_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<VariantRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn mean(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Training data, loss weights and seeds for one variant.
pub fn variant_setup(cfg: &AblationConfig, variant: Variant, seed: u64) -> Result<(Dataset, SamplerConfig, TrainConfig)> {
    let full = gen_dataset(&DatasetConfig {
        seed,
        ..cfg.data.clone()
    })?
    .dataset;
    let ds = match variant {
        Variant::FailedData => full,
        _ => Dataset::new(
            full.trajectories
                .into_iter()
                .filter(|t| t.quality == Quality::Expert)
                .collect(),
        ),
    };
    let sampler = SamplerConfig {
        seed,
        ..cfg.sampler.clone()
    };
    let mut train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    if variant == Variant::ProgressOnly {
        train.loss.lambda_pref = 0.0;
    }
    Ok((ds, sampler, train))
}

pub fn train_variant(cfg: &AblationConfig, variant: Variant, seed: u64) -> Result<Checkpoint> {
    let (ds, sampler, train_cfg) = variant_setup(cfg, variant, seed)?;
    log::info!("{} seed {seed}: {} training trajectories", variant.name(), ds.len());
    train(&ds, cfg.model.clone(), sampler, train_cfg, &TrainOutput::default())
}

/// Mean per-task τ_a of final progress against outcome rank, plus the
/// expert-minus-fail gap.
pub fn ranking_metrics(model: &dyn RewardModel, set: &SynthDataset) -> Result<(f64, f64)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        groups.entry(r.task_index).or_default().push(i);
    }
    let trajs = &set.dataset.trajectories;
    let mut finals = vec![0.0; trajs.len()];
    for (i, t) in trajs.iter().enumerate() {
        finals[i] = model.trace(&t.instruction, &ClipRef::full(t))?.final_progress();
    }
    let mut taus = Vec::new();
    for idx in groups.values() {
        let ranks: Vec<i64> = idx.iter().map(|&i| trajs[i].quality.rank() as i64).collect();
        if ranks.iter().all(|&r| r == ranks[0]) {
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| finals[i]).collect();
        taus.push(kendall_tau_a(&s, &ranks)?);
    }
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no task has distinct outcome ranks".into()));
    }
    let mut by_q: HashMap<Quality, Vec<f64>> = HashMap::new();
    for (i, t) in trajs.iter().enumerate() {
        by_q.entry(t.quality).or_default().push(finals[i]);
    }
    let tau = taus.iter().sum::<f64>() / taus.len() as f64;
    Ok((tau, succ_fail_gap(&by_q)?))
}

/// Confusion diagonal over the experts of the first `k` distinct instructions.
pub fn confusion_metric(model: &dyn RewardModel, set: &SynthDataset, k: usize) -> Result<f64> {
    let mut picked: Vec<(ClipRef<'_>, String)> = Vec::new();
    for t in &set.dataset.trajectories {
        if picked.len() == k {
            break;
        }
        if t.quality == Quality::Expert && picked.iter().all(|(_, s)| *s != t.instruction) {
            picked.push((ClipRef::full(t), t.instruction.clone()));
        }
    }
    if picked.len() < k {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct held-out instructions, need {k}",
            picked.len()
        )));
    }
    confusion_diag_mean(&build_confusion(model, &picked)?)
}

/// Detector inputs from a model's traces; only experts count as successes.
pub fn labeled_traces(model: &dyn RewardModel, ds: &Dataset) -> Result<Vec<LabeledTrace>> {
    ds.trajectories
        .iter()
        .map(|t| {
            let tr = model.trace(&t.instruction, &ClipRef::full(t))?;
            Ok(LabeledTrace {
                success_prob: tr.final_success(),
                progress: tr.progress,
                truth: if t.quality == Quality::Expert {
                    Verdict::Success
                } else {
                    Verdict::Failure
                },
            })
        })
        .collect()
}

pub fn score_model(
    cfg: &AblationConfig,
    model: &dyn RewardModel,
    ranking: &SynthDataset,
    detection: &SynthDataset,
) -> Result<(f64, f64, f64, f64)> {
    let (tau, gap) = ranking_metrics(model, ranking)?;
    let conf = confusion_metric(model, ranking, cfg.confusion_k)?;
    let f1 = evaluate_detector(&cfg.detector, &labeled_traces(model, &detection.dataset)?)?.f1;
    Ok((tau, gap, conf, f1))
}

/// Trains every variant for every seed and scores each on the held-out sets.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let ranking = cfg.ranking_set()?;
    let detection = cfg.detection_set()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for v in Variant::ALL {
            let ckpt = train_variant(cfg, v, seed)?;
            let model = NetModel::from_checkpoint(&ckpt);
            let (tau, gap, conf, f1) = score_model(cfg, &model, &ranking, &detection)?;
            log::info!(
                "{} seed {seed}: tau_a {tau:.3} gap {gap:.3} confusion {conf:.3} f1 {f1:.3}",
                v.name()
            );
            runs.push(VariantRun {
                variant: v,
                seed,
                kendall_tau_a: tau,
                succ_fail_gap: gap,
                confusion_diag_mean: conf,
                detect_f1: f1,
            });
        }
    }
    let n = cfg.seeds.len() as f64;
    let summary = Variant::ALL
        .iter()
        .map(|&v| {
            let rs: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == v).collect();
            let avg = |f: fn(&VariantRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            VariantSummary {
                variant: v,
                kendall_tau_a: avg(|r| r.kendall_tau_a),
                succ_fail_gap: avg(|r| r.succ_fail_gap),
                confusion_diag_mean: avg(|r| r.confusion_diag_mean),
                detect_f1: avg(|r| r.detect_f1),
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}
