//! Training loop: cosine schedule with warmup, AdamW, pure-by-step batch
//! sampling, checkpointing and resume.

mod checkpoint;

pub use checkpoint::{Checkpoint, CKPT_MAGIC, CKPT_VERSION};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::pairsampler::{PairSampler, SamplerConfig, TrainingExample};
use crate::rewardnet::{composite_loss, dropout_rng, LossComponents, LossWeights, ModelConfig, RewardNet};
use crate::trajdata::{Dataset, SupervisionTargets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    /// Model initialisation and dropout.
    pub seed: u64,
    pub eval_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 250,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_ratio·steps`, then cosine decay to 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_ratio * cfg.steps as f64;
    let s = step.min(cfg.steps) as f64;
    if s < warmup {
        return cfg.lr * s / warmup;
    }
    let span = cfg.steps as f64 - warmup;
    if span <= 0.0 {
        return 0.0;
    }
    let progress = (s - warmup) / span;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One row of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_pref: f64,
    pub l_prog: f64,
    pub l_succ: f64,
    pub lr: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.rbmc";

/// Fresh checkpoint at step 0.
pub fn init_checkpoint(model: ModelConfig, sampler: SamplerConfig, train: TrainConfig) -> Result<Checkpoint> {
    train.validate()?;
    sampler.validate()?;
    let net = RewardNet::new(model, train.seed)?;
    let opt = AdamW::new(&net.params, train.weight_decay);
    Ok(Checkpoint {
        net,
        opt,
        sampler,
        train,
        step: 0,
    })
}

/// Loss over a batch in eval mode.
pub fn batch_loss(net: &RewardNet, batch: &[TrainingExample], weights: LossWeights) -> Result<LossComponents> {
    let w = net.params.widen();
    let mut outs = Vec::with_capacity(batch.len());
    for ex in batch {
        outs.push(net.forward_example(&w, ex, None)?.0);
    }
    let targets: Vec<&SupervisionTargets> = batch.iter().map(|e| &e.targets_a).collect();
    let prefs: Vec<_> = batch.iter().map(|e| e.pref_target).collect();
    Ok(composite_loss(&outs, &targets, &prefs, net.cfg.n_bins, weights)?.0)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn to_dir(dir: &Path) -> Self {
        TrainOutput {
            dir: Some(dir.to_path_buf()),
        }
    }
}

fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(row)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Single optimisation step on the batch for `ckpt.step`.
pub fn train_step(ckpt: &mut Checkpoint, sampler: &PairSampler) -> Result<StepLog> {
    let cfg = &ckpt.train;
    let step = ckpt.step;
    let lr = lr_at(step, cfg);
    let b = cfg.batch_size;
    let batch: Vec<TrainingExample> = (0..b)
        .map(|i| sampler.sample((step * b + i) as u64))
        .collect::<Result<_>>()?;
    let net = &ckpt.net;
    let w = net.params.widen();
    let mut outs = Vec::with_capacity(b);
    let mut caches = Vec::with_capacity(b);
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = dropout_rng(cfg.seed, step as u64, i as u64);
        let (o, c) = net.forward_example(&w, ex, Some(&mut rng))?;
        outs.push(o);
        caches.push(c);
    }
    let targets: Vec<&SupervisionTargets> = batch.iter().map(|e| &e.targets_a).collect();
    let prefs: Vec<_> = batch.iter().map(|e| e.pref_target).collect();
    let (loss, head_grads) = composite_loss(&outs, &targets, &prefs, net.cfg.n_bins, cfg.loss)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            lr,
            l_pref: loss.l_pref,
            l_prog: loss.l_prog,
            l_succ: loss.l_succ,
        });
    }
    let mut grads = net.params.zeros_f64();
    for (cache, g) in caches.iter().zip(&head_grads) {
        net.backward_example(&w, cache, g, &mut grads);
    }
    ckpt.opt.step(&mut ckpt.net.params, &grads, lr, step + 1);
    ckpt.step += 1;
    Ok(StepLog {
        step,
        l_pref: loss.l_pref,
        l_prog: loss.l_prog,
        l_succ: loss.l_succ,
        lr,
    })
}

/// Trains from `ckpt.step` up to `stop_at` (capped at the configured step
/// count). Appends one metrics row per step and writes the checkpoint every
/// `eval_every` steps and at the end.
pub fn train_until(ds: &Dataset, mut ckpt: Checkpoint, stop_at: usize, out: &TrainOutput) -> Result<Checkpoint> {
    let sampler = PairSampler::new(ds, ckpt.sampler.clone())?;
    let stop_at = stop_at.min(ckpt.train.steps);
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while ckpt.step < stop_at {
        let log = train_step(&mut ckpt, &sampler)?;
        if log.step % 50 == 0 {
            log::info!(
                "step {} lr {:.2e} pref {:.4} prog {:.4} succ {:.4}",
                log.step,
                log.lr,
                log.l_pref,
                log.l_prog,
                log.l_succ
            );
        }
        if let Some(dir) = &out.dir {
            append_jsonl(&dir.join(METRICS_FILE), &log)?;
            let every = ckpt.train.eval_every;
            if (every > 0 && ckpt.step % every == 0) || ckpt.step == stop_at {
                ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(ckpt)
}

/// Full run from a fresh initialisation.
pub fn train(ds: &Dataset, model: ModelConfig, sampler: SamplerConfig, cfg: TrainConfig, out: &TrainOutput) -> Result<Checkpoint> {
    let ckpt = init_checkpoint(model, sampler, cfg)?;
    let steps = ckpt.train.steps;
    train_until(ds, ckpt, steps, out)
}
