//! The reward model: token layout, transformer forward/backward, heads,
//! categorical progress bins and the composite loss.

mod bins;
mod gradcheck;
mod loss;
mod model;
mod tokenize;

pub use bins::{bin_centers, expectation, expected_progress, project_to_bins};
pub use gradcheck::{grad_check, loss_and_grad, GradCheckEntry, GradCheckReport};
pub use loss::{composite_loss, example_loss, HeadGrads, LossComponents, LossWeights};
pub use model::ForwardCache;
pub use tokenize::{tokenize, tokenize_single, Special, Token, TokenSequence, Vocab, N_SPECIAL};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, ParamSet};
use crate::pairsampler::{Slot, TrainingExample};
use crate::rng::{rng_for, Rng};
use crate::trajdata::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrefMode {
    /// One pass over both videos; the logit comes from the `<pref>` token.
    #[default]
    Joint,
    /// Each video scored alone; the logit is the score difference.
    BradleyTerry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub n_bins: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    pub vocab: Vec<String>,
    pub max_seq: usize,
    /// Input frame shape `[C, H, W]`.
    pub frame_shape: [usize; 3],
    pub pref_mode: PrefMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            patch: 4,
            n_bins: 10,
            head_hidden: 512,
            head_dropout: 0.1,
            vocab: crate::synthworld::vocabulary(),
            max_seq: 288,
            frame_shape: [3, 16, 16],
            pref_mode: PrefMode::Joint,
        }
    }
}

impl ModelConfig {
    /// Small preset that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            patch: 8,
            head_hidden: 64,
            max_seq: 96,
            ..Default::default()
        }
    }

    /// Gradient-check preset.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            patch: 8,
            head_hidden: 16,
            max_seq: 96,
            ..Default::default()
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        let [_, h, w] = self.frame_shape;
        (h / self.patch) * (w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.frame_shape[0] * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.frame_shape;
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2".into());
        }
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || c == 0 {
            return bad(format!("frame {h}x{w} not divisible by patch {}", self.patch));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return bad("head_dropout must lie in [0, 1)".into());
        }
        if self.vocab.is_empty() || self.head_hidden == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return bad("vocab, head_hidden, n_layers and max_seq must be nonempty".into());
        }
        Ok(())
    }
}

/// Outputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `T × N` logits behind `progress_dists`.
    pub progress_logits: Vec<Vec<f64>>,
    pub progress_dists: Vec<Vec<f64>>,
    pub success_logits: Vec<f64>,
    pub pref_logit: f64,
}

impl HeadOutputs {
    pub fn expected_progress(&self) -> Vec<f64> {
        self.progress_dists.iter().map(|d| expectation(d)).collect()
    }

    pub fn success_probs(&self) -> Vec<f64> {
        self.success_logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub mlp_proj_w: usize,
    pub mlp_proj_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadIds {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub ln_g: usize,
    pub ln_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub out: usize,
}

/// Parameter ids by role.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub word: usize,
    pub special: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub patch_pos: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub progress: HeadIds,
    pub success: HeadIds,
    pub pref: HeadIds,
}

/// Expected parameter names and shapes, in storage order.
pub fn param_spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let hh = cfg.head_hidden;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("embed.word".into(), vec![cfg.vocab.len(), d]),
        ("embed.special".into(), vec![N_SPECIAL, d]),
        ("embed.patch.w".into(), vec![d, cfg.patch_dim()]),
        ("embed.patch.b".into(), vec![d]),
        ("embed.patch_pos".into(), vec![cfg.tokens_per_frame(), d]),
        ("embed.pos".into(), vec![cfg.max_seq, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("blocks.{l}");
        v.extend([
            (format!("{p}.ln1.g"), vec![d]),
            (format!("{p}.ln1.b"), vec![d]),
            (format!("{p}.attn.qkv.w"), vec![3 * d, d]),
            (format!("{p}.attn.qkv.b"), vec![3 * d]),
            (format!("{p}.attn.proj.w"), vec![d, d]),
            (format!("{p}.attn.proj.b"), vec![d]),
            (format!("{p}.ln2.g"), vec![d]),
            (format!("{p}.ln2.b"), vec![d]),
            (format!("{p}.mlp.fc.w"), vec![4 * d, d]),
            (format!("{p}.mlp.fc.b"), vec![4 * d]),
            (format!("{p}.mlp.proj.w"), vec![d, 4 * d]),
            (format!("{p}.mlp.proj.b"), vec![d]),
        ]);
    }
    v.push(("ln_f.g".into(), vec![d]));
    v.push(("ln_f.b".into(), vec![d]));
    for (name, out) in [("progress", cfg.n_bins), ("success", 1), ("pref", 1)] {
        let p = format!("head.{name}");
        v.extend([
            (format!("{p}.fc1.w"), vec![hh, d]),
            (format!("{p}.fc1.b"), vec![hh]),
            (format!("{p}.ln.g"), vec![hh]),
            (format!("{p}.ln.b"), vec![hh]),
            (format!("{p}.fc2.w"), vec![out, hh]),
            (format!("{p}.fc2.b"), vec![out]),
        ]);
    }
    v
}

fn layout(cfg: &ModelConfig, params: &ParamSet) -> Layout {
    let id = |n: &str| params.id(n).unwrap_or_else(|| panic!("missing parameter {n}"));
    let head = |name: &str, out: usize| HeadIds {
        fc1_w: id(&format!("head.{name}.fc1.w")),
        fc1_b: id(&format!("head.{name}.fc1.b")),
        ln_g: id(&format!("head.{name}.ln.g")),
        ln_b: id(&format!("head.{name}.ln.b")),
        fc2_w: id(&format!("head.{name}.fc2.w")),
        fc2_b: id(&format!("head.{name}.fc2.b")),
        out,
    };
    Layout {
        word: id("embed.word"),
        special: id("embed.special"),
        patch_w: id("embed.patch.w"),
        patch_b: id("embed.patch.b"),
        patch_pos: id("embed.patch_pos"),
        pos: id("embed.pos"),
        blocks: (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| id(&format!("blocks.{l}.{s}"));
                BlockIds {
                    ln1_g: n("ln1.g"),
                    ln1_b: n("ln1.b"),
                    qkv_w: n("attn.qkv.w"),
                    qkv_b: n("attn.qkv.b"),
                    proj_w: n("attn.proj.w"),
                    proj_b: n("attn.proj.b"),
                    ln2_g: n("ln2.g"),
                    ln2_b: n("ln2.b"),
                    fc_w: n("mlp.fc.w"),
                    fc_b: n("mlp.fc.b"),
                    mlp_proj_w: n("mlp.proj.w"),
                    mlp_proj_b: n("mlp.proj.b"),
                }
            })
            .collect(),
        lnf_g: id("ln_f.g"),
        lnf_b: id("ln_f.b"),
        progress: head("progress", cfg.n_bins),
        success: head("success", 1),
        pref: head("pref", 1),
    }
}

/// How one training example was run, kept for the backward pass.
#[derive(Debug, Clone)]
pub enum ExampleCache {
    Joint(TokenSequence, ForwardCache),
    BradleyTerry {
        a: (TokenSequence, ForwardCache),
        b: (TokenSequence, ForwardCache),
    },
}

#[derive(Debug, Clone)]
pub struct RewardNet {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    vocab: Vocab,
    pub(crate) layout: Layout,
}

impl PartialEq for RewardNet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl RewardNet {
    /// Random initialisation: embeddings N(0, 0.5²), weight matrices
    /// N(0, 1/fan_in) with residual output projections further scaled by
    /// 1/sqrt(2L), unit LayerNorm gains and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(crate::rng::derive(&[0x1217, seed]));
        let mut params = ParamSet::new();
        for (name, shape) in param_spec(&cfg) {
            let n: usize = shape.iter().product();
            let std = if name.ends_with(".g") || name.ends_with(".b") {
                0.0
            } else if !name.ends_with(".w") {
                0.5
            } else if name.starts_with("blocks.") && name.ends_with("proj.w") {
                (shape[1] as f64 * 2.0 * cfg.n_layers as f64).powf(-0.5)
            } else {
                (shape[1] as f64).powf(-0.5)
            };
            let data: Vec<f32> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            params.push(&name, &shape, data);
        }
        Self::from_params(cfg, params)
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let spec = param_spec(&cfg);
        if spec.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                spec.len(),
                params.len()
            )));
        }
        for (name, shape) in &spec {
            match params.get(name) {
                Some(t) if &t.shape == shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        let layout = layout(&cfg, &params);
        let vocab = Vocab::new(&cfg.vocab);
        Ok(RewardNet {
            cfg,
            params,
            vocab,
            layout,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenize(&self, instruction: &str, a: &[Frame], b: &[Frame]) -> Result<TokenSequence> {
        tokenize(&self.cfg, &self.vocab, instruction, a, b)
    }

    pub fn tokenize_single(&self, instruction: &str, a: &[Frame]) -> Result<TokenSequence> {
        tokenize_single(&self.cfg, &self.vocab, instruction, a)
    }

    /// Forward pass with parameters widened on the fly.
    pub fn forward(&self, seq: &TokenSequence, dropout: Option<&mut Rng>) -> Result<HeadOutputs> {
        let w = self.params.widen();
        Ok(self.forward_with(&w, seq, dropout)?.0)
    }

    pub fn forward_with(&self, w: &[Vec<f64>], seq: &TokenSequence, dropout: Option<&mut Rng>) -> Result<(HeadOutputs, ForwardCache)> {
        model::forward(self, w, seq, dropout)
    }

    pub fn backward_with(&self, w: &[Vec<f64>], seq: &TokenSequence, cache: &ForwardCache, d: &HeadGrads, grads: &mut [Vec<f64>]) {
        model::backward(self, w, seq, cache, d, grads)
    }

    /// Runs one example in its training layout.
    pub fn forward_example(
        &self,
        w: &[Vec<f64>],
        ex: &TrainingExample,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(HeadOutputs, ExampleCache)> {
        match self.cfg.pref_mode {
            PrefMode::Joint => {
                let seq = self.tokenize(&ex.instruction, &ex.frames_a, &ex.frames_b)?;
                let (out, cache) = self.forward_with(w, &seq, dropout)?;
                Ok((out, ExampleCache::Joint(seq, cache)))
            }
            PrefMode::BradleyTerry => {
                let sa = self.tokenize_single(&ex.instruction, &ex.frames_a)?;
                let sb = self.tokenize_single(&ex.instruction, &ex.frames_b)?;
                let (mut oa, ca) = self.forward_with(w, &sa, dropout.as_deref_mut())?;
                let (ob, cb) = self.forward_with(w, &sb, dropout)?;
                oa.pref_logit -= ob.pref_logit;
                Ok((oa, ExampleCache::BradleyTerry { a: (sa, ca), b: (sb, cb) }))
            }
        }
    }

    pub fn backward_example(&self, w: &[Vec<f64>], cache: &ExampleCache, d: &HeadGrads, grads: &mut [Vec<f64>]) {
        match cache {
            ExampleCache::Joint(seq, c) => self.backward_with(w, seq, c, d, grads),
            ExampleCache::BradleyTerry { a, b } => {
                self.backward_with(w, &a.0, &a.1, d, grads);
                let db = HeadGrads {
                    progress: vec![0.0; d.progress.len()],
                    success: vec![0.0; d.success.len()],
                    pref: -d.pref,
                };
                self.backward_with(w, &b.0, &b.1, &db, grads);
            }
        }
    }

    /// Per-frame expected progress and success probability of one clip.
    pub fn progress_trace(&self, instruction: &str, frames: &[Frame]) -> Result<(Vec<f64>, Vec<f64>)> {
        let seq = self.tokenize_single(instruction, frames)?;
        let out = self.forward(&seq, None)?;
        Ok((out.expected_progress(), out.success_probs()))
    }

    /// Probability that clip `a` better satisfies the instruction than `b`.
    pub fn prefer(&self, instruction: &str, a: &[Frame], b: &[Frame]) -> Result<f64> {
        let w = self.params.widen();
        let ex = TrainingExample {
            instruction: instruction.to_string(),
            frames_a: a.to_vec(),
            frames_b: b.to_vec(),
            pref_target: Slot::A,
            targets_a: crate::trajdata::SupervisionTargets::unsupervised(a.len()),
            strategy: crate::pairsampler::Strategy::Expertise,
            indices_a: Vec::new(),
            indices_b: Vec::new(),
            ids: [String::new(), String::new()],
        };
        let (out, _) = self.forward_example(&w, &ex, None)?;
        Ok(sigmoid(out.pref_logit))
    }
}

/// Dropout stream for example `index` of training step `step`.
pub fn dropout_rng(seed: u64, step: u64, index: u64) -> Rng {
    rng_for(&[0xD209, seed, step, index])
}
