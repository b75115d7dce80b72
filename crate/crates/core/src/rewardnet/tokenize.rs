use std::collections::HashMap;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::trajdata::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    VideoStart = 0,
    Prog = 1,
    Split = 2,
    Pref = 3,
}

pub const N_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Word(usize),
    Special(Special),
    /// Row `row` of `TokenSequence::patches`, at position `slot` in its frame.
    Patch { row: usize, slot: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Flattened patch vectors, `patch_dim` values per visual token.
    pub patches: Vec<f64>,
    pub patch_dim: usize,
    pub prog_positions: Vec<usize>,
    pub pref_position: usize,
    pub split_position: Option<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Word-level lookup over the model vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: &[String]) -> Self {
        Vocab {
            ids: words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect(),
        }
    }

    pub fn encode(&self, instruction: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = instruction
            .split_whitespace()
            .map(|w| {
                self.ids
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::Tokenize(format!("word {w:?} is not in the vocabulary")))
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Tokenize("instruction is empty".into()));
        }
        Ok(ids)
    }
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    seq: TokenSequence,
}

impl Builder<'_> {
    fn push_frame(&mut self, frame: &Frame) -> Result<()> {
        let [c, h, w] = self.cfg.frame_shape;
        if frame.shape() != (c, h, w) {
            return Err(Error::Tokenize(format!(
                "frame shape {:?} does not match model input {c}x{h}x{w}",
                frame.shape()
            )));
        }
        let p = self.cfg.patch;
        let mut slot = 0;
        for py in 0..h / p {
            for px in 0..w / p {
                let row = self.seq.patches.len() / self.seq.patch_dim;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            self.seq.patches.push(frame.get(ch, py * p + dy, px * p + dx) as f64);
                        }
                    }
                }
                self.seq.tokens.push(Token::Patch { row, slot });
                slot += 1;
            }
        }
        Ok(())
    }

    fn special(&mut self, s: Special) -> usize {
        self.seq.tokens.push(Token::Special(s));
        self.seq.tokens.len() - 1
    }
}

fn build(cfg: &ModelConfig, vocab: &Vocab, instruction: &str, a: &[Frame], b: Option<&[Frame]>) -> Result<TokenSequence> {
    if a.is_empty() {
        return Err(Error::Tokenize("no frames".into()));
    }
    if let Some(b) = b {
        if a.len() != b.len() {
            return Err(Error::Tokenize(format!("frame counts differ: {} vs {}", a.len(), b.len())));
        }
    }
    let words = vocab.encode(instruction)?;
    let m = cfg.tokens_per_frame();
    let expected = words.len() + 1 + a.len() * (m + 1) + b.map_or(0, |b| 1 + b.len() * m) + 1;
    if expected > cfg.max_seq {
        return Err(Error::Tokenize(format!("sequence of {expected} tokens exceeds max_seq {}", cfg.max_seq)));
    }
    let mut bld = Builder {
        cfg,
        seq: TokenSequence {
            tokens: words.into_iter().map(Token::Word).collect(),
            patches: Vec::new(),
            patch_dim: cfg.patch_dim(),
            prog_positions: Vec::with_capacity(a.len()),
            pref_position: 0,
            split_position: None,
        },
    };
    bld.special(Special::VideoStart);
    for f in a {
        bld.push_frame(f)?;
        let p = bld.special(Special::Prog);
        bld.seq.prog_positions.push(p);
    }
    if let Some(b) = b {
        bld.seq.split_position = Some(bld.special(Special::Split));
        for f in b {
            bld.push_frame(f)?;
        }
    }
    bld.seq.pref_position = bld.special(Special::Pref);
    debug_assert_eq!(bld.seq.tokens.len(), expected);
    Ok(bld.seq)
}

/// Two-video layout:
/// `[instr] <video_start> (A_t <prog>)… <split> (B_t)… <pref>`.
pub fn tokenize(cfg: &ModelConfig, vocab: &Vocab, instruction: &str, a: &[Frame], b: &[Frame]) -> Result<TokenSequence> {
    build(cfg, vocab, instruction, a, Some(b))
}

/// Single-video layout `[instr] <video_start> (A_t <prog>)… <pref>`; its
/// prefix up to the last `<prog>` coincides with the two-video layout.
pub fn tokenize_single(cfg: &ModelConfig, vocab: &Vocab, instruction: &str, a: &[Frame]) -> Result<TokenSequence> {
    build(cfg, vocab, instruction, a, None)
}
