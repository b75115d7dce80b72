//! Trajectory reward modelling at desk scale.
//!
//! A causal sequence model reads an instruction and two equal-length frame
//! sequences laid out as
//!
//! ```text
//! [instr] <video_start> ([frame A_t] <prog>)_{t=1..T} <split> ([frame B_t])_{t=1..T} <pref>
//! ```
//!
//! and predicts a categorical progress distribution and a success logit at
//! every `<prog>` token plus a single preference logit at `<pref>`. The crate
//! also contains the synthetic manipulation world used to train and verify
//! it, the pair-construction strategies, evaluation metrics, a sliding-window
//! failure detector, subtrajectory retrieval and an IQL harness for offline
//! RL with relabelled rewards.

pub mod annotate;
pub mod error;
pub mod experiments;
pub mod failuredetect;
pub mod iql;
pub mod metrics;
pub mod nn;
pub mod pairsampler;
pub mod retrieval;
pub mod rewardnet;
pub mod rng;
pub mod scoring;
pub mod synthworld;
pub mod trainer;
pub mod trajdata;

pub use error::{Error, Result};
pub use synthworld::{RolloutMode, TaskSpec, WorldState};
pub use trajdata::{Dataset, Frame, Quality, SupervisionTargets, Trajectory};
pub use pairsampler::{PairSampler, SamplerConfig, Strategy, TrainingExample};
pub use rewardnet::{HeadOutputs, ModelConfig, RewardNet, TokenSequence};
pub use trainer::{Checkpoint, TrainConfig};
pub use scoring::{ClipRef, NetModel, OracleModel, RewardModel};
pub use metrics::MetricReport;
