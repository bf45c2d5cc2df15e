//! Inference, reward and fine-tuning on top of the hierarchical model.

pub mod generate;
pub mod grpo;
pub mod reward;
pub mod sampling;
pub mod skeleton;
pub mod toy;

pub use generate::{generate_window, skeleton_window, GenerationLog, Generated};
pub use grpo::{group_advantages, grpo_step, run_grpo, Bandit, EpochReport, GrpoConfig, ModelPolicy, Policy, RolloutLog, StepReport};
pub use reward::{centroid, cosine, proxy_reward, reward, Embedder, HttpEmbedder, RemoteConfig, RewardKind, RewardSpec, Shaping};
pub use sampling::{nucleus, nucleus_sample, RangeTable, SamplingConfig};
pub use skeleton::{read_skeletons, SkeletonDecoder, SkeletonStream, SurvivalReport};
pub use toy::{toy_corpus, toy_windows, train, TrainConfig, TrainReport};

use crate::harmony::HarmonyError;
use crate::hiermodel::ModelError;
use crate::score::MidiError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("sampling: {0}")]
    Sampling(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("skeleton spans {bars} bars, the model window holds {max}")]
    WindowTooLong { bars: usize, max: usize },
    #[error(transparent)]
    Harmony(#[from] HarmonyError),
    #[error("reward service: {0}")]
    Remote(String),
    #[error("reward: {0}")]
    Reward(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Midi(#[from] MidiError),
}
