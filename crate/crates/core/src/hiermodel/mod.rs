//! Desk-scale hierarchical bar/track/event transformer with a hand-written
//! reverse-mode tape.

pub mod checkpoint;
pub mod config;
pub mod cost;
mod model;
pub(crate) use model::{head_params, spans_groups, stack_params, Builder};
pub mod optim;
pub mod params;
pub mod sample;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{LayerCounts, ModelConfig, BOS_ID, END_OF_BAR, MODEL_VOCAB};
pub use cost::{attention_cost, predicted_cost, AttentionCost};
pub use model::{
    ActivationBundle, CellInput, Contexts, DecodeOutput, DecodeRequest, HierModel, LossBreakdown, WindowOutput,
};
pub use optim::{clip_grad_norm, AdamW, CosineSchedule};
pub use params::Params;
pub use sample::{build_track_prev_index_map, BarSample, CellSample, TrackPrevIndexMap, Truncation, WindowSample};
pub use tape::{Stage, Tape};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("track id {track_id} appears twice in bar {bar}")]
    DuplicateTrack { bar: usize, track_id: u8 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
