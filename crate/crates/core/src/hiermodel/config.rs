use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::VOCAB_SIZE;

/// Begin-of-sequence id, appended after the tokenizer vocabulary.
pub const BOS_ID: usize = VOCAB_SIZE;
/// Token vocabulary seen by the model.
pub const MODEL_VOCAB: usize = VOCAB_SIZE + 1;
/// Track-id symbol that closes a bar's track loop.
pub const END_OF_BAR: usize = 32;
pub const TRACK_VOCAB: usize = 33;
pub const BAR_LENGTH_VOCAB: usize = 129;
pub const INSTRUMENT_VOCAB: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub event_encoder: usize,
    pub track_encoder: usize,
    pub bar_decoder: usize,
    pub track_decoder: usize,
    pub harmony_decoder: usize,
    pub music_decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Max bars per window (B).
    pub bars: usize,
    /// Max tracks per bar (T).
    pub tracks: usize,
    /// Max music events per cell (E).
    pub events: usize,
    /// Max harmony events per bar (E_h).
    pub harmony_events: usize,
    /// Hidden width (D).
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub layers: LayerCounts,
    pub token_vocab: usize,
    pub bar_length_vocab: usize,
    pub track_vocab: usize,
    pub instrument_vocab: usize,
    /// How many bars ahead a music bar may look into the harmony block;
    /// `None` shows the whole harmony sequence.
    pub harmony_lookahead: Option<usize>,
    /// Cross-attention to harmony and previous-bar states.
    pub two_stream: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration trainable on a CPU.
    pub fn desk() -> Self {
        Self {
            bars: 8,
            tracks: 4,
            events: 16,
            harmony_events: 16,
            hidden: 64,
            heads: 4,
            ff_mult: 2,
            layers: LayerCounts {
                event_encoder: 1,
                track_encoder: 1,
                bar_decoder: 1,
                track_decoder: 1,
                harmony_decoder: 2,
                music_decoder: 2,
            },
            token_vocab: MODEL_VOCAB,
            bar_length_vocab: BAR_LENGTH_VOCAB,
            track_vocab: TRACK_VOCAB,
            instrument_vocab: INSTRUMENT_VOCAB,
            harmony_lookahead: None,
            two_stream: true,
            seed: 0,
        }
    }

    /// Published full-scale shape; recorded for reference, not trained here.
    pub fn full_scale() -> Self {
        Self {
            bars: 32,
            tracks: 32,
            events: 32,
            harmony_events: 64,
            hidden: 512,
            heads: 8,
            ff_mult: 4,
            layers: LayerCounts {
                event_encoder: 4,
                track_encoder: 4,
                bar_decoder: 4,
                track_decoder: 4,
                harmony_decoder: 8,
                music_decoder: 9,
            },
            ..Self::desk()
        }
    }

    /// Tiny width for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            hidden: 8,
            heads: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden width must be a positive multiple of heads");
        }
        if self.bars == 0 || self.tracks == 0 || self.events == 0 || self.harmony_events == 0 {
            return bad("window dimensions must be positive");
        }
        if self.tracks > 32 || self.events > 32 || self.harmony_events > 64 {
            return bad("cell capacities exceed the token format");
        }
        if self.token_vocab != MODEL_VOCAB
            || self.track_vocab != TRACK_VOCAB
            || self.bar_length_vocab != BAR_LENGTH_VOCAB
            || self.instrument_vocab != INSTRUMENT_VOCAB
        {
            return bad("vocabulary sizes are fixed by the token format");
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive");
        }
        Ok(())
    }
}
