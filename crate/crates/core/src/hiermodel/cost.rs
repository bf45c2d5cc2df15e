//! Attention score-entry accounting per stage.

use super::config::ModelConfig;
use super::model::HierModel;
use super::sample::{BarSample, CellSample, WindowSample};
use super::tape::{Stage, Tape};
use super::ModelError;
use crate::tokenizer::Token;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    pub stages: BTreeMap<Stage, u64>,
}

impl Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{self:?}"))
    }
}

impl AttentionCost {
    pub fn get(&self, stage: Stage) -> u64 {
        self.stages.get(&stage).copied().unwrap_or(0)
    }

    /// Event-axis self-attention: event encoder and music decoder.
    pub fn event_stage(&self) -> u64 {
        self.get(Stage::EventEncoder) + self.get(Stage::MusicSelf)
    }

    pub fn track_stage(&self) -> u64 {
        self.get(Stage::TrackEncoder) + self.get(Stage::TrackDecoder)
    }

    pub fn bar_stage(&self) -> u64 {
        self.get(Stage::BarDecoder)
    }

    pub fn total(&self) -> u64 {
        self.stages.values().sum()
    }
}

/// A window filled to capacity on every axis.
fn full_window(cfg: &ModelConfig) -> WindowSample {
    let cell = |n: usize| {
        let mut t = vec![Token::Pitch(60).id(); n - 1];
        t.push(Token::Eot.id());
        t
    };
    WindowSample {
        bars: (0..cfg.bars)
            .map(|_| BarSample {
                bar_length: 32,
                harmony: cell(cfg.harmony_events),
                tracks: (0..cfg.tracks)
                    .map(|t| CellSample {
                        track_id: t as u8,
                        instrument: 0,
                        tokens: cell(cfg.events),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Counts attention score entries of one full-capacity forward pass. The
/// hidden width is irrelevant to the count and is shrunk to keep it cheap.
pub fn attention_cost(cfg: &ModelConfig) -> Result<AttentionCost, ModelError> {
    let small = ModelConfig {
        hidden: cfg.heads,
        ff_mult: 1,
        ..cfg.clone()
    };
    let model = HierModel::new(small)?;
    let mut tape = Tape::new();
    model.forward(&mut tape, &full_window(cfg))?;
    Ok(AttentionCost { stages: tape.cost })
}

/// Closed form of [`attention_cost`].
pub fn predicted_cost(cfg: &ModelConfig) -> AttentionCost {
    let (b, t, e, eh, h) = (
        cfg.bars as u64,
        cfg.tracks as u64,
        cfg.events as u64,
        cfg.harmony_events as u64,
        cfg.heads as u64,
    );
    let l = cfg.layers;
    let md = l.music_decoder as u64;
    let mut stages = BTreeMap::new();
    stages.insert(Stage::EventEncoder, l.event_encoder as u64 * h * b * t * e * e);
    stages.insert(Stage::HarmonyEncoder, l.event_encoder as u64 * h * b * eh * eh);
    stages.insert(Stage::TrackEncoder, l.track_encoder as u64 * h * b * t * t);
    stages.insert(Stage::BarDecoder, l.bar_decoder as u64 * h * 4 * b * b);
    stages.insert(Stage::TrackDecoder, l.track_decoder as u64 * h * b * t * t);
    stages.insert(Stage::HarmonyDecoder, l.harmony_decoder as u64 * h * b * eh * eh);
    stages.insert(Stage::MusicSelf, md * h * b * t * e * e);
    if cfg.two_stream {
        stages.insert(Stage::MusicCrossHarmony, md.div_ceil(2) * h * b * t * e * eh);
        if b > 1 {
            stages.insert(Stage::MusicCrossPrevious, (md / 2) * h * (b - 1) * t * e * e);
        }
    }
    stages.retain(|_, v| *v > 0);
    AttentionCost { stages }
}
