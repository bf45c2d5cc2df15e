//! Tokenized training windows and the track-previous index map.

use super::config::ModelConfig;
use super::ModelError;
use crate::harmony::{harmony_track_bars, HarmonySkeleton};
use crate::score::{Bar, Score, TrackBar};
use crate::tokenizer::{decode_track_bar, encode_truncated, Capacity, Token};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSample {
    pub track_id: u8,
    pub instrument: u8,
    /// Token ids, ending with EOT.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarSample {
    pub bar_length: u32,
    /// Harmony token ids, ending with EOT.
    pub harmony: Vec<usize>,
    /// Track cells in ascending track-id order.
    pub tracks: Vec<CellSample>,
}

/// One window as the model sees it. Serialized one per line in corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct WindowSample {
    pub bars: Vec<BarSample>,
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.id()).collect()
}

/// Notes dropped to fit cell capacities while building a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Truncation {
    pub music_notes: usize,
    pub harmony_notes: usize,
    pub tracks: usize,
}

impl WindowSample {
    /// Tokenizes a window against its harmony skeleton, truncating cells to
    /// the configured capacities and keeping the lowest `tracks` track ids.
    pub fn from_score(
        score: &Score,
        sk: &HarmonySkeleton,
        cfg: &ModelConfig,
    ) -> Result<(Self, Truncation), ModelError> {
        if score.bars.len() > cfg.bars {
            return Err(ModelError::Shape(format!(
                "window of {} bars exceeds the configured {}",
                score.bars.len(),
                cfg.bars
            )));
        }
        let harmony = harmony_track_bars(sk);
        let mut trunc = Truncation::default();
        let mut bars = Vec::with_capacity(score.bars.len());
        for (bi, bar) in score.bars.iter().enumerate() {
            let htb = harmony
                .get(bi)
                .map(|(_, tb)| tb.clone())
                .unwrap_or_else(|| TrackBar::new(0, 0, vec![]));
            let (hseq, dropped) =
                encode_truncated(&htb, bar.bar_length, Capacity::Custom(cfg.harmony_events))
                    .map_err(|e| ModelError::Shape(e.to_string()))?;
            trunc.harmony_notes += dropped;
            let mut active: Vec<&TrackBar> = bar.active_tracks().collect();
            active.sort_by_key(|t| t.track_id);
            if active.len() > cfg.tracks {
                trunc.tracks += active.len() - cfg.tracks;
                active.truncate(cfg.tracks);
            }
            let mut tracks = Vec::with_capacity(active.len());
            for tb in active {
                let (seq, dropped) =
                    encode_truncated(tb, bar.bar_length, Capacity::Custom(cfg.events.min(32)))
                        .map_err(|e| ModelError::Shape(e.to_string()))?;
                trunc.music_notes += dropped;
                tracks.push(CellSample {
                    track_id: tb.track_id,
                    instrument: tb.instrument_id,
                    tokens: ids(&seq.tokens),
                });
            }
            bars.push(BarSample {
                bar_length: bar.bar_length,
                harmony: ids(&hseq.tokens),
                tracks,
            });
        }
        Ok((Self { bars }, trunc))
    }

    /// Rebuilds the score from the music cells.
    pub fn to_score(&self) -> Result<Score, ModelError> {
        let mut bars = Vec::with_capacity(self.bars.len());
        for b in &self.bars {
            let mut bar = Bar::new(b.bar_length);
            for c in &b.tracks {
                let toks: Option<Vec<Token>> = c.tokens.iter().map(|&i| Token::from_id(i)).collect();
                let toks = toks.ok_or_else(|| ModelError::Shape("token id outside the vocabulary".into()))?;
                let tb = decode_track_bar(&toks, b.bar_length, c.track_id, c.instrument)
                    .map_err(|e| ModelError::Shape(e.to_string()))?;
                if !tb.is_empty() {
                    bar.tracks.push(tb);
                }
            }
            bars.push(bar);
        }
        Ok(Score::new(bars))
    }

    pub fn track_ids(&self) -> Vec<Vec<Option<u8>>> {
        self.bars
            .iter()
            .map(|b| b.tracks.iter().map(|c| Some(c.track_id)).collect())
            .collect()
    }
}

/// For every (bar, slot), the slot of the same track in the previous bar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackPrevIndexMap {
    pub map: Vec<Vec<Option<usize>>>,
}

impl TrackPrevIndexMap {
    pub fn get(&self, bar: usize, slot: usize) -> Option<usize> {
        self.map.get(bar).and_then(|r| r.get(slot)).copied().flatten()
    }
}

/// Builds the map from a `[bars][slots]` grid where `None` marks padding.
pub fn build_track_prev_index_map(track_ids: &[Vec<Option<u8>>]) -> Result<TrackPrevIndexMap, ModelError> {
    for (b, row) in track_ids.iter().enumerate() {
        let mut seen = [false; 256];
        for id in row.iter().flatten() {
            if std::mem::replace(&mut seen[*id as usize], true) {
                return Err(ModelError::DuplicateTrack { bar: b, track_id: *id });
            }
        }
    }
    let map = track_ids
        .iter()
        .enumerate()
        .map(|(b, row)| {
            row.iter()
                .map(|id| {
                    let id = (*id)?;
                    if b == 0 {
                        return None;
                    }
                    track_ids[b - 1].iter().position(|p| *p == Some(id))
                })
                .collect()
        })
        .collect();
    Ok(TrackPrevIndexMap { map })
}
