//! Quantized multi-track score representation.
//!
//! Time is measured in grid units of a 32nd note; a quarter note is 8 units.
//! Notes live in the bar that contains their onset and may sustain past the
//! bar line.

pub mod midi;

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

pub use midi::{parse_midi, write_midi, MidiError};

/// Grid units per quarter note.
pub const GRID_PER_QUARTER: u32 = 8;
/// Longest representable note.
pub const MAX_DURATION: u32 = 128;
/// Track slots per bar.
pub const MAX_TRACKS: usize = 32;
/// Bars per generation window.
pub const MAX_WINDOW_BARS: usize = 32;
pub const MIN_BAR_LENGTH: u32 = 8;
pub const MAX_BAR_LENGTH: u32 = 128;
pub const DEFAULT_BPM: f64 = 120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("bar {bar}: track {track_id}: note {note:?} is invalid ({reason})")]
    InvalidNote {
        bar: usize,
        track_id: u8,
        note: NoteEvent,
        reason: &'static str,
    },
    #[error("bar {bar}: events of track {track_id} are not sorted or contain duplicates")]
    Unsorted { bar: usize, track_id: u8 },
    #[error("bar {bar}: track id {track_id} appears twice")]
    DuplicateTrack { bar: usize, track_id: u8 },
    #[error("bar {bar}: {count} tracks exceed the {MAX_TRACKS}-track capacity")]
    TooManyTracks { bar: usize, count: usize },
    #[error("bar {bar}: track id {track_id} out of range")]
    TrackIdOutOfRange { bar: usize, track_id: u8 },
    #[error("bar {bar}: bar length {length} outside {MIN_BAR_LENGTH}..={MAX_BAR_LENGTH}")]
    BarLength { bar: usize, length: u32 },
    #[error("tempo must be positive and finite, got {0}")]
    Tempo(f64),
}

/// One note, positioned relative to the start of its bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u32,
    pub duration: u32,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u32, duration: u32) -> Self {
        Self {
            pitch,
            onset,
            duration,
        }
    }

    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

// Canonical order: (onset, duration, pitch).
impl Ord for NoteEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.onset, self.duration, self.pitch).cmp(&(other.onset, other.duration, other.pitch))
    }
}

impl PartialOrd for NoteEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The notes of one track inside one bar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackBar {
    pub track_id: u8,
    pub instrument_id: u8,
    pub events: Vec<NoteEvent>,
}

impl TrackBar {
    /// Builds a track bar, sorting events canonically and dropping exact duplicates.
    pub fn new(track_id: u8, instrument_id: u8, mut events: Vec<NoteEvent>) -> Self {
        events.sort();
        events.dedup();
        Self {
            track_id,
            instrument_id,
            events,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self, bar: usize, bar_length: u32) -> Result<(), ScoreError> {
        if self.track_id as usize >= MAX_TRACKS {
            return Err(ScoreError::TrackIdOutOfRange {
                bar,
                track_id: self.track_id,
            });
        }
        for note in &self.events {
            let reason = if note.pitch > 127 {
                Some("pitch above 127")
            } else if note.onset >= bar_length {
                Some("onset past bar end")
            } else if note.duration == 0 {
                Some("zero duration")
            } else if note.duration > MAX_DURATION {
                Some("duration above 128")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(ScoreError::InvalidNote {
                    bar,
                    track_id: self.track_id,
                    note: *note,
                    reason,
                });
            }
        }
        if self.events.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScoreError::Unsorted {
                bar,
                track_id: self.track_id,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bar {
    pub bar_length: u32,
    pub tracks: Vec<TrackBar>,
}

impl Bar {
    pub fn new(bar_length: u32) -> Self {
        Self {
            bar_length,
            tracks: Vec::new(),
        }
    }

    pub fn track(&self, track_id: u8) -> Option<&TrackBar> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Tracks holding at least one note.
    pub fn active_tracks(&self) -> impl Iterator<Item = &TrackBar> {
        self.tracks.iter().filter(|t| !t.is_empty())
    }
}

/// A note placed on the absolute timeline of a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedNote {
    pub bar: usize,
    pub track_id: u8,
    pub instrument_id: u8,
    pub pitch: u8,
    pub start: u32,
    pub duration: u32,
}

impl PlacedNote {
    pub fn end(&self) -> u32 {
        self.start + self.duration
    }

    pub fn sounds_at(&self, t: u32) -> bool {
        self.start <= t && t < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub bars: Vec<Bar>,
    pub bpm: f64,
}

impl Default for Score {
    fn default() -> Self {
        Self {
            bars: Vec::new(),
            bpm: DEFAULT_BPM,
        }
    }
}

impl Score {
    pub fn new(bars: Vec<Bar>) -> Self {
        Self {
            bars,
            bpm: DEFAULT_BPM,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    /// Absolute start of every bar, in grid units.
    pub fn bar_starts(&self) -> Vec<u32> {
        let mut acc = 0;
        self.bars
            .iter()
            .map(|b| {
                let s = acc;
                acc += b.bar_length;
                s
            })
            .collect()
    }

    /// Sum of bar lengths.
    pub fn total_length(&self) -> u32 {
        self.bars.iter().map(|b| b.bar_length).sum()
    }

    /// Every note on the absolute timeline, in bar then track order.
    pub fn placed_notes(&self) -> Vec<PlacedNote> {
        let starts = self.bar_starts();
        let mut out = Vec::new();
        for (bi, bar) in self.bars.iter().enumerate() {
            for tb in &bar.tracks {
                for n in &tb.events {
                    out.push(PlacedNote {
                        bar: bi,
                        track_id: tb.track_id,
                        instrument_id: tb.instrument_id,
                        pitch: n.pitch,
                        start: starts[bi] + n.onset,
                        duration: n.duration,
                    });
                }
            }
        }
        out
    }

    pub fn note_count(&self) -> usize {
        self.bars
            .iter()
            .flat_map(|b| b.tracks.iter())
            .map(|t| t.events.len())
            .sum()
    }

    /// Checks every structural invariant of the score.
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.bpm.is_finite() && self.bpm > 0.0) {
            return Err(ScoreError::Tempo(self.bpm));
        }
        for (bi, bar) in self.bars.iter().enumerate() {
            if !(MIN_BAR_LENGTH..=MAX_BAR_LENGTH).contains(&bar.bar_length) {
                return Err(ScoreError::BarLength {
                    bar: bi,
                    length: bar.bar_length,
                });
            }
            if bar.tracks.len() > MAX_TRACKS {
                return Err(ScoreError::TooManyTracks {
                    bar: bi,
                    count: bar.tracks.len(),
                });
            }
            let mut seen = [false; 256];
            for tb in &bar.tracks {
                if seen[tb.track_id as usize] {
                    return Err(ScoreError::DuplicateTrack {
                        bar: bi,
                        track_id: tb.track_id,
                    });
                }
                seen[tb.track_id as usize] = true;
                tb.validate(bi, bar.bar_length)?;
            }
        }
        Ok(())
    }

    /// Splits the score into consecutive windows of at most `max_bars` bars.
    pub fn windows(&self, max_bars: usize) -> Vec<Score> {
        assert!(max_bars > 0, "window size must be positive");
        self.bars
            .chunks(max_bars)
            .map(|c| Score {
                bars: c.to_vec(),
                bpm: self.bpm,
            })
            .collect()
    }
}

/// Builds a bar length from a time signature, if it lands on the grid and in range.
pub fn bar_length_for(numerator: u32, denominator: u32) -> Option<u32> {
    if denominator == 0 || 32 % denominator != 0 {
        return None;
    }
    let len = numerator * (32 / denominator);
    (MIN_BAR_LENGTH..=MAX_BAR_LENGTH).contains(&len).then_some(len)
}
