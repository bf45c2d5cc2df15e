//! Compressed REMI encoding of one (bar, track) cell.
//!
//! Three compressions are applied on top of a plain REMI stream:
//! notes sharing an onset share one `Pos` token and notes sharing an onset and
//! duration share one `Dur` token; the bar-start `Pos:0` is implicit; and a
//! duration sub-group that ends exactly where the next position group starts is
//! written as `Legato:d`, which also stands in for the next `Pos` token.
//!
//! Emission order inside a position group is `[Pos] (Dur|Legato Pitch+)+` with
//! duration sub-groups ascending, except that the fused sub-group goes last.

use crate::score::{NoteEvent, ScoreError, TrackBar, MAX_DURATION};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Pitch(u8),
    Pos(u8),
    Dur(u8),
    Legato(u8),
    Eot,
}

pub const PITCH_BASE: usize = 0;
pub const POS_BASE: usize = 128;
pub const DUR_BASE: usize = 256;
pub const LEGATO_BASE: usize = 384;
pub const EOT_ID: usize = 512;
/// Number of distinct token ids.
pub const VOCAB_SIZE: usize = 513;

impl Token {
    /// Stable integer id in `0..VOCAB_SIZE`.
    pub fn id(self) -> usize {
        match self {
            Token::Pitch(p) => PITCH_BASE + p as usize,
            Token::Pos(p) => POS_BASE + p as usize,
            Token::Dur(d) => DUR_BASE + d as usize - 1,
            Token::Legato(d) => LEGATO_BASE + d as usize - 1,
            Token::Eot => EOT_ID,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Some(match id {
            0..=127 => Token::Pitch(id as u8),
            128..=255 => Token::Pos((id - POS_BASE) as u8),
            256..=383 => Token::Dur((id - DUR_BASE + 1) as u8),
            384..=511 => Token::Legato((id - LEGATO_BASE + 1) as u8),
            EOT_ID => Token::Eot,
            _ => return None,
        })
    }

    pub fn is_pitch(self) -> bool {
        matches!(self, Token::Pitch(_))
    }

    fn kind_code(self) -> u8 {
        match self {
            Token::Pitch(_) => 0,
            Token::Pos(_) => 1,
            Token::Dur(_) => 2,
            Token::Legato(_) => 3,
            Token::Eot => 4,
        }
    }

    fn value(self) -> u8 {
        match self {
            Token::Pitch(v) | Token::Pos(v) | Token::Dur(v) | Token::Legato(v) => v,
            Token::Eot => 0,
        }
    }

    fn from_parts(kind: u8, value: u8) -> Option<Token> {
        let t = match kind {
            0 if value < 128 => Token::Pitch(value),
            1 if value < 128 => Token::Pos(value),
            2 if (1..=MAX_DURATION as u8).contains(&value) => Token::Dur(value),
            3 if (1..=MAX_DURATION as u8).contains(&value) => Token::Legato(value),
            4 => Token::Eot,
            _ => return None,
        };
        Some(t)
    }
}

/// Length limit of a token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    /// Music cells: at most 32 tokens.
    Music,
    /// Harmony cells: at most 64 tokens.
    Harmony,
    Custom(usize),
}

impl Capacity {
    pub fn limit(self) -> usize {
        match self {
            Capacity::Music => 32,
            Capacity::Harmony => 64,
            Capacity::Custom(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub capacity: Capacity,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id()).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizeError {
    #[error("{len} tokens exceed the capacity of {limit}")]
    Overflow {
        len: usize,
        limit: usize,
        full: Vec<Token>,
    },
    #[error(transparent)]
    Invalid(#[from] ScoreError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("token {index}: {reason}")]
pub struct DecodeError {
    pub index: usize,
    pub reason: &'static str,
}

struct PositionGroup {
    pos: u32,
    // duration -> ascending pitches
    subs: BTreeMap<u32, Vec<u8>>,
}

fn position_groups(events: &[NoteEvent]) -> Vec<PositionGroup> {
    let mut groups: Vec<PositionGroup> = Vec::new();
    for n in events {
        match groups.last_mut() {
            Some(g) if g.pos == n.onset => g.subs.entry(n.duration).or_default().push(n.pitch),
            _ => {
                let mut subs = BTreeMap::new();
                subs.insert(n.duration, vec![n.pitch]);
                groups.push(PositionGroup { pos: n.onset, subs });
            }
        }
    }
    for g in &mut groups {
        for pitches in g.subs.values_mut() {
            pitches.sort_unstable();
        }
    }
    groups
}

fn encode_events(events: &[NoteEvent]) -> Vec<Token> {
    let groups = position_groups(events);
    let mut out = Vec::new();
    let mut implied = false;
    for (gi, g) in groups.iter().enumerate() {
        let fused = groups
            .get(gi + 1)
            .map(|next| next.pos - g.pos)
            .filter(|d| g.subs.contains_key(d));
        if !(implied || (gi == 0 && g.pos == 0)) {
            out.push(Token::Pos(g.pos as u8));
        }
        for (&d, pitches) in g.subs.iter().filter(|(&d, _)| Some(d) != fused) {
            out.push(Token::Dur(d as u8));
            out.extend(pitches.iter().map(|&p| Token::Pitch(p)));
        }
        if let Some(d) = fused {
            out.push(Token::Legato(d as u8));
            out.extend(g.subs[&d].iter().map(|&p| Token::Pitch(p)));
        }
        implied = fused.is_some();
    }
    out.push(Token::Eot);
    out
}

/// Encodes one track bar. Overflow returns the full stream inside the error.
pub fn encode(
    track_bar: &TrackBar,
    bar_length: u32,
    capacity: Capacity,
) -> Result<TokenSequence, TokenizeError> {
    track_bar.validate(0, bar_length)?;
    let tokens = encode_events(&track_bar.events);
    if tokens.len() > capacity.limit() {
        return Err(TokenizeError::Overflow {
            len: tokens.len(),
            limit: capacity.limit(),
            full: tokens,
        });
    }
    Ok(TokenSequence { tokens, capacity })
}

/// Encodes, dropping trailing whole position groups until the stream fits.
/// Returns the sequence and the number of notes dropped.
pub fn encode_truncated(
    track_bar: &TrackBar,
    bar_length: u32,
    capacity: Capacity,
) -> Result<(TokenSequence, usize), TokenizeError> {
    track_bar.validate(0, bar_length)?;
    let mut events = track_bar.events.clone();
    loop {
        let tokens = encode_events(&events);
        if tokens.len() <= capacity.limit() {
            let dropped = track_bar.events.len() - events.len();
            return Ok((TokenSequence { tokens, capacity }, dropped));
        }
        let last = events.last().map(|n| n.onset).unwrap_or(0);
        // Nothing left to drop; [EOT] alone does not fit.
        if events.is_empty() {
            return Err(TokenizeError::Overflow {
                len: tokens.len(),
                limit: capacity.limit(),
                full: tokens,
            });
        }
        events.retain(|n| n.onset != last);
    }
}

/// Plain REMI: one `[Pos][Dur][Pitch]` triple per note, then `EOT`.
pub fn naive_remi(track_bar: &TrackBar) -> Vec<Token> {
    let mut out = Vec::with_capacity(track_bar.events.len() * 3 + 1);
    for n in &track_bar.events {
        out.push(Token::Pos(n.onset as u8));
        out.push(Token::Dur(n.duration as u8));
        out.push(Token::Pitch(n.pitch));
    }
    out.push(Token::Eot);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SubGroup {
    duration: u32,
    legato: bool,
    pitches: usize,
}

/// Incremental validator for the compressed grammar. Used by [`decode`] and by
/// samplers that must reject ill-formed continuations.
#[derive(Debug, Clone)]
pub struct Grammar {
    bar_length: u32,
    group_pos: u32,
    any_group: bool,
    awaiting_sub: bool,
    sub: Option<SubGroup>,
    finished: bool,
    notes: Vec<NoteEvent>,
}

impl Grammar {
    pub fn new(bar_length: u32) -> Self {
        Self {
            bar_length,
            group_pos: 0,
            any_group: false,
            awaiting_sub: false,
            sub: None,
            finished: false,
            notes: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Onset the next pitch or sub-group would land on.
    pub fn pending_onset(&self) -> u32 {
        match self.sub {
            Some(SubGroup {
                legato: true,
                duration,
                pitches,
            }) if pitches > 0 => self.group_pos + duration,
            _ => self.group_pos,
        }
    }

    /// Duration the next pitch would take, if a sub-group is open.
    pub fn pending_duration(&self) -> Option<u32> {
        self.sub.map(|s| s.duration)
    }

    /// Notes decoded so far.
    pub fn notes(&self) -> &[NoteEvent] {
        &self.notes
    }

    /// Fewest further tokens, EOT included, that can end the stream validly.
    pub fn min_to_close(&self) -> usize {
        if self.finished {
            return 0;
        }
        if self.awaiting_sub {
            return 3;
        }
        match self.sub {
            Some(SubGroup { legato: true, pitches: 0, .. }) => 4,
            Some(SubGroup { pitches: 0, .. }) => 2,
            Some(SubGroup { legato: true, .. }) => 3,
            _ => 1,
        }
    }

    /// Checks a token without consuming it.
    pub fn check(&self, token: Token) -> Result<(), &'static str> {
        self.clone().push(token)
    }

    pub fn accepts(&self, token: Token) -> bool {
        self.check(token).is_ok()
    }

    pub fn push(&mut self, token: Token) -> Result<(), &'static str> {
        if self.finished {
            return Err("token after EOT");
        }
        let sub_closed = self.sub.map_or(true, |s| s.pitches > 0);
        let legato_open = matches!(self.sub, Some(s) if s.legato && s.pitches > 0);
        match token {
            Token::Pos(p) => {
                let p = p as u32;
                if self.awaiting_sub {
                    return Err("position group without notes");
                }
                if !sub_closed {
                    return Err("duration without pitches");
                }
                if legato_open {
                    return Err("position after legato");
                }
                if p >= self.bar_length {
                    return Err("position at or past bar end");
                }
                if self.any_group && p <= self.group_pos {
                    return Err("position regression");
                }
                self.group_pos = p;
                self.any_group = true;
                self.awaiting_sub = true;
                self.sub = None;
            }
            Token::Dur(d) | Token::Legato(d) => {
                let d = d as u32;
                let legato = matches!(token, Token::Legato(_));
                if d == 0 || d > MAX_DURATION {
                    return Err("duration out of range");
                }
                if !sub_closed {
                    return Err("duration without pitches");
                }
                if legato_open {
                    self.group_pos += self.sub.map(|s| s.duration).unwrap_or(0);
                }
                if legato && self.group_pos + d >= self.bar_length {
                    return Err("legato advances past bar end");
                }
                self.any_group = true;
                self.awaiting_sub = false;
                self.sub = Some(SubGroup {
                    duration: d,
                    legato,
                    pitches: 0,
                });
            }
            Token::Pitch(p) => {
                let Some(sub) = self.sub.as_mut() else {
                    return Err("pitch before any duration");
                };
                if p > 127 {
                    return Err("pitch out of range");
                }
                let note = NoteEvent::new(p, self.group_pos, sub.duration);
                if self.notes.contains(&note) {
                    return Err("duplicate note");
                }
                sub.pitches += 1;
                self.notes.push(note);
            }
            Token::Eot => {
                if self.awaiting_sub {
                    return Err("position group without notes");
                }
                if !sub_closed {
                    return Err("duration without pitches");
                }
                if legato_open {
                    return Err("legato with no following group");
                }
                self.finished = true;
            }
        }
        Ok(())
    }
}

/// Decodes a stream back into canonical, sorted note events.
pub fn decode(tokens: &[Token], bar_length: u32) -> Result<Vec<NoteEvent>, DecodeError> {
    let mut g = Grammar::new(bar_length);
    for (index, &t) in tokens.iter().enumerate() {
        g.push(t).map_err(|reason| DecodeError { index, reason })?;
    }
    if !g.finished {
        return Err(DecodeError {
            index: tokens.len(),
            reason: "missing EOT",
        });
    }
    let mut notes = g.notes;
    notes.sort();
    Ok(notes)
}

/// Decodes into a track bar carrying the given metadata.
pub fn decode_track_bar(
    tokens: &[Token],
    bar_length: u32,
    track_id: u8,
    instrument_id: u8,
) -> Result<TrackBar, DecodeError> {
    Ok(TrackBar::new(track_id, instrument_id, decode(tokens, bar_length)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Pitch,
    Pos,
    Dur,
    Legato,
    Eot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenJson {
    pub k: TokenKind,
    pub v: u8,
}

impl From<Token> for TokenJson {
    fn from(t: Token) -> Self {
        let k = match t {
            Token::Pitch(_) => TokenKind::Pitch,
            Token::Pos(_) => TokenKind::Pos,
            Token::Dur(_) => TokenKind::Dur,
            Token::Legato(_) => TokenKind::Legato,
            Token::Eot => TokenKind::Eot,
        };
        TokenJson { k, v: t.value() }
    }
}

impl TryFrom<TokenJson> for Token {
    type Error = String;

    fn try_from(j: TokenJson) -> Result<Self, String> {
        let code = match j.k {
            TokenKind::Pitch => 0,
            TokenKind::Pos => 1,
            TokenKind::Dur => 2,
            TokenKind::Legato => 3,
            TokenKind::Eot => 4,
        };
        Token::from_parts(code, j.v).ok_or_else(|| format!("invalid token {:?}:{}", j.k, j.v))
    }
}

pub fn to_json(tokens: &[Token]) -> Vec<TokenJson> {
    tokens.iter().map(|&t| t.into()).collect()
}

pub fn from_json(items: &[TokenJson]) -> Result<Vec<Token>, String> {
    items.iter().map(|&j| Token::try_from(j)).collect()
}

/// Compact fixture form: one kind byte and one value byte per token.
pub fn to_bytes(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().flat_map(|t| [t.kind_code(), t.value()]).collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Token>, DecodeError> {
    if bytes.len() % 2 != 0 {
        return Err(DecodeError {
            index: bytes.len() / 2,
            reason: "odd byte count",
        });
    }
    bytes
        .chunks_exact(2)
        .enumerate()
        .map(|(index, c)| {
            Token::from_parts(c[0], c[1]).ok_or(DecodeError {
                index,
                reason: "invalid kind or value",
            })
        })
        .collect()
}
