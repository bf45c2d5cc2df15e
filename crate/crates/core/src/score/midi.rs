//! Standard MIDI File ingestion and emission.
//!
//! Reading accepts format 0 and 1 at any PPQ. Writing produces format 1 at
//! 480 PPQ (60 ticks per grid unit), one MIDI track per distinct
//! `(track_id, instrument_id)` pair. Each emitted track is named
//! `harmorch track <id>` so that a re-read recovers the original track id.

use super::{bar_length_for, Bar, NoteEvent, Score, TrackBar, MAX_DURATION, MAX_TRACKS};
use std::collections::BTreeMap;
use thiserror::Error;

pub const WRITE_PPQ: u16 = 480;
const TICKS_PER_GRID: u32 = WRITE_PPQ as u32 / 8;
const DRUM_CHANNEL: u8 = 9;
const DEFAULT_VELOCITY: u8 = 80;
const TRACK_NAME_PREFIX: &str = "harmorch track ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("bar {bar}: more than {MAX_TRACKS} distinct tracks")]
    Capacity { bar: usize },
}

fn perr(offset: usize, message: impl Into<String>) -> MidiError {
    MidiError::Parse {
        offset,
        message: message.into(),
    }
}

/// Rounds a tick count to the nearest 32nd-note grid point, ties toward the earlier point.
pub fn ticks_to_grid(ticks: u64, ppq: u16) -> u64 {
    // ceil(8t/ppq - 1/2) = ceil((16t - ppq) / 2ppq)
    let num = 16 * ticks as i128 - ppq as i128;
    let den = 2 * ppq as i128;
    let q = -((-num).div_euclid(den));
    q.max(0) as u64
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| perr(self.pos, "unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(perr(self.pos, format!("need {n} bytes, data ends")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(perr(start, "variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Identity {
    Named { id: u8, program: u8 },
    Channel { channel: u8, program: u8 },
}

impl Identity {
    fn program(&self) -> u8 {
        match *self {
            Identity::Named { program, .. } | Identity::Channel { program, .. } => program,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    identity: Identity,
    pitch: u8,
    start: u64,
    end: u64,
}

#[derive(Default)]
struct ChunkData {
    name: Option<String>,
    notes: Vec<(u8, u8, u64, u64, u8)>, // channel, pitch, start, end, program
    time_sigs: Vec<(u64, u32, u32, usize)>,
    tempo: Option<(u64, u32)>,
    end_tick: u64,
}

fn parse_chunk(data: &[u8], start: usize, len: usize) -> Result<ChunkData, MidiError> {
    let mut r = Reader {
        data: &data[..start + len],
        pos: start,
    };
    let mut out = ChunkData::default();
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    // FIFO of pending note-ons per (channel, pitch)
    let mut pending: BTreeMap<(u8, u8), Vec<(u64, u8)>> = BTreeMap::new();

    while r.pos < start + len {
        tick += r.vlq()? as u64;
        let status_pos = r.pos;
        let mut status = r.u8()?;
        let first_data = if status < 0x80 {
            let rs = running.ok_or_else(|| perr(status_pos, "data byte without running status"))?;
            let d = status;
            status = rs;
            Some(d)
        } else {
            None
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let n = r.vlq()? as usize;
                let payload_pos = r.pos;
                let payload = r.bytes(n)?;
                match kind {
                    0x03 => out.name = Some(String::from_utf8_lossy(payload).into_owned()),
                    0x51 if n == 3 => {
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if out.tempo.is_none() {
                            out.tempo = Some((tick, us));
                        }
                    }
                    0x58 if n >= 2 => {
                        let num = payload[0] as u32;
                        let den = 1u32.checked_shl(payload[1] as u32).unwrap_or(0);
                        out.time_sigs.push((tick, num, den, payload_pos));
                    }
                    0x2f => {
                        out.end_tick = tick;
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let n = r.vlq()? as usize;
                r.bytes(n)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let kind = status & 0xf0;
                let mut first = first_data;
                let mut take = |r: &mut Reader| -> Result<u8, MidiError> {
                    match first.take() {
                        Some(d) => Ok(d),
                        None => r.u8(),
                    }
                };
                match kind {
                    0x80 | 0x90 => {
                        let pitch = take(&mut r)?;
                        let vel = take(&mut r)?;
                        if pitch > 127 || vel > 127 {
                            return Err(perr(status_pos, "data byte above 127"));
                        }
                        if kind == 0x90 && vel > 0 {
                            pending
                                .entry((channel, pitch))
                                .or_default()
                                .push((tick, programs[channel as usize]));
                        } else if let Some(q) = pending.get_mut(&(channel, pitch)) {
                            if !q.is_empty() {
                                let (on, prog) = q.remove(0);
                                out.notes.push((channel, pitch, on, tick, prog));
                            }
                        }
                    }
                    0xc0 => {
                        let p = take(&mut r)?;
                        if p > 127 {
                            return Err(perr(status_pos, "program above 127"));
                        }
                        programs[channel as usize] = p;
                    }
                    0xd0 => {
                        take(&mut r)?;
                    }
                    _ => {
                        take(&mut r)?;
                        take(&mut r)?;
                    }
                }
            }
            _ => return Err(perr(status_pos, format!("unsupported status byte {status:#04x}"))),
        }
    }
    if out.end_tick < tick {
        out.end_tick = tick;
    }
    // Notes still sounding at end of track are closed there.
    for ((channel, pitch), q) in pending {
        for (on, prog) in q {
            out.notes.push((channel, pitch, on, out.end_tick.max(on), prog));
        }
    }
    Ok(out)
}

fn named_track_id(name: &str) -> Option<u8> {
    name.strip_prefix(TRACK_NAME_PREFIX)?
        .trim()
        .parse::<u8>()
        .ok()
        .filter(|&id| (id as usize) < MAX_TRACKS)
}

/// Parses a Standard MIDI File (format 0 or 1) into a quantized score.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.bytes(4).map_err(|_| perr(0, "missing MThd header"))? != b"MThd" {
        return Err(perr(0, "missing MThd header"));
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return Err(perr(4, format!("header length {hlen} < 6")));
    }
    let format = r.u16()?;
    let ntrks = r.u16()?;
    let division_pos = r.pos;
    let division = r.u16()?;
    r.pos = 8 + hlen;
    if format > 1 {
        return Err(perr(8, format!("unsupported SMF format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(perr(division_pos, "SMPTE or zero division is not supported"));
    }
    let ppq = division;

    let mut chunks = Vec::new();
    while chunks.len() < ntrks as usize {
        let chunk_pos = r.pos;
        if r.pos >= bytes.len() {
            return Err(perr(chunk_pos, format!("expected {ntrks} tracks, found {}", chunks.len())));
        }
        let tag = r.bytes(4)?;
        let len = r.u32()? as usize;
        if r.pos + len > bytes.len() {
            return Err(perr(chunk_pos, "chunk length runs past end of file"));
        }
        if tag == b"MTrk" {
            chunks.push(parse_chunk(bytes, r.pos, len)?);
        }
        r.pos += len;
    }

    let bpm = chunks
        .iter()
        .filter_map(|c| c.tempo)
        .min_by_key(|(t, _)| *t)
        .map(|(_, us)| 60_000_000.0 / us.max(1) as f64)
        .unwrap_or(super::DEFAULT_BPM);

    // Collect notes with identities, dropping percussion.
    let mut raw: Vec<RawNote> = Vec::new();
    for chunk in &chunks {
        let named = chunk.name.as_deref().and_then(named_track_id);
        for &(channel, pitch, start, end, program) in &chunk.notes {
            if channel == DRUM_CHANNEL {
                continue;
            }
            let identity = match named {
                Some(id) => Identity::Named { id, program },
                None => Identity::Channel { channel, program },
            };
            raw.push(RawNote {
                identity,
                pitch,
                start,
                end,
            });
        }
    }

    // Quantize, then merge overlapping same-pitch notes per identity.
    let mut by_key: BTreeMap<(Identity, u8), Vec<(u64, u64)>> = BTreeMap::new();
    for n in &raw {
        let onset = ticks_to_grid(n.start, ppq);
        let dur = ticks_to_grid(n.end - n.start, ppq).clamp(1, MAX_DURATION as u64);
        by_key
            .entry((n.identity, n.pitch))
            .or_default()
            .push((onset, onset + dur));
    }
    let mut notes: Vec<(Identity, u8, u64, u64)> = Vec::new();
    for ((identity, pitch), mut spans) in by_key {
        spans.sort();
        let mut cur: Option<(u64, u64)> = None;
        for (s, e) in spans {
            match cur {
                Some((cs, ce)) if s < ce => cur = Some((cs, ce.max(e))),
                Some(c) => {
                    notes.push((identity, pitch, c.0, c.1));
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some(c) = cur {
            notes.push((identity, pitch, c.0, c.1));
        }
    }
    notes.sort_by_key(|&(id, p, s, e)| (s, id, p, e));

    // Bar grid from time signatures.
    let conductor_end = chunks
        .first()
        .map(|c| ticks_to_grid(c.end_tick, ppq))
        .unwrap_or(0);
    let extent = notes
        .iter()
        .map(|n| n.2 + 1)
        .max()
        .unwrap_or(0)
        .max(conductor_end);
    let mut sigs: Vec<(u64, u32, usize)> = Vec::new();
    for chunk in &chunks {
        for &(tick, num, den, pos) in &chunk.time_sigs {
            let len = bar_length_for(num, den)
                .ok_or_else(|| perr(pos, format!("unsupported time signature {num}/{den}")))?;
            sigs.push((ticks_to_grid(tick, ppq), len, pos));
        }
    }
    sigs.sort_by_key(|s| (s.0, s.2));
    let mut bar_spans: Vec<(u64, u32)> = Vec::new();
    let mut pos = 0u64;
    let mut len = 32u32;
    let mut si = 0;
    while pos < extent {
        while si < sigs.len() && sigs[si].0 <= pos {
            len = sigs[si].1;
            si += 1;
        }
        let mut this_len = len as u64;
        if si < sigs.len() && sigs[si].0 < pos + this_len {
            this_len = sigs[si].0 - pos;
        }
        bar_spans.push((pos, this_len as u32));
        pos += this_len;
    }

    // Track id assignment: named identities keep their id, others take the
    // lowest free ids in order of first appearance.
    let mut used = [false; MAX_TRACKS];
    for n in &notes {
        if let Identity::Named { id, .. } = n.0 {
            used[id as usize] = true;
        }
    }
    let mut assigned: BTreeMap<Identity, u8> = BTreeMap::new();
    let bar_of = |t: u64| -> usize { bar_spans.partition_point(|&(s, _)| s <= t) - 1 };
    let mut bars: Vec<Bar> = bar_spans.iter().map(|&(_, l)| Bar::new(l)).collect();
    let mut cells: Vec<BTreeMap<u8, (u8, Vec<NoteEvent>)>> = vec![BTreeMap::new(); bars.len()];
    for &(identity, pitch, start, end) in &notes {
        let bi = bar_of(start);
        let tid = match identity {
            Identity::Named { id, .. } => id,
            Identity::Channel { .. } => match assigned.get(&identity) {
                Some(&t) => t,
                None => {
                    let free = used.iter().position(|u| !u);
                    let Some(free) = free else {
                        return Err(MidiError::Capacity { bar: bi });
                    };
                    used[free] = true;
                    assigned.insert(identity, free as u8);
                    free as u8
                }
            },
        };
        let onset = (start - bar_spans[bi].0) as u32;
        let dur = ((end - start) as u32).min(MAX_DURATION);
        let cell = cells[bi]
            .entry(tid)
            .or_insert_with(|| (identity.program(), Vec::new()));
        cell.1.push(NoteEvent::new(pitch, onset, dur));
    }
    for (bar, cell) in bars.iter_mut().zip(cells) {
        bar.tracks = cell
            .into_iter()
            .map(|(tid, (prog, ev))| TrackBar::new(tid, prog, ev))
            .collect();
    }
    Ok(Score { bars, bpm })
}

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len();
    i -= 1;
    buf[i] = (v & 0x7f) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = 0x80 | (v & 0x7f) as u8;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn push_chunk(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Splits a bar length into a (numerator, log2 denominator) time signature.
fn time_signature(len: u32) -> (u8, u8) {
    if len % 8 == 0 {
        ((len / 8) as u8, 2)
    } else if len % 4 == 0 {
        ((len / 4) as u8, 3)
    } else if len % 2 == 0 {
        ((len / 2) as u8, 4)
    } else {
        (len as u8, 5)
    }
}

fn channel_for(track_id: u8) -> u8 {
    let c = track_id % 15;
    if c >= DRUM_CHANNEL {
        c + 1
    } else {
        c
    }
}

/// Emits a score as a format-1 SMF at 480 PPQ.
pub fn write_midi(score: &Score) -> Vec<u8> {
    let starts = score.bar_starts();
    let mut parts: BTreeMap<(u8, u8), Vec<(u32, u32, u8)>> = BTreeMap::new();
    for (bi, bar) in score.bars.iter().enumerate() {
        for tb in &bar.tracks {
            let part = parts.entry((tb.track_id, tb.instrument_id)).or_default();
            for n in &tb.events {
                part.push((starts[bi] + n.onset, n.duration, n.pitch));
            }
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&((parts.len() + 1) as u16).to_be_bytes());
    out.extend_from_slice(&WRITE_PPQ.to_be_bytes());

    // Conductor track: tempo, time signatures, end marker at score end.
    let mut body = Vec::new();
    let us = (60_000_000.0 / score.bpm).round().clamp(1.0, 0xff_ffff as f64) as u32;
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x51, 0x03]);
    body.extend_from_slice(&us.to_be_bytes()[1..]);
    let mut last_tick = 0u32;
    let mut last_len = None;
    for (bi, bar) in score.bars.iter().enumerate() {
        if last_len != Some(bar.bar_length) {
            let tick = starts[bi] * TICKS_PER_GRID;
            let (num, den) = time_signature(bar.bar_length);
            push_vlq(&mut body, tick - last_tick);
            body.extend_from_slice(&[0xff, 0x58, 0x04, num, den, 24, 8]);
            last_tick = tick;
            last_len = Some(bar.bar_length);
        }
    }
    push_vlq(&mut body, score.total_length() * TICKS_PER_GRID - last_tick);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    push_chunk(&mut out, &body);

    for ((track_id, instrument), notes) in parts {
        let ch = channel_for(track_id);
        let mut events: Vec<(u32, u8, u8)> = Vec::with_capacity(notes.len() * 2);
        for (start, dur, pitch) in notes {
            events.push((start * TICKS_PER_GRID, 0, pitch));
            events.push(((start + dur) * TICKS_PER_GRID, 1, pitch));
        }
        // note-offs precede note-ons at the same tick
        events.sort_by_key(|&(t, kind, p)| (t, 1 - kind, p));
        let mut body = Vec::new();
        let name = format!("{TRACK_NAME_PREFIX}{track_id}");
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x03]);
        push_vlq(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xc0 | ch, instrument & 0x7f]);
        let mut last = 0u32;
        for (t, kind, pitch) in events {
            push_vlq(&mut body, t - last);
            last = t;
            if kind == 0 {
                body.extend_from_slice(&[0x90 | ch, pitch, DEFAULT_VELOCITY]);
            } else {
                body.extend_from_slice(&[0x80 | ch, pitch, 0]);
            }
        }
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);
        push_chunk(&mut out, &body);
    }
    out
}
