//! Beat-wise harmony skeleton analysis.
//!
//! Each quarter-note beat gets the chord template whose binary pitch-class
//! pattern has the highest cosine similarity with the beat's duration-weighted
//! pitch-class histogram. On top of the template, the largest set of sounding
//! pitch classes that adds no new minor or major second becomes the beat's
//! extensions. Sounding pitches in the allowed set, stretched to the beat, form
//! the skeleton tones.

use crate::score::{Bar, NoteEvent, Score, TrackBar, GRID_PER_QUARTER};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Grid units per skeleton beat.
pub const BEAT_LEN: u32 = GRID_PER_QUARTER;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarmonyError {
    #[error("beat {beat} outside 0..{count}")]
    BeatOutOfRange { beat: usize, count: usize },
    #[error("skeletons have {reference} and {generated} beats")]
    ShapeMismatch { reference: usize, generated: usize },
    #[error("invalid skeleton: {0}")]
    Invalid(String),
}

/// Set of pitch classes as a 12-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct PcSet(pub u16);

impl PcSet {
    pub const EMPTY: PcSet = PcSet(0);

    pub fn from_pcs(pcs: impl IntoIterator<Item = u8>) -> Self {
        PcSet(pcs.into_iter().fold(0u16, |m, pc| m | 1 << (pc % 12)))
    }

    pub fn contains(self, pc: u8) -> bool {
        self.0 >> (pc % 12) & 1 == 1
    }

    pub fn insert(&mut self, pc: u8) {
        self.0 |= 1 << (pc % 12);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, o: PcSet) -> PcSet {
        PcSet(self.0 | o.0)
    }

    pub fn intersection(self, o: PcSet) -> PcSet {
        PcSet(self.0 & o.0)
    }

    pub fn difference(self, o: PcSet) -> PcSet {
        PcSet(self.0 & !o.0)
    }

    /// Ascending pitch classes.
    pub fn iter(self) -> impl Iterator<Item = u8> {
        (0..12u8).filter(move |&pc| self.contains(pc))
    }

    pub fn to_vec(self) -> Vec<u8> {
        self.iter().collect()
    }
}

/// Interval class between two pitch classes (0..=6).
pub fn interval_class(a: u8, b: u8) -> u8 {
    let d = (a as i16 - b as i16).rem_euclid(12) as u8;
    d.min(12 - d)
}

/// Pitch classes a minor or major second away from `pc`.
fn second_neighbors(pc: u8) -> PcSet {
    PcSet::from_pcs([(pc + 1) % 12, (pc + 2) % 12, (pc + 10) % 12, (pc + 11) % 12])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Maj,
    Min,
    Dim,
    Aug,
    Maj7,
    Min7,
    Dom7,
    Halfdim7,
    Dim7,
}

impl Quality {
    pub const ALL: [Quality; 9] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dim,
        Quality::Aug,
        Quality::Maj7,
        Quality::Min7,
        Quality::Dom7,
        Quality::Halfdim7,
        Quality::Dim7,
    ];

    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Halfdim7 => &[0, 3, 6, 10],
            Quality::Dim7 => &[0, 3, 6, 9],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
            Quality::Dom7 => "dom7",
            Quality::Halfdim7 => "halfdim7",
            Quality::Dim7 => "dim7",
        }
    }

    pub fn from_name(s: &str) -> Option<Quality> {
        Quality::ALL.into_iter().find(|q| q.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChordTemplate {
    pub root: u8,
    pub quality: Quality,
}

impl ChordTemplate {
    pub fn new(root: u8, quality: Quality) -> Self {
        Self {
            root: root % 12,
            quality,
        }
    }

    pub fn pcs(&self) -> PcSet {
        PcSet::from_pcs(self.quality.intervals().iter().map(|i| (self.root + i) % 12))
    }

    /// All 108 templates, root-major then quality order.
    pub fn all() -> impl Iterator<Item = ChordTemplate> {
        (0..12u8).flat_map(|r| Quality::ALL.into_iter().map(move |q| ChordTemplate::new(r, q)))
    }
}

impl fmt::Display for ChordTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];
        write!(f, "{}{}", NAMES[self.root as usize], self.quality.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarmonyBeat {
    pub beat_index: usize,
    /// `None` only before the first sounding beat.
    pub template: Option<ChordTemplate>,
    pub extensions: PcSet,
    /// Sounding pitches, ascending, each held for the whole beat.
    pub tones: Vec<u8>,
}

impl HarmonyBeat {
    /// Template pitch classes plus extensions.
    pub fn allowed(&self) -> PcSet {
        self.template
            .map(|t| t.pcs())
            .unwrap_or_default()
            .union(self.extensions)
    }

    pub fn tone_pcs(&self) -> PcSet {
        PcSet::from_pcs(self.tones.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HarmonySkeleton {
    pub beats: Vec<HarmonyBeat>,
    /// Bar layout the skeleton was taken from; empty means 4/4 throughout.
    pub bar_lengths: Vec<u32>,
}

impl HarmonySkeleton {
    pub fn len(&self) -> usize {
        self.beats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beats.is_empty()
    }

    /// Bar lengths, falling back to 4/4 bars covering every beat.
    pub fn bar_layout(&self) -> Vec<u32> {
        if !self.bar_lengths.is_empty() {
            return self.bar_lengths.clone();
        }
        vec![4 * BEAT_LEN; self.beats.len().div_ceil(4)]
    }

    pub fn bar_count(&self) -> usize {
        self.bar_layout().len()
    }

    /// Beat containing absolute grid time `t`.
    pub fn beat_at(&self, t: u32) -> Option<&HarmonyBeat> {
        self.beats.get((t / BEAT_LEN) as usize)
    }

    /// Checks the structural invariants of every beat.
    pub fn validate(&self) -> Result<(), HarmonyError> {
        for (i, b) in self.beats.iter().enumerate() {
            if b.beat_index != i {
                return Err(HarmonyError::Invalid(format!("beat {i} carries index {}", b.beat_index)));
            }
            let tpcs = b.template.map(|t| t.pcs()).unwrap_or_default();
            if !b.extensions.intersection(tpcs).is_empty() {
                return Err(HarmonyError::Invalid(format!("beat {i}: extension repeats a chord tone")));
            }
            if !extensions_are_clear(b.extensions, tpcs) {
                return Err(HarmonyError::Invalid(format!("beat {i}: extension forms a second")));
            }
            let allowed = b.allowed();
            if b.tones.iter().any(|&p| !allowed.contains(p) || p > 127) {
                return Err(HarmonyError::Invalid(format!("beat {i}: tone outside the allowed set")));
            }
        }
        Ok(())
    }
}

fn extensions_are_clear(ext: PcSet, template: PcSet) -> bool {
    let all = ext.union(template);
    ext.iter()
        .all(|e| second_neighbors(e).intersection(all).is_empty())
}

fn beat_count(score: &Score) -> usize {
    score.total_length().div_ceil(BEAT_LEN) as usize
}

/// Duration-weighted pitch-class mass of the notes sounding during a beat.
pub fn pc_histogram(score: &Score, beat: usize) -> Result<[f64; 12], HarmonyError> {
    let count = beat_count(score);
    if beat >= count {
        return Err(HarmonyError::BeatOutOfRange { beat, count });
    }
    let mut hist = [0.0; 12];
    let (lo, hi) = (beat as u32 * BEAT_LEN, (beat as u32 + 1) * BEAT_LEN);
    for n in score.placed_notes() {
        let overlap = n.end().min(hi).saturating_sub(n.start.max(lo));
        hist[(n.pitch % 12) as usize] += overlap as f64;
    }
    Ok(hist)
}

/// Best template by cosine similarity, with its similarity. `None` for a silent histogram.
///
/// Ties go to fewer template tones, then lower root, then quality order.
pub fn match_template(hist: &[f64; 12]) -> Option<(ChordTemplate, f64)> {
    let norm = hist.iter().map(|h| h * h).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let mut best: Option<(ChordTemplate, f64, usize)> = None;
    for t in ChordTemplate::all() {
        let pcs = t.pcs();
        let k = pcs.len();
        let dot: f64 = pcs.iter().map(|pc| hist[pc as usize]).sum();
        let better = match best {
            None => true,
            Some((bt, bdot, bk)) => {
                // compare dot/sqrt(k) without rounding through sqrt
                let lhs = dot * dot * bk as f64;
                let rhs = bdot * bdot * k as f64;
                lhs > rhs
                    || (lhs == rhs
                        && (k, t.root, t.quality) < (bk, bt.root, bt.quality))
            }
        };
        if better {
            best = Some((t, dot, k));
        }
    }
    best.map(|(t, dot, k)| (t, dot / (norm * (k as f64).sqrt())))
}

/// Largest subset of `present \ template` that introduces no interval class 1
/// or 2 against the template or within itself; ties go to the
/// lexicographically smallest set in ascending order.
pub fn find_extensions(present: PcSet, template: &ChordTemplate) -> PcSet {
    let tpcs = template.pcs();
    let candidates = present.difference(tpcs);
    // memoized over (next pitch class, pitch classes already ruled out)
    let mut memo = vec![None::<PcSet>; 13 * 4096];
    fn best(i: u8, blocked: u16, cand: PcSet, memo: &mut [Option<PcSet>]) -> PcSet {
        if i == 12 {
            return PcSet::EMPTY;
        }
        let key = i as usize * 4096 + blocked as usize;
        if let Some(v) = memo[key] {
            return v;
        }
        let skip = best(i + 1, blocked, cand, memo);
        let result = if cand.contains(i) && blocked >> i & 1 == 0 {
            let mut take = best(i + 1, blocked | second_neighbors(i).0, cand, memo);
            take.insert(i);
            // including i wins ties: its smallest element is smaller than any in `skip`
            if take.len() >= skip.len() {
                take
            } else {
                skip
            }
        } else {
            skip
        };
        memo[key] = Some(result);
        result
    }
    let mut blocked = 0u16;
    for t in tpcs.iter() {
        blocked |= second_neighbors(t).0;
    }
    best(0, blocked, candidates, &mut memo)
}

/// Runs template matching and extension search for every beat of the score.
pub fn analyze_skeleton(score: &Score) -> HarmonySkeleton {
    let count = beat_count(score);
    let mut hists = vec![[0.0f64; 12]; count];
    let mut sounding: Vec<Vec<u8>> = vec![Vec::new(); count];
    for n in score.placed_notes() {
        let first = (n.start / BEAT_LEN) as usize;
        let last = ((n.end() - 1) / BEAT_LEN) as usize;
        for b in first..=last.min(count.saturating_sub(1)) {
            let (lo, hi) = (b as u32 * BEAT_LEN, (b as u32 + 1) * BEAT_LEN);
            let overlap = n.end().min(hi).saturating_sub(n.start.max(lo));
            if overlap > 0 {
                hists[b][(n.pitch % 12) as usize] += overlap as f64;
                sounding[b].push(n.pitch);
            }
        }
    }
    let mut beats = Vec::with_capacity(count);
    let mut prev: Option<ChordTemplate> = None;
    for (i, (hist, mut pitches)) in hists.iter().zip(sounding).enumerate() {
        match match_template(hist) {
            Some((template, _)) => {
                let present = PcSet::from_pcs(pitches.iter().copied());
                let extensions = find_extensions(present, &template);
                let allowed = template.pcs().union(extensions);
                pitches.retain(|&p| allowed.contains(p));
                pitches.sort_unstable();
                pitches.dedup();
                beats.push(HarmonyBeat {
                    beat_index: i,
                    template: Some(template),
                    extensions,
                    tones: pitches,
                });
                prev = Some(template);
            }
            None => beats.push(HarmonyBeat {
                beat_index: i,
                template: prev,
                extensions: PcSet::EMPTY,
                tones: Vec::new(),
            }),
        }
    }
    HarmonySkeleton {
        beats,
        bar_lengths: score.bars.iter().map(|b| b.bar_length).collect(),
    }
}

/// Micro-averaged pitch-class precision and recall of `reanalyzed` against
/// `reference`, comparing the sounding tone pitch classes of each beat.
///
/// A denominator of zero gives 1.0 (nothing claimed, nothing missed).
pub fn precision_recall(
    reference: &HarmonySkeleton,
    reanalyzed: &HarmonySkeleton,
) -> Result<(f64, f64), HarmonyError> {
    if reference.len() != reanalyzed.len() {
        return Err(HarmonyError::ShapeMismatch {
            reference: reference.len(),
            generated: reanalyzed.len(),
        });
    }
    let (mut hit, mut gen, mut refn) = (0usize, 0usize, 0usize);
    for (r, g) in reference.beats.iter().zip(&reanalyzed.beats) {
        let (rp, gp) = (r.tone_pcs(), g.tone_pcs());
        hit += rp.intersection(gp).len();
        gen += gp.len();
        refn += rp.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok((ratio(hit, gen), ratio(hit, refn)))
}

/// Skeleton scorer used by the log-probability filter.
pub type SkeletonScorer = Arc<dyn Fn(&HarmonySkeleton) -> f64 + Send + Sync>;

/// Two-sided bound on a model log-probability.
#[derive(Clone)]
pub struct LogProbFilter {
    pub scorer: SkeletonScorer,
    pub low: f64,
    pub high: f64,
}

impl fmt::Debug for LogProbFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogProbFilter")
            .field("low", &self.low)
            .field("high", &self.high)
            .finish_non_exhaustive()
    }
}

impl LogProbFilter {
    /// Bounds at the given percentiles (0..=100) of reference scores.
    pub fn from_reference(scorer: SkeletonScorer, reference: &[f64], low_pct: f64, high_pct: f64) -> Self {
        let mut sorted: Vec<f64> = reference.iter().copied().filter(|v| v.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        let pick = |pct: f64| -> f64 {
            if sorted.is_empty() {
                return f64::NAN;
            }
            let idx = ((pct / 100.0) * (sorted.len() - 1) as f64).round() as usize;
            sorted[idx.min(sorted.len() - 1)]
        };
        Self {
            scorer,
            low: pick(low_pct),
            high: pick(high_pct),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_tones_per_beat: f64,
    pub max_repetition: f64,
    pub repetition_window_beats: usize,
    /// Minimum V/V7 -> I/i cadences per 32 bars.
    pub min_cadences_per_32_bars: Option<usize>,
    pub require_major_minor_start: bool,
    #[serde(skip)]
    pub log_prob: Option<LogProbFilter>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_tones_per_beat: 3.0,
            max_repetition: 0.25,
            repetition_window_beats: 16,
            min_cadences_per_32_bars: None,
            require_major_minor_start: false,
            log_prob: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Empty,
    Density,
    Repetition,
    Cadence,
    StartQuality,
    LogProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
    pub mean_tones_per_beat: f64,
    pub max_repetition: f64,
    pub cadences: usize,
}

fn same_beat(a: &HarmonyBeat, b: &HarmonyBeat) -> bool {
    a.template == b.template && a.extensions == b.extensions && a.tone_pcs() == b.tone_pcs()
}

/// Largest fraction of beats repeating their predecessor over any window.
pub fn repetition_rate(sk: &HarmonySkeleton, window: usize) -> f64 {
    let n = sk.beats.len();
    if n < 2 {
        return 0.0;
    }
    let repeats: Vec<bool> = (0..n)
        .map(|i| i > 0 && same_beat(&sk.beats[i], &sk.beats[i - 1]))
        .collect();
    let window = window.max(2).min(n);
    let mut worst: f64 = 0.0;
    for start in 0..=(n - window) {
        let range = start.max(1)..start + window;
        let total = range.len();
        let count = repeats[range].iter().filter(|&&r| r).count();
        worst = worst.max(count as f64 / total as f64);
    }
    worst
}

/// Beat pairs moving from a major or dominant-seventh chord to the major or
/// minor chord a fifth below.
pub fn count_cadences(sk: &HarmonySkeleton) -> usize {
    sk.beats
        .windows(2)
        .filter(|w| match (w[0].template, w[1].template) {
            (Some(a), Some(b)) => {
                matches!(a.quality, Quality::Dom7 | Quality::Maj)
                    && matches!(b.quality, Quality::Maj | Quality::Min)
                    && a.root == (b.root + 7) % 12
            }
            _ => false,
        })
        .count()
}

/// Applies the skeleton quality rules; the verdict lists every violated rule.
pub fn filter_skeleton(sk: &HarmonySkeleton, cfg: &FilterConfig) -> Verdict {
    let mut reasons = Vec::new();
    let n = sk.beats.len();
    let mean_tones = if n == 0 {
        0.0
    } else {
        sk.beats.iter().map(|b| b.tones.len()).sum::<usize>() as f64 / n as f64
    };
    let rep = repetition_rate(sk, cfg.repetition_window_beats);
    let cadences = count_cadences(sk);
    if n == 0 {
        reasons.push(RejectReason::Empty);
    }
    if mean_tones < cfg.min_tones_per_beat {
        reasons.push(RejectReason::Density);
    }
    if rep > cfg.max_repetition {
        reasons.push(RejectReason::Repetition);
    }
    if let Some(per32) = cfg.min_cadences_per_32_bars {
        let need = (per32 * sk.bar_count()).div_ceil(32);
        if cadences < need {
            reasons.push(RejectReason::Cadence);
        }
    }
    if cfg.require_major_minor_start {
        let ok = sk
            .beats
            .first()
            .and_then(|b| b.template)
            .is_some_and(|t| matches!(t.quality, Quality::Maj | Quality::Min));
        if !ok {
            reasons.push(RejectReason::StartQuality);
        }
    }
    if let Some(lp) = &cfg.log_prob {
        let v = (lp.scorer)(sk);
        if !(v >= lp.low && v <= lp.high) {
            reasons.push(RejectReason::LogProbability);
        }
    }
    Verdict {
        accepted: reasons.is_empty(),
        reasons,
        mean_tones_per_beat: mean_tones,
        max_repetition: rep,
        cadences,
    }
}

/// Drops extensions and keeps only template tones.
pub fn prune_to_template(sk: &HarmonySkeleton) -> HarmonySkeleton {
    let beats = sk
        .beats
        .iter()
        .map(|b| {
            let tpcs = b.template.map(|t| t.pcs()).unwrap_or_default();
            HarmonyBeat {
                beat_index: b.beat_index,
                template: b.template,
                extensions: PcSet::EMPTY,
                tones: b.tones.iter().copied().filter(|&p| tpcs.contains(p)).collect(),
            }
        })
        .collect();
    HarmonySkeleton {
        beats,
        bar_lengths: sk.bar_lengths.clone(),
    }
}

/// Skeleton tones as one track of beat-long notes, for audition.
pub fn skeleton_to_score(sk: &HarmonySkeleton) -> Score {
    let layout = sk.bar_layout();
    let mut bars = Vec::with_capacity(layout.len());
    let mut start = 0u32;
    for len in layout {
        let mut events = Vec::new();
        for b in &sk.beats {
            let t = b.beat_index as u32 * BEAT_LEN;
            if t >= start && t < start + len {
                let dur = BEAT_LEN.min(start + len - t);
                events.extend(b.tones.iter().map(|&p| NoteEvent::new(p, t - start, dur)));
            }
        }
        let mut bar = Bar::new(len);
        if !events.is_empty() {
            bar.tracks.push(TrackBar::new(0, 0, events));
        }
        bars.push(bar);
        start += len;
    }
    Score::new(bars)
}

/// Skeleton tones per bar with repeated tones in consecutive beats merged
/// into sustained notes. This is the harmony stream fed to the model.
pub fn harmony_track_bars(sk: &HarmonySkeleton) -> Vec<(u32, TrackBar)> {
    let layout = sk.bar_layout();
    let mut out = Vec::with_capacity(layout.len());
    let mut start = 0u32;
    for len in layout {
        let mut events: Vec<NoteEvent> = Vec::new();
        let mut open: Vec<(u8, usize)> = Vec::new(); // pitch -> index in events
        for b in &sk.beats {
            let t = b.beat_index as u32 * BEAT_LEN;
            if t < start || t >= start + len {
                continue;
            }
            let dur = BEAT_LEN.min(start + len - t);
            let mut next_open = Vec::new();
            for &p in &b.tones {
                match open.iter().find(|(q, _)| *q == p) {
                    Some(&(_, idx)) if events[idx].end() == t - start => {
                        events[idx].duration += dur;
                        next_open.push((p, idx));
                    }
                    _ => {
                        events.push(NoteEvent::new(p, t - start, dur));
                        next_open.push((p, events.len() - 1));
                    }
                }
            }
            open = next_open;
        }
        out.push((len, TrackBar::new(0, 0, events)));
        start += len;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BeatJson {
    i: usize,
    root: Option<u8>,
    quality: Option<Quality>,
    ext: Vec<u8>,
    tones: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonJson {
    beat_len: u32,
    beats: Vec<BeatJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    bar_lengths: Vec<u32>,
}

impl Serialize for HarmonySkeleton {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SkeletonJson {
            beat_len: BEAT_LEN,
            beats: self
                .beats
                .iter()
                .map(|b| BeatJson {
                    i: b.beat_index,
                    root: b.template.map(|t| t.root),
                    quality: b.template.map(|t| t.quality),
                    ext: b.extensions.to_vec(),
                    tones: b.tones.clone(),
                })
                .collect(),
            bar_lengths: self.bar_lengths.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HarmonySkeleton {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = SkeletonJson::deserialize(d)?;
        if j.beat_len != BEAT_LEN {
            return Err(D::Error::custom(format!("beat_len must be {BEAT_LEN}")));
        }
        let beats = j
            .beats
            .into_iter()
            .map(|b| {
                let template = match (b.root, b.quality) {
                    (Some(r), Some(q)) if r < 12 => Some(ChordTemplate::new(r, q)),
                    (None, None) => None,
                    _ => return Err(D::Error::custom(format!("beat {}: bad root/quality", b.i))),
                };
                let mut tones = b.tones;
                tones.sort_unstable();
                tones.dedup();
                Ok(HarmonyBeat {
                    beat_index: b.i,
                    template,
                    extensions: PcSet::from_pcs(b.ext),
                    tones,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sk = HarmonySkeleton {
            beats,
            bar_lengths: j.bar_lengths,
        };
        sk.validate().map_err(D::Error::custom)?;
        Ok(sk)
    }
}
