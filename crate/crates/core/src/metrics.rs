//! Rule-based objective metrics for a generated window.

use crate::dissonance::{d_total, DissonanceMatrix, DissonanceParams};
use crate::harmony::{analyze_skeleton, precision_recall, HarmonySkeleton};
use crate::score::{Score, TrackBar};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("{metric} is undefined: {reason}")]
    Undefined {
        metric: &'static str,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trk: Option<f64>,
    pub prc: Option<f64>,
    pub rec: Option<f64>,
    pub d_hn: Option<f64>,
    pub d_nn: Option<f64>,
    pub mov: Option<f64>,
    pub orn: Option<f64>,
    /// Why a metric is null.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub absent: BTreeMap<String, String>,
}

/// Mean number of tracks with at least one note per bar.
pub fn track_density(score: &Score) -> Result<f64, MetricError> {
    if score.bars.is_empty() {
        return Err(MetricError::Undefined {
            metric: "trk",
            reason: "score has no bars",
        });
    }
    let active: usize = score.bars.iter().map(|b| b.active_tracks().count()).sum();
    Ok(active as f64 / score.bars.len() as f64)
}

fn mean_pitch(tb: &TrackBar) -> f64 {
    let (num, den) = tb.events.iter().fold((0.0, 0.0), |(n, d), e| {
        (n + e.pitch as f64 * e.duration as f64, d + e.duration as f64)
    });
    num / den
}

/// The active track with the highest duration-weighted mean pitch (ties go
/// to the lower slot), or `None` for a silent bar.
pub fn skyline(bar: &crate::score::Bar) -> Option<&TrackBar> {
    let mut best: Option<(&TrackBar, f64)> = None;
    for tb in bar.active_tracks() {
        let m = mean_pitch(tb);
        if best.map_or(true, |(_, bm)| m > bm) {
            best = Some((tb, m));
        }
    }
    best.map(|b| b.0)
}

/// Most frequent duration, ties to the shorter one.
fn predominant_duration(tb: &TrackBar) -> u32 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for e in &tb.events {
        *counts.entry(e.duration).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, _)| d)
        .unwrap_or(0)
}

/// Fraction of consecutive bar pairs whose skyline predominant duration
/// changes. Pairs touching a silent bar are skipped.
pub fn melodic_movement(score: &Score) -> Result<f64, MetricError> {
    if score.bars.len() < 2 {
        return Err(MetricError::Undefined {
            metric: "mov",
            reason: "fewer than two bars",
        });
    }
    let durs: Vec<Option<u32>> = score
        .bars
        .iter()
        .map(|b| skyline(b).map(predominant_duration))
        .collect();
    let (mut pairs, mut shifts) = (0usize, 0usize);
    for w in durs.windows(2) {
        if let (Some(a), Some(b)) = (w[0], w[1]) {
            pairs += 1;
            shifts += usize::from(a != b);
        }
    }
    Ok(if pairs == 0 { 0.0 } else { shifts as f64 / pairs as f64 })
}

/// A note on the skyline melody line.
#[derive(Debug, Clone, Copy)]
struct LineNote {
    bar: usize,
    pitch: u8,
    start: u32,
    duration: u32,
}

fn melody_line(score: &Score) -> Vec<LineNote> {
    let starts = score.bar_starts();
    let mut line: Vec<LineNote> = Vec::new();
    for (bi, bar) in score.bars.iter().enumerate() {
        let Some(tb) = skyline(bar) else { continue };
        for e in &tb.events {
            let n = LineNote {
                bar: bi,
                pitch: e.pitch,
                start: starts[bi] + e.onset,
                duration: e.duration,
            };
            // one note per onset: the highest
            match line.last_mut() {
                Some(last) if last.start == n.start => {
                    if n.pitch > last.pitch {
                        *last = n;
                    }
                }
                _ => line.push(n),
            }
        }
    }
    line
}

/// Fraction of bars in which a run of three or more contiguous eighth or
/// sixteenth notes, moving by steps of at most two semitones in one
/// direction, lands on a note of at least a quarter. A run counts for the bar
/// of the note it lands on.
pub fn melodic_ornament(score: &Score) -> Result<f64, MetricError> {
    if score.bars.is_empty() {
        return Err(MetricError::Undefined {
            metric: "orn",
            reason: "score has no bars",
        });
    }
    let line = melody_line(score);
    let mut hit = vec![false; score.bars.len()];
    let short = |n: &LineNote| matches!(n.duration, 2 | 4);
    for (ti, target) in line.iter().enumerate() {
        if target.duration < 8 || ti < 3 {
            continue;
        }
        // walk backwards over the run feeding this target
        let mut len = 0;
        let mut dir = 0i32;
        let mut next = target;
        for prev in line[..ti].iter().rev() {
            let step = next.pitch as i32 - prev.pitch as i32;
            let contiguous = prev.start + prev.duration == next.start;
            if !short(prev) || !contiguous || step == 0 || step.abs() > 2 {
                break;
            }
            if dir != 0 && step.signum() != dir {
                break;
            }
            dir = step.signum();
            len += 1;
            next = prev;
        }
        if len >= 3 {
            hit[target.bar] = true;
        }
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64)
}

/// Every metric for one window. Dissonance uses the reference skeleton when
/// given, otherwise the skeleton re-analyzed from the score itself.
pub fn evaluate(
    score: &Score,
    reference: Option<&HarmonySkeleton>,
    params: DissonanceParams,
    w: &DissonanceMatrix,
) -> MetricsReport {
    let mut r = MetricsReport::default();
    let absent = |r: &mut MetricsReport, k: &str, why: String| {
        r.absent.insert(k.to_string(), why);
    };
    match track_density(score) {
        Ok(v) => r.trk = Some(v),
        Err(e) => absent(&mut r, "trk", e.to_string()),
    }
    let analyzed = analyze_skeleton(score);
    match reference {
        Some(reference) => match precision_recall(reference, &analyzed) {
            Ok((p, q)) => {
                r.prc = Some(p);
                r.rec = Some(q);
            }
            Err(e) => {
                absent(&mut r, "prc", e.to_string());
                absent(&mut r, "rec", e.to_string());
            }
        },
        None => {
            absent(&mut r, "prc", "no reference skeleton".into());
            absent(&mut r, "rec", "no reference skeleton".into());
        }
    }
    match d_total(score, reference.unwrap_or(&analyzed), params, w) {
        Ok(d) => {
            r.d_hn = Some(d.d_hn);
            r.d_nn = Some(d.d_nn);
        }
        Err(e) => {
            absent(&mut r, "d_hn", e.to_string());
            absent(&mut r, "d_nn", e.to_string());
        }
    }
    match melodic_movement(score) {
        Ok(v) => r.mov = Some(v),
        Err(e) => absent(&mut r, "mov", e.to_string()),
    }
    match melodic_ornament(score) {
        Ok(v) => r.orn = Some(v),
        Err(e) => absent(&mut r, "orn", e.to_string()),
    }
    r
}
