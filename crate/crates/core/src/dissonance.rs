//! Pairwise dissonance weights, per-step occupancy, the H/N dissonance total
//! and dissonance-averse adjustment of pitch logits.

use crate::harmony::{interval_class, HarmonySkeleton, PcSet};
use crate::score::Score;
use crate::tokenizer::PITCH_BASE;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DissonanceError {
    #[error("time step {t} lies beyond the skeleton ({extent} steps)")]
    BeyondSkeleton { t: u32, extent: u32 },
    #[error("invalid dissonance table: {0}")]
    Config(String),
}

/// Register modulation: close intervals below `pivot` get heavier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub enabled: bool,
    pub pivot: u8,
    pub rate: f64,
}

impl Default for Decay {
    fn default() -> Self {
        Self {
            enabled: true,
            pivot: 48,
            rate: 0.05,
        }
    }
}

/// Interval-class weight table plus register decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissonanceMatrix {
    pub ic: [f64; 7],
    #[serde(default)]
    pub decay: Decay,
}

impl Default for DissonanceMatrix {
    fn default() -> Self {
        default_w()
    }
}

/// Default table: m2 1.0, tritone 0.95, P5 0.1; the rest interpolate along
/// the roughness ordering.
pub fn default_w() -> DissonanceMatrix {
    DissonanceMatrix {
        ic: [0.0, 1.0, 0.55, 0.2, 0.15, 0.1, 0.95],
        decay: Decay::default(),
    }
}

impl DissonanceMatrix {
    pub fn without_decay(mut self) -> Self {
        self.decay.enabled = false;
        self
    }

    pub fn validate(&self) -> Result<(), DissonanceError> {
        if self.ic[0] != 0.0 {
            return Err(DissonanceError::Config("unison weight must be 0".into()));
        }
        if let Some(w) = self.ic.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(DissonanceError::Config(format!("weight {w} outside [0, 1]")));
        }
        if self.decay.pivot > 127 || !self.decay.rate.is_finite() || self.decay.rate < 0.0 {
            return Err(DissonanceError::Config("bad decay parameters".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, DissonanceError> {
        let w: Self = serde_json::from_str(s).map_err(|e| DissonanceError::Config(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    /// Base weights expanded to a 12x12 pitch-class matrix.
    pub fn pc_matrix(&self) -> [[f64; 12]; 12] {
        let mut m = [[0.0; 12]; 12];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.ic[interval_class(i as u8, j as u8) as usize];
            }
        }
        m
    }

    pub fn pair_weight(&self, p1: u8, p2: u8) -> f64 {
        pair_weight(p1, p2, self)
    }

    /// Every concrete pitch pair, row-major over 128x128.
    pub fn pitch_table(&self) -> PitchWeights {
        let mut w = vec![0.0; 128 * 128];
        for a in 0..128u8 {
            for b in 0..128u8 {
                w[a as usize * 128 + b as usize] = pair_weight(a, b, self);
            }
        }
        PitchWeights(w)
    }
}

/// Precomputed weights for all pitch pairs.
#[derive(Debug, Clone)]
pub struct PitchWeights(Vec<f64>);

impl PitchWeights {
    #[inline]
    pub fn get(&self, a: u8, b: u8) -> f64 {
        self.0[a as usize * 128 + b as usize]
    }
}

/// Weight of two sounding pitches.
pub fn pair_weight(p1: u8, p2: u8, w: &DissonanceMatrix) -> f64 {
    let ic = interval_class(p1 % 12, p2 % 12);
    let base = w.ic[ic as usize];
    if !w.decay.enabled || !(1..=4).contains(&ic) {
        return base;
    }
    let depth = (w.decay.pivot as f64 - p1.min(p2) as f64).max(0.0);
    let f = (1.0 + w.decay.rate * depth).min(2.0);
    (base * f).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissonanceParams {
    pub lambda_hn: f64,
    pub lambda_nn: f64,
}

impl Default for DissonanceParams {
    fn default() -> Self {
        Self {
            lambda_hn: 1.0,
            lambda_nn: 10.0,
        }
    }
}

impl DissonanceParams {
    pub fn new(lambda_hn: f64, lambda_nn: f64) -> Self {
        Self { lambda_hn, lambda_nn }
    }
}

/// Normalized occupancy of harmonic (`h`) and non-harmonic (`n`) pitches.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyFrame {
    pub t: u32,
    pub h: Vec<f64>,
    pub n: Vec<f64>,
}

impl OccupancyFrame {
    fn from_active(t: u32, active: &[u8], allowed: PcSet) -> Self {
        let mut h = vec![0.0; 128];
        let mut n = vec![0.0; 128];
        let (mut hc, mut nc) = (0usize, 0usize);
        for &p in active {
            if allowed.contains(p) {
                h[p as usize] += 1.0;
                hc += 1;
            } else {
                n[p as usize] += 1.0;
                nc += 1;
            }
        }
        for (v, c) in [(&mut h, hc), (&mut n, nc)] {
            if c > 0 {
                v.iter_mut().for_each(|x| *x /= c as f64);
            }
        }
        Self { t, h, n }
    }

    fn support(v: &[f64]) -> impl Iterator<Item = (u8, f64)> + '_ {
        v.iter()
            .enumerate()
            .filter(|(_, &x)| x > 0.0)
            .map(|(p, &x)| (p as u8, x))
    }

    /// `Hᵀ W N`.
    pub fn hn(&self, w: &PitchWeights) -> f64 {
        let mut s = 0.0;
        for (a, x) in Self::support(&self.h) {
            for (b, y) in Self::support(&self.n) {
                s += x * y * w.get(a, b);
            }
        }
        s
    }

    /// `½ Nᵀ W N`.
    pub fn nn(&self, w: &PitchWeights) -> f64 {
        let mut s = 0.0;
        for (a, x) in Self::support(&self.n) {
            for (b, y) in Self::support(&self.n) {
                s += x * y * w.get(a, b);
            }
        }
        0.5 * s
    }
}

/// Sounding pitches (with multiplicity) at every grid step of the score.
fn active_by_step(score: &Score) -> Vec<Vec<u8>> {
    let steps = score.total_length();
    let mut active = vec![Vec::new(); steps as usize];
    for n in score.placed_notes() {
        for t in n.start..n.end().min(steps) {
            active[t as usize].push(n.pitch);
        }
    }
    active
}

fn skeleton_extent(sk: &HarmonySkeleton) -> u32 {
    sk.beats.len() as u32 * crate::harmony::BEAT_LEN
}

fn allowed_at(sk: &HarmonySkeleton, t: u32) -> Result<PcSet, DissonanceError> {
    sk.beat_at(t)
        .map(|b| b.allowed())
        .ok_or(DissonanceError::BeyondSkeleton {
            t,
            extent: skeleton_extent(sk),
        })
}

/// Occupancy frame at grid step `t`.
pub fn classify(score: &Score, sk: &HarmonySkeleton, t: u32) -> Result<OccupancyFrame, DissonanceError> {
    let allowed = allowed_at(sk, t)?;
    let active: Vec<u8> = score
        .placed_notes()
        .iter()
        .filter(|n| n.sounds_at(t))
        .map(|n| n.pitch)
        .collect();
    Ok(OccupancyFrame::from_active(t, &active, allowed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissonanceScore {
    pub total: f64,
    /// Mean of `Hᵀ W N` over grid steps.
    pub d_hn: f64,
    /// Mean of `½ Nᵀ W N` over grid steps.
    pub d_nn: f64,
}

/// λ_hn Σ_t Hᵀ W N + λ_nn Σ_t ½ Nᵀ W N over every grid step of the score.
pub fn d_total(
    score: &Score,
    sk: &HarmonySkeleton,
    params: DissonanceParams,
    w: &DissonanceMatrix,
) -> Result<DissonanceScore, DissonanceError> {
    let table = w.pitch_table();
    let active = active_by_step(score);
    let (mut shn, mut snn) = (0.0, 0.0);
    for (t, pitches) in active.iter().enumerate() {
        let t = t as u32;
        let allowed = allowed_at(sk, t)?;
        if pitches.is_empty() {
            continue;
        }
        let f = OccupancyFrame::from_active(t, pitches, allowed);
        shn += f.hn(&table);
        snn += f.nn(&table);
    }
    let steps = active.len().max(1) as f64;
    Ok(DissonanceScore {
        total: params.lambda_hn * shn + params.lambda_nn * snn,
        d_hn: shn / steps,
        d_nn: snn / steps,
    })
}

/// What is sounding when a pitch token is about to be chosen.
#[derive(Debug, Clone, Copy)]
pub struct AdjustContext<'a> {
    pub active: &'a [u8],
    /// Template plus extension pitch classes of the current beat.
    pub allowed: PcSet,
    pub params: DissonanceParams,
    pub weights: &'a PitchWeights,
}

/// Dissonance each candidate pitch would add against the sounding notes.
pub fn pitch_deltas(ctx: &AdjustContext) -> [f64; 128] {
    let mut out = [0.0; 128];
    let (h, n): (Vec<u8>, Vec<u8>) = ctx.active.iter().partition(|&&p| ctx.allowed.contains(p));
    for (p, d) in out.iter_mut().enumerate() {
        let p = p as u8;
        let sum = |set: &[u8]| set.iter().map(|&q| ctx.weights.get(p, q)).sum::<f64>();
        *d = if ctx.allowed.contains(p) {
            ctx.params.lambda_hn * sum(&n)
        } else {
            ctx.params.lambda_hn * sum(&h) + ctx.params.lambda_nn * sum(&n)
        };
    }
    out
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Lowers each pitch logit by its dissonance increment, then shifts all pitch
/// logits together so the pitch tokens keep their total softmax mass.
/// Non-pitch logits are untouched.
pub fn adjust_pitch_logits(logits: &mut [f64], ctx: &AdjustContext) {
    let range = PITCH_BASE..PITCH_BASE + 128;
    let deltas = pitch_deltas(ctx);
    if deltas.iter().all(|&d| d == 0.0) {
        return;
    }
    let pitch = &mut logits[range];
    let before = logsumexp(pitch.iter().copied());
    if before == f64::NEG_INFINITY {
        return;
    }
    for (l, d) in pitch.iter_mut().zip(deltas) {
        *l -= d;
    }
    let after = logsumexp(pitch.iter().copied());
    let shift = before - after;
    for l in pitch.iter_mut() {
        *l += shift;
    }
}
