//! Sampling configuration, instrument ranges and nucleus sampling.

use super::PipelineError;
use crate::dissonance::{DissonanceMatrix, DissonanceParams};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Playable MIDI pitch range per General MIDI program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    pub ranges: BTreeMap<u8, [u8; 2]>,
    /// Range of programs missing from `ranges`.
    pub fallback: [u8; 2],
}

impl Default for RangeTable {
    /// Orchestration-manual ranges, by program family with common
    /// individual instruments spelled out.
    fn default() -> Self {
        let mut r = BTreeMap::new();
        let mut family = |lo: u8, hi: u8, range: [u8; 2]| {
            for p in lo..=hi {
                r.insert(p, range);
            }
        };
        family(0, 7, [21, 108]); // pianos
        family(8, 15, [53, 108]); // chromatic percussion
        family(16, 23, [36, 96]); // organs
        family(24, 31, [40, 88]); // guitars
        family(32, 39, [28, 67]); // basses
        family(40, 40, [55, 103]); // violin
        family(41, 41, [48, 91]); // viola
        family(42, 42, [36, 76]); // cello
        family(43, 43, [28, 67]); // contrabass
        family(44, 45, [28, 103]);
        family(46, 46, [23, 103]); // harp
        family(47, 47, [40, 57]); // timpani
        family(48, 55, [28, 103]); // ensembles
        family(56, 56, [54, 86]); // trumpet
        family(57, 57, [40, 72]); // trombone
        family(58, 58, [28, 58]); // tuba
        family(59, 59, [54, 82]);
        family(60, 60, [34, 77]); // horn
        family(61, 63, [34, 86]);
        family(64, 64, [56, 88]); // soprano sax
        family(65, 65, [49, 81]);
        family(66, 66, [44, 76]);
        family(67, 67, [36, 69]);
        family(68, 68, [58, 91]); // oboe
        family(69, 69, [52, 81]);
        family(70, 70, [34, 75]); // bassoon
        family(71, 71, [50, 94]); // clarinet
        family(72, 72, [74, 108]); // piccolo
        family(73, 79, [60, 96]); // flutes
        family(80, 103, [36, 96]); // synths
        family(104, 111, [48, 84]);
        family(112, 119, [36, 84]);
        Self {
            ranges: r,
            fallback: [0, 127],
        }
    }
}

impl RangeTable {
    /// Every pitch allowed for every program.
    pub fn wide_open() -> Self {
        Self {
            ranges: BTreeMap::new(),
            fallback: [0, 127],
        }
    }

    pub fn range(&self, program: u8) -> [u8; 2] {
        self.ranges.get(&program).copied().unwrap_or(self.fallback)
    }

    pub fn contains(&self, program: u8, pitch: u8) -> bool {
        let [lo, hi] = self.range(program);
        (lo..=hi).contains(&pitch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub params: DissonanceParams,
    pub weights: DissonanceMatrix,
    pub seed: u64,
    pub range_table: RangeTable,
    /// Grammar rejections tolerated per cell before it is closed.
    pub retry_budget: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.99,
            temperature: 1.0,
            params: DissonanceParams::default(),
            weights: DissonanceMatrix::default(),
            seed: 0,
            range_table: RangeTable::default(),
            retry_budget: 8,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PipelineError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PipelineError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.params.lambda_hn < 0.0 || self.params.lambda_nn < 0.0 {
            return Err(PipelineError::Config("dissonance weights must be non-negative".into()));
        }
        self.weights
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Tokens kept by nucleus filtering with their renormalized probabilities,
/// most probable first.
pub fn nucleus(logits: &[f64], top_p: f64, temperature: f64) -> Result<Vec<(usize, f64)>, PipelineError> {
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(PipelineError::Sampling("non-finite logit".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(PipelineError::Sampling("every token is masked".into()));
    }
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > f64::NEG_INFINITY)
        .map(|(i, &l)| (i, ((l - m) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        mass += p.1;
        if mass >= top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    Ok(probs)
}

/// One categorical draw from the nucleus.
pub fn nucleus_sample<R: Rng>(logits: &[f64], top_p: f64, temperature: f64, rng: &mut R) -> Result<usize, PipelineError> {
    let kept = nucleus(logits, top_p, temperature)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(kept.last().expect("nucleus is never empty").0)
}
