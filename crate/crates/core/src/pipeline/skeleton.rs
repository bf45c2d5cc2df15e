//! Skeleton sources: files (JSON or analyzed MIDI) and a small 1D chord
//! decoder trained on the toy corpus.

use super::sampling::nucleus_sample;
use super::PipelineError;
use crate::harmony::{analyze_skeleton, filter_skeleton, ChordTemplate, FilterConfig, HarmonyBeat, HarmonySkeleton, PcSet, RejectReason, BEAT_LEN};
use crate::hiermodel::tape::{Id, Mask, Stage, Tape};
use crate::hiermodel::{clip_grad_norm, head_params, spans_groups, stack_params, AdamW, Builder, ModelConfig, Params};
use crate::score::parse_midi;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::Path;

/// Reads skeletons from a file: `.mid`/`.midi` files are analyzed, anything
/// else is parsed as one skeleton JSON object or an array of them.
pub fn read_skeletons(path: &Path) -> Result<Vec<HarmonySkeleton>, PipelineError> {
    let bytes = std::fs::read(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "mid" || ext == "midi" {
        return Ok(vec![analyze_skeleton(&parse_midi(&bytes)?)]);
    }
    let text = String::from_utf8(bytes).map_err(|_| PipelineError::Config("skeleton file is not UTF-8".into()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("skeleton JSON: {e}")))?;
    let items = match value {
        serde_json::Value::Array(v) => v,
        v => vec![v],
    };
    items
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(|e| PipelineError::Config(format!("skeleton JSON: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SurvivalReport {
    pub seen: usize,
    pub accepted: usize,
    /// `(position in the source, reasons)` of every rejected skeleton.
    pub rejected: Vec<(usize, Vec<RejectReason>)>,
}

impl SurvivalReport {
    pub fn rate(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.accepted as f64 / self.seen as f64
        }
    }
}

/// Lazily filters a skeleton stream, recording every rejection.
pub struct SkeletonStream<I> {
    inner: I,
    filter: FilterConfig,
    pub report: SurvivalReport,
}

impl<I: Iterator<Item = HarmonySkeleton>> SkeletonStream<I> {
    pub fn new(inner: I, filter: FilterConfig) -> Self {
        Self {
            inner,
            filter,
            report: SurvivalReport::default(),
        }
    }
}

impl<I: Iterator<Item = HarmonySkeleton>> Iterator for SkeletonStream<I> {
    type Item = HarmonySkeleton;

    fn next(&mut self) -> Option<HarmonySkeleton> {
        for sk in self.inner.by_ref() {
            let i = self.report.seen;
            self.report.seen += 1;
            let v = filter_skeleton(&sk, &self.filter);
            if v.accepted {
                self.report.accepted += 1;
                return Some(sk);
            }
            self.report.rejected.push((i, v.reasons));
        }
        None
    }
}

const NO_CHORD: usize = 108;
const START: usize = 109;
const CHORD_VOCAB: usize = 110;
const MAX_BEATS: usize = 64;

fn template_index(t: ChordTemplate) -> usize {
    ChordTemplate::all().position(|c| c == t).expect("template is enumerated")
}

/// Causal decoder over one chord symbol per beat.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDecoder {
    config: ModelConfig,
    params: Params,
}

impl SkeletonDecoder {
    pub fn new(seed: u64) -> Self {
        let config = ModelConfig {
            hidden: 32,
            heads: 4,
            ..ModelConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.hidden;
        p.embedding("tok", CHORD_VOCAB, d, &mut rng);
        p.embedding("pos", MAX_BEATS, d, &mut rng);
        stack_params(&mut p, "dec", 2, d, 2 * d, false, &mut rng);
        head_params(&mut p, "out", d, CHORD_VOCAB, &mut rng);
        Self { config, params: p }
    }

    fn symbols(sk: &HarmonySkeleton) -> Vec<usize> {
        sk.beats
            .iter()
            .take(MAX_BEATS)
            .map(|b| b.template.map_or(NO_CHORD, template_index))
            .collect()
    }

    /// Teacher-forced pass: returns the tape, mean next-symbol loss and logits.
    fn run(&self, seqs: &[Vec<usize>]) -> (Tape, Id, Id) {
        let mut tape = Tape::new();
        let mut bd = Builder::new(&self.params, &self.config, &mut tape);
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut targets = Vec::new();
        let mut spans = Vec::new();
        for s in seqs {
            spans.push((ids.len(), s.len()));
            ids.push(START);
            ids.extend_from_slice(&s[..s.len().saturating_sub(1)]);
            pos.extend(0..s.len());
            targets.extend(s.iter().map(|&t| Some(t)));
        }
        let tok = bd.embed("tok", ids.clone());
        let pe = bd.embed("pos", pos);
        let x = bd.sum(&[tok, pe]);
        let h = bd.stack(x, "dec", 2, spans_groups(&spans, &Mask::Causal), Stage::HarmonyDecoder);
        let logits = bd.linear(h, "out");
        let loss = bd.tape.cross_entropy(logits, targets);
        (tape, loss, logits)
    }

    /// Fits the decoder to the chord sequences of `skeletons`; returns the
    /// final loss.
    pub fn train(&mut self, skeletons: &[HarmonySkeleton], steps: usize, lr: f64) -> f64 {
        let seqs: Vec<Vec<usize>> = skeletons.iter().map(Self::symbols).filter(|s| !s.is_empty()).collect();
        if seqs.is_empty() {
            return 0.0;
        }
        let mut opt = AdamW::new(0.0);
        let mut last = f64::NAN;
        for _ in 0..steps {
            let (tape, loss, _) = self.run(&seqs);
            last = tape.scalar(loss);
            let mut grads = tape.backward(loss, self.params.len());
            clip_grad_norm(&mut grads, 1.0);
            opt.update(&mut self.params, &grads, lr);
        }
        last
    }

    /// Samples `bars` bars of 4/4 chords. Each beat sounds the template in
    /// close position from middle C upwards.
    pub fn sample(&self, bars: usize, rng: &mut impl Rng) -> Result<HarmonySkeleton, PipelineError> {
        let beats = (bars * 4).min(MAX_BEATS);
        let templates: Vec<ChordTemplate> = ChordTemplate::all().collect();
        let mut seq: Vec<usize> = Vec::with_capacity(beats);
        for _ in 0..beats {
            let mut input = seq.clone();
            input.push(0);
            let (tape, _, l) = self.run(&[input]);
            let logits = tape.value(l);
            let row: Vec<f64> = logits.row(logits.nrows() - 1).to_vec();
            let mut masked = row;
            masked[START] = f64::NEG_INFINITY;
            seq.push(nucleus_sample(&masked, 0.99, 1.0, rng)?);
        }
        let beats = seq
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let template = (s < NO_CHORD).then(|| templates[s]);
                let tones = template
                    .map(|t| {
                        let mut v: Vec<u8> = t.pcs().iter().map(|pc| 60 + pc).collect();
                        v.sort_unstable();
                        v
                    })
                    .unwrap_or_default();
                HarmonyBeat {
                    beat_index: i,
                    template,
                    extensions: PcSet::EMPTY,
                    tones,
                }
            })
            .collect::<Vec<_>>();
        let n = beats.len();
        Ok(HarmonySkeleton {
            beats,
            bar_lengths: vec![4 * BEAT_LEN; n.div_ceil(4)],
        })
    }
}
