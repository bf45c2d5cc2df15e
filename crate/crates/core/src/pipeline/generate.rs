//! Bar → track → event inference loop with grammar, range and dissonance
//! constraints.

use super::sampling::{nucleus_sample, SamplingConfig};
use super::PipelineError;
use crate::dissonance::{adjust_pitch_logits, AdjustContext};
use crate::harmony::HarmonySkeleton;
use crate::hiermodel::{CellInput, CellSample, DecodeRequest, HierModel, WindowSample, BOS_ID, END_OF_BAR};
use crate::score::{Bar, Score};
use crate::tokenizer::{Grammar, Token, VOCAB_SIZE};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Cells that needed intervention while sampling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLog {
    /// `(bar, track id)` of cells closed early with EOT.
    pub closed_cells: Vec<(usize, u8)>,
    pub grammar_rejections: usize,
    pub harmony_notes_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub score: Score,
    pub window: WindowSample,
    pub log: GenerationLog,
}

/// Tokenized harmony cells and bar lengths for a skeleton, no music yet.
pub fn skeleton_window(model: &HierModel, sk: &HarmonySkeleton) -> Result<(WindowSample, usize), PipelineError> {
    let layout = sk.bar_layout();
    if layout.len() > model.config.bars {
        return Err(PipelineError::WindowTooLong {
            bars: layout.len(),
            max: model.config.bars,
        });
    }
    let empty = Score::new(layout.into_iter().map(Bar::new).collect());
    let (w, t) = WindowSample::from_score(&empty, sk, &model.config)?;
    Ok((w, t.harmony_notes))
}

struct Placed {
    start: u32,
    end: u32,
    pitch: u8,
}

fn replay(tokens: &[usize], bar_length: u32) -> Option<Grammar> {
    let mut g = Grammar::new(bar_length);
    for &t in tokens {
        g.push(Token::from_id(t)?).ok()?;
    }
    Some(g)
}

/// Longest prefix that can be closed with EOT, closed.
fn close_cell(tokens: &[usize], bar_length: u32) -> Vec<usize> {
    let eot = Token::Eot.id();
    for n in (0..=tokens.len()).rev() {
        if let Some(g) = replay(&tokens[..n], bar_length) {
            if g.accepts(Token::Eot) {
                let mut v = tokens[..n].to_vec();
                v.push(eot);
                return v;
            }
        }
    }
    vec![eot]
}

/// Samples one window of music over a harmony skeleton.
pub fn generate_window(model: &HierModel, sk: &HarmonySkeleton, cfg: &SamplingConfig) -> Result<Generated, PipelineError> {
    cfg.validate()?;
    let mcfg = &model.config;
    let (mut window, dropped) = skeleton_window(model, sk)?;
    let mut log = GenerationLog {
        harmony_notes_dropped: dropped,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = cfg.weights.pitch_table();
    let capacity = mcfg.events.min(32);
    let mut starts = Vec::with_capacity(window.bars.len());
    let mut at = 0;
    for b in &window.bars {
        starts.push(at);
        at += b.bar_length;
    }
    let mut placed: Vec<Placed> = Vec::new();
    let mut instrument_of: HashMap<u8, u8> = HashMap::new();
    // per track id: decoder outputs of that track's cell in the previous bar
    let mut previous: HashMap<u8, Vec<Array2<f64>>> = HashMap::new();

    for b in 0..window.bars.len() {
        let bar_length = window.bars[b].bar_length;
        let mut current: HashMap<u8, Vec<Array2<f64>>> = HashMap::new();
        let mut ctx = model.contexts(&window)?;
        // bar length is fixed by the skeleton: mask the head to that value
        let mut bl: Vec<f64> = ctx.bar_length_logits.row(b).to_vec();
        for (i, l) in bl.iter_mut().enumerate() {
            if i != bar_length as usize {
                *l = f64::NEG_INFINITY;
            }
        }
        nucleus_sample(&bl, cfg.top_p, cfg.temperature, &mut rng)?;

        for slot in 0.. {
            if slot > 0 {
                ctx = model.contexts(&window)?;
            }
            let used: Vec<u8> = window.bars[b].tracks.iter().map(|c| c.track_id).collect();
            let mut tl: Vec<f64> = ctx.track_logits[b].row(slot).to_vec();
            for (id, l) in tl.iter_mut().enumerate() {
                let blocked = if slot >= mcfg.tracks {
                    id != END_OF_BAR
                } else {
                    id != END_OF_BAR && used.contains(&(id as u8))
                };
                if blocked {
                    *l = f64::NEG_INFINITY;
                }
            }
            let tid = nucleus_sample(&tl, cfg.top_p, cfg.temperature, &mut rng)?;
            if tid == END_OF_BAR {
                break;
            }
            let tid = tid as u8;
            let context = ctx.track_context[b].slice(s![slot..slot + 1, ..]).to_owned();
            let inst = match instrument_of.get(&tid) {
                Some(&i) => i,
                None => {
                    let il = model.instrument_logits(context.row(0), tid);
                    let i = nucleus_sample(il.as_slice().expect("contiguous"), cfg.top_p, cfg.temperature, &mut rng)? as u8;
                    instrument_of.insert(tid, i);
                    i
                }
            };
            let [lo, hi] = cfg.range_table.range(inst);
            let harmony = &ctx.harmony[b];
            let prev = previous.get(&tid);
            let decode = |inputs: Vec<usize>| {
                let cells = [CellInput {
                    inputs,
                    bar_length,
                    track_id: tid,
                    instrument: inst,
                }];
                let empty = Vec::new();
                let (states, span) = match prev {
                    Some(p) => (p, Some((0, p[0].nrows()))),
                    None => (&empty, None),
                };
                model.decode_cells(&DecodeRequest {
                    cells: &cells,
                    context: &context,
                    harmony,
                    harmony_spans: &[(0, harmony.nrows())],
                    previous: states,
                    previous_spans: &[span],
                })
            };

            let mut grammar = Grammar::new(bar_length);
            let mut tokens: Vec<usize> = Vec::new();
            let mut rejections = 0;
            let mut closed = false;
            while !grammar.is_finished() {
                let mut inputs = vec![BOS_ID];
                inputs.extend_from_slice(&tokens);
                let out = decode(inputs)?;
                let mut logits: Vec<f64> = out.logits.row(out.logits.nrows() - 1).to_vec();
                let room = capacity - tokens.len();
                for (id, l) in logits.iter_mut().enumerate() {
                    let ok = id < VOCAB_SIZE
                        && Token::from_id(id).is_some_and(|t| {
                            let mut g = grammar.clone();
                            g.push(t).is_ok() && 1 + g.min_to_close() <= room
                        });
                    let in_range = id >= 128 || (lo..=hi).contains(&(id as u8));
                    if !ok || !in_range {
                        *l = f64::NEG_INFINITY;
                    }
                }
                if logits[..128].iter().any(|l| *l > f64::NEG_INFINITY) {
                    let t = starts[b] + grammar.pending_onset();
                    let mut active: Vec<u8> = placed
                        .iter()
                        .filter(|p| p.start <= t && t < p.end)
                        .map(|p| p.pitch)
                        .collect();
                    active.extend(
                        grammar
                            .notes()
                            .iter()
                            .filter(|n| starts[b] + n.onset <= t && t < starts[b] + n.end())
                            .map(|n| n.pitch),
                    );
                    if let Some(beat) = sk.beat_at(t) {
                        adjust_pitch_logits(
                            &mut logits,
                            &AdjustContext {
                                active: &active,
                                allowed: beat.allowed(),
                                params: cfg.params,
                                weights: &weights,
                            },
                        );
                    }
                }
                let Ok(id) = nucleus_sample(&logits, cfg.top_p, cfg.temperature, &mut rng) else {
                    closed = true;
                    break;
                };
                match Token::from_id(id).map(|t| grammar.push(t)) {
                    Some(Ok(())) => tokens.push(id),
                    _ => {
                        rejections += 1;
                        log.grammar_rejections += 1;
                        if rejections >= cfg.retry_budget {
                            closed = true;
                            break;
                        }
                    }
                }
            }
            if closed {
                tokens = close_cell(&tokens, bar_length);
                log.closed_cells.push((b, tid));
                grammar = replay(&tokens, bar_length).expect("closed cells are valid");
            }
            for n in grammar.notes() {
                placed.push(Placed {
                    start: starts[b] + n.onset,
                    end: starts[b] + n.end(),
                    pitch: n.pitch,
                });
            }
            let states = decode(HierModel::decoder_inputs(&tokens))?.states;
            current.insert(tid, states);
            window.bars[b].tracks.push(CellSample {
                track_id: tid,
                instrument: inst,
                tokens,
            });
        }
        previous = current;
    }
    let score = window.to_score()?;
    Ok(Generated { score, window, log })
}
