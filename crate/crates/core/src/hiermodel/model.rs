use super::config::{ModelConfig, BOS_ID, END_OF_BAR};
use super::params::Params;
use super::sample::{build_track_prev_index_map, WindowSample};
use super::tape::{Group, Id, Mask, Stage, Tape};
use super::ModelError;
use crate::tokenizer::VOCAB_SIZE;
use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::rc::Rc;

const LOSS_META: f64 = 0.05;
const LOSS_HARM: f64 = 0.5;
const LOSS_MUSIC: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_meta: f64,
    pub l_harm: f64,
    pub l_music: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_meta: f64, l_harm: f64, l_music: f64) -> Self {
        Self {
            l_meta,
            l_harm,
            l_music,
            total: LOSS_META * l_meta + LOSS_HARM * l_harm + LOSS_MUSIC * l_music,
        }
    }
}

/// Intermediate features padded to the configured window shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub z_hb: Array2<f64>,
    pub z_t: Array3<f64>,
    pub z_b: Array2<f64>,
    pub c_hb: Array2<f64>,
    pub c_b: Array2<f64>,
    pub c_t: Array3<f64>,
    pub c_h: Array3<f64>,
}

/// Tape handles of one teacher-forced window.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub loss: Id,
    pub breakdown: LossBreakdown,
    pub z_hb: Id,
    pub z_b: Id,
    pub z_t: Option<Id>,
    pub c_hb: Id,
    pub c_b: Id,
    pub c_t: Option<Id>,
    pub c_h: Id,
    pub track_context: Id,
    pub bar_length_logits: Id,
    pub track_logits: Id,
    pub instrument_logits: Option<Id>,
    pub harmony_logits: Id,
    pub music_logits: Option<Id>,
    /// Music decoder output after each layer.
    pub music_states: Vec<Id>,
    /// `(bar, slot, first row, rows)` for every music cell.
    pub cells: Vec<(usize, usize, usize, usize)>,
    /// `(first row, rows)` of every bar's harmony cell.
    pub harmony_spans: Vec<(usize, usize)>,
    /// Track-context row of every (bar, slot), slots `0..=tracks`.
    pub context_rows: Vec<Vec<usize>>,
}

/// Decoder inputs of one music cell (already BOS-prefixed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellInput {
    pub inputs: Vec<usize>,
    pub bar_length: u32,
    pub track_id: u8,
    pub instrument: u8,
}

/// Stand-alone music decoding against explicit context tensors.
pub struct DecodeRequest<'a> {
    pub cells: &'a [CellInput],
    /// One track-context row per cell.
    pub context: &'a Array2<f64>,
    pub harmony: &'a Array2<f64>,
    /// Rows of `harmony` each cell attends to.
    pub harmony_spans: &'a [(usize, usize)],
    /// Per decoder layer, outputs of the previous bar's cells.
    pub previous: &'a [Array2<f64>],
    pub previous_spans: &'a [Option<(usize, usize)>],
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Array2<f64>,
    pub states: Vec<Array2<f64>>,
    pub spans: Vec<(usize, usize)>,
}

/// Everything inference needs before decoding a bar's cells.
#[derive(Debug, Clone)]
pub struct Contexts {
    /// `[bars, bar-length vocab]`.
    pub bar_length_logits: Array2<f64>,
    /// Per bar, rows for slots `0..=tracks`.
    pub track_context: Vec<Array2<f64>>,
    pub track_logits: Vec<Array2<f64>>,
    /// Per bar, harmony event context rows.
    pub harmony: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierModel {
    pub config: ModelConfig,
    pub params: Params,
}

pub(crate) fn block_params(p: &mut Params, pre: &str, d: usize, ff: usize, cross: bool, rng: &mut ChaCha8Rng) {
    for ln in ["ln1", "ln2"] {
        p.filled(format!("{pre}.{ln}.g"), 1, d, 1.0);
        p.filled(format!("{pre}.{ln}.b"), 1, d, 0.0);
    }
    for w in ["wq", "wk", "wv", "wo"] {
        p.xavier(format!("{pre}.attn.{w}"), d, d, rng);
    }
    p.xavier(format!("{pre}.ff.w1"), d, ff, rng);
    p.filled(format!("{pre}.ff.b1"), 1, ff, 0.0);
    p.xavier(format!("{pre}.ff.w2"), ff, d, rng);
    p.filled(format!("{pre}.ff.b2"), 1, d, 0.0);
    if cross {
        for ln in ["lnq", "lnkv"] {
            p.filled(format!("{pre}.{ln}.g"), 1, d, 1.0);
            p.filled(format!("{pre}.{ln}.b"), 1, d, 0.0);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            p.xavier(format!("{pre}.x.{w}"), d, d, rng);
        }
    }
}

pub(crate) fn stack_params(p: &mut Params, pre: &str, layers: usize, d: usize, ff: usize, cross: bool, rng: &mut ChaCha8Rng) {
    for l in 0..layers {
        block_params(p, &format!("{pre}.{l}"), d, ff, cross, rng);
    }
    p.filled(format!("{pre}.lnf.g"), 1, d, 1.0);
    p.filled(format!("{pre}.lnf.b"), 1, d, 0.0);
}

pub(crate) fn head_params(p: &mut Params, name: &str, d: usize, out: usize, rng: &mut ChaCha8Rng) {
    p.xavier(format!("{name}.w"), d, out, rng);
    p.filled(format!("{name}.b"), 1, out, 0.0);
}

pub(crate) fn spans_groups(spans: &[(usize, usize)], mask: &Mask) -> Vec<Group> {
    spans
        .iter()
        .filter(|s| s.1 > 0)
        .map(|&(a, n)| Group {
            queries: (a..a + n).collect(),
            keys: (a..a + n).collect(),
            mask: mask.clone(),
        })
        .collect()
}

fn shifted_inputs(tokens: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tokens.len());
    v.push(BOS_ID);
    v.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    v
}

enum Previous<'a> {
    /// Predecessor cell index within the same stack.
    Internal(&'a [Option<usize>]),
    /// Per-layer constant tensors with a key span per cell.
    External(Vec<Id>, &'a [Option<(usize, usize)>]),
}

pub(crate) struct Builder<'a> {
    params: &'a Params,
    cfg: &'a ModelConfig,
    pub(crate) tape: &'a mut Tape,
    cache: HashMap<String, Id>,
}

impl<'a> Builder<'a> {
    pub(crate) fn new(params: &'a Params, cfg: &'a ModelConfig, tape: &'a mut Tape) -> Self {
        Self {
            params,
            cfg,
            tape,
            cache: HashMap::new(),
        }
    }

    pub(crate) fn p(&mut self, name: &str) -> Id {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let idx = self
            .params
            .find(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let id = self.tape.param(self.params, idx);
        self.cache.insert(name.to_string(), id);
        id
    }

    pub(crate) fn linear(&mut self, x: Id, pre: &str) -> Id {
        let w = self.p(&format!("{pre}.w"));
        let b = self.p(&format!("{pre}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    pub(crate) fn ln(&mut self, x: Id, pre: &str) -> Id {
        let g = self.p(&format!("{pre}.g"));
        let b = self.p(&format!("{pre}.b"));
        self.tape.layer_norm(x, g, b)
    }

    pub(crate) fn embed(&mut self, table: &str, ids: Vec<usize>) -> Id {
        let t = self.p(table);
        self.tape.gather_all(t, ids)
    }

    pub(crate) fn sum(&mut self, parts: &[Id]) -> Id {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.tape.add(acc, p);
        }
        acc
    }

    fn attention(&mut self, xq: Id, xkv: Id, pre: &str, groups: Rc<Vec<Group>>, stage: Stage) -> Id {
        let wq = self.p(&format!("{pre}.wq"));
        let wk = self.p(&format!("{pre}.wk"));
        let wv = self.p(&format!("{pre}.wv"));
        let wo = self.p(&format!("{pre}.wo"));
        let q = self.tape.matmul(xq, wq);
        let k = self.tape.matmul(xkv, wk);
        let v = self.tape.matmul(xkv, wv);
        let a = self.tape.attend(q, k, v, groups, self.cfg.heads, stage);
        self.tape.matmul(a, wo)
    }

    fn self_attn(&mut self, x: Id, pre: &str, groups: Rc<Vec<Group>>, stage: Stage) -> Id {
        let h = self.ln(x, &format!("{pre}.ln1"));
        let a = self.attention(h, h, &format!("{pre}.attn"), groups, stage);
        self.tape.add(x, a)
    }

    fn cross_attn(&mut self, x: Id, kv: Id, pre: &str, groups: Rc<Vec<Group>>, stage: Stage) -> Id {
        let hq = self.ln(x, &format!("{pre}.lnq"));
        let hk = self.ln(kv, &format!("{pre}.lnkv"));
        let a = self.attention(hq, hk, &format!("{pre}.x"), groups, stage);
        self.tape.add(x, a)
    }

    fn ff(&mut self, x: Id, pre: &str) -> Id {
        let h = self.ln(x, &format!("{pre}.ln2"));
        let w1 = self.p(&format!("{pre}.ff.w1"));
        let b1 = self.p(&format!("{pre}.ff.b1"));
        let w2 = self.p(&format!("{pre}.ff.w2"));
        let b2 = self.p(&format!("{pre}.ff.b2"));
        let h = self.tape.matmul(h, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.gelu(h);
        let h = self.tape.matmul(h, w2);
        let h = self.tape.add_row(h, b2);
        self.tape.add(x, h)
    }

    /// Self-attention stack followed by its final LayerNorm.
    pub(crate) fn stack(&mut self, x: Id, pre: &str, layers: usize, groups: Vec<Group>, stage: Stage) -> Id {
        let groups = Rc::new(groups);
        let mut h = x;
        for l in 0..layers {
            let bp = format!("{pre}.{l}");
            h = self.self_attn(h, &bp, groups.clone(), stage);
            h = self.ff(h, &bp);
        }
        self.ln(h, &format!("{pre}.lnf"))
    }

    fn shift(&mut self, c: Id, start: &str, n: usize) -> Id {
        let s = self.p(start);
        let cat = self.tape.concat(vec![s, c]);
        self.tape.gather_all(cat, 0..n)
    }

    /// Event encoder over cells laid out back to back; returns one pooled row
    /// per cell.
    fn encode_events(&mut self, cells: &[(&[usize], Option<(u32, u8, u8)>)], stage: Stage) -> Id {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::new();
        let mut meta = Vec::new();
        for (toks, m) in cells {
            spans.push((ids.len(), toks.len()));
            ids.extend_from_slice(toks);
            pos.extend(0..toks.len());
            if let Some(m) = m {
                meta.extend(std::iter::repeat(*m).take(toks.len()));
            }
        }
        let mut parts = vec![self.embed("tok_emb", ids), self.embed("evt_pos", pos)];
        if !meta.is_empty() {
            parts.push(self.embed("bar_len_emb", meta.iter().map(|m| m.0 as usize).collect()));
            parts.push(self.embed("track_emb", meta.iter().map(|m| m.1 as usize).collect()));
            parts.push(self.embed("inst_emb", meta.iter().map(|m| m.2 as usize).collect()));
        }
        let x = self.sum(&parts);
        let layers = self.cfg.layers.event_encoder;
        let h = self.stack(x, "enc_e", layers, spans_groups(&spans, &Mask::Full), stage);
        let pools = spans.iter().map(|&(a, n)| (a..a + n).collect()).collect();
        self.tape.mean_pool(h, pools)
    }

    /// Music event decoder. Returns the normalized final hidden state and the
    /// output of every layer.
    fn music_stack(
        &mut self,
        x: Id,
        spans: &[(usize, usize)],
        harmony: Id,
        harmony_spans: &[(usize, usize)],
        previous: &Previous,
    ) -> (Id, Vec<Id>) {
        let cfg = &self.cfg;
        let (layers, two_stream) = (cfg.layers.music_decoder, cfg.two_stream);
        let self_groups = Rc::new(spans_groups(spans, &Mask::Causal));
        let harm_groups: Rc<Vec<Group>> = Rc::new(
            spans
                .iter()
                .zip(harmony_spans)
                .filter(|(s, h)| s.1 > 0 && h.1 > 0)
                .map(|(&(a, n), &(ha, hn))| Group {
                    queries: (a..a + n).collect(),
                    keys: (ha..ha + hn).collect(),
                    mask: Mask::Full,
                })
                .collect(),
        );
        let mut outs: Vec<Id> = Vec::with_capacity(layers);
        let mut h = x;
        for l in 0..layers {
            let bp = format!("dec_m.{l}");
            h = self.self_attn(h, &bp, self_groups.clone(), Stage::MusicSelf);
            if two_stream {
                // layer numbering starts at 1: odd layers read harmony
                if l % 2 == 0 {
                    if !harm_groups.is_empty() {
                        h = self.cross_attn(h, harmony, &bp, harm_groups.clone(), Stage::MusicCrossHarmony);
                    }
                } else {
                    let (kv, groups) = match previous {
                        Previous::Internal(map) => {
                            let g: Vec<Group> = spans
                                .iter()
                                .zip(map.iter())
                                .filter_map(|(&(a, n), p)| {
                                    let (pa, pn) = spans[(*p)?];
                                    Some(Group {
                                        queries: (a..a + n).collect(),
                                        keys: (pa..pa + pn).collect(),
                                        mask: Mask::Full,
                                    })
                                })
                                .collect();
                            (outs[l - 1], g)
                        }
                        Previous::External(ids, pspans) => {
                            let g: Vec<Group> = spans
                                .iter()
                                .zip(pspans.iter())
                                .filter_map(|(&(a, n), p)| {
                                    let (pa, pn) = (*p)?;
                                    Some(Group {
                                        queries: (a..a + n).collect(),
                                        keys: (pa..pa + pn).collect(),
                                        mask: Mask::Full,
                                    })
                                })
                                .collect();
                            (ids.get(l - 1).copied().unwrap_or(h), g)
                        }
                    };
                    let groups: Vec<Group> = groups.into_iter().filter(|g| !g.queries.is_empty() && !g.keys.is_empty()).collect();
                    if !groups.is_empty() {
                        h = self.cross_attn(h, kv, &bp, Rc::new(groups), Stage::MusicCrossPrevious);
                    }
                }
            }
            h = self.ff(h, &bp);
            outs.push(h);
        }
        (self.ln(h, "dec_m.lnf"), outs)
    }

    fn music_input(&mut self, cells: &[CellInput], ctx: Id, ctx_row: &[usize]) -> (Id, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        let mut spans = Vec::new();
        for (c, cell) in cells.iter().enumerate() {
            spans.push((ids.len(), cell.inputs.len()));
            ids.extend_from_slice(&cell.inputs);
            pos.extend(0..cell.inputs.len());
            rows.extend(std::iter::repeat(ctx_row[c]).take(cell.inputs.len()));
            meta.extend(std::iter::repeat((cell.bar_length, cell.track_id, cell.instrument)).take(cell.inputs.len()));
        }
        let tok = self.embed("tok_emb", ids);
        let pe = self.embed("evt_pos", pos);
        let cx = self.tape.gather_all(ctx, rows);
        let bl = self.embed("bar_len_emb", meta.iter().map(|m| m.0 as usize).collect());
        let tr = self.embed("track_emb", meta.iter().map(|m| m.1 as usize).collect());
        let ins = self.embed("inst_emb", meta.iter().map(|m| m.2 as usize).collect());
        (self.sum(&[tok, pe, cx, bl, tr, ins]), spans)
    }
}

impl HierModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden;
        let ff = d * config.ff_mult;
        let l = config.layers;
        let mut p = Params::new();
        p.embedding("tok_emb", config.token_vocab, d, &mut rng);
        p.embedding("evt_pos", config.events.max(config.harmony_events), d, &mut rng);
        p.embedding("bar_len_emb", config.bar_length_vocab, d, &mut rng);
        p.embedding("track_emb", config.track_vocab, d, &mut rng);
        p.embedding("inst_emb", config.instrument_vocab, d, &mut rng);
        p.embedding("slot_pos", config.tracks + 1, d, &mut rng);
        p.embedding("bar_pos", config.bars, d, &mut rng);
        p.embedding("bar_type", 2, d, &mut rng);
        p.embedding("start_b", 1, d, &mut rng);
        p.embedding("start_hb", 1, d, &mut rng);
        p.embedding("track_start", 1, d, &mut rng);
        stack_params(&mut p, "enc_e", l.event_encoder, d, ff, false, &mut rng);
        stack_params(&mut p, "enc_t", l.track_encoder, d, ff, false, &mut rng);
        stack_params(&mut p, "dec_b", l.bar_decoder, d, ff, false, &mut rng);
        stack_params(&mut p, "dec_t", l.track_decoder, d, ff, false, &mut rng);
        stack_params(&mut p, "dec_h", l.harmony_decoder, d, ff, false, &mut rng);
        stack_params(&mut p, "dec_m", l.music_decoder, d, ff, true, &mut rng);
        head_params(&mut p, "head.bar_len", d, config.bar_length_vocab, &mut rng);
        head_params(&mut p, "head.track", d, config.track_vocab, &mut rng);
        head_params(&mut p, "head.inst", d, config.instrument_vocab, &mut rng);
        head_params(&mut p, "head.harm", d, config.token_vocab, &mut rng);
        head_params(&mut p, "head.music", d, config.token_vocab, &mut rng);
        Ok(Self { config, params: p })
    }

    fn check_window(&self, w: &WindowSample) -> Result<(), ModelError> {
        let cfg = &self.config;
        let shape = |m: String| Err(ModelError::Shape(m));
        if w.bars.len() > cfg.bars {
            return shape(format!("{} bars exceed the configured {}", w.bars.len(), cfg.bars));
        }
        for (b, bar) in w.bars.iter().enumerate() {
            if bar.bar_length as usize >= cfg.bar_length_vocab {
                return shape(format!("bar {b}: length {} outside the vocabulary", bar.bar_length));
            }
            if bar.tracks.len() > cfg.tracks {
                return shape(format!("bar {b}: {} tracks exceed the configured {}", bar.tracks.len(), cfg.tracks));
            }
            if bar.harmony.is_empty() || bar.harmony.len() > cfg.harmony_events {
                return shape(format!("bar {b}: harmony cell of {} tokens", bar.harmony.len()));
            }
            if bar.harmony.iter().any(|&t| t >= VOCAB_SIZE) {
                return shape(format!("bar {b}: harmony token outside the vocabulary"));
            }
            for c in &bar.tracks {
                if c.tokens.is_empty() || c.tokens.len() > cfg.events {
                    return shape(format!("bar {b} track {}: cell of {} tokens", c.track_id, c.tokens.len()));
                }
                if c.tokens.iter().any(|&t| t >= VOCAB_SIZE) {
                    return shape(format!("bar {b} track {}: token outside the vocabulary", c.track_id));
                }
                if c.track_id as usize >= END_OF_BAR || c.instrument as usize >= cfg.instrument_vocab {
                    return shape(format!("bar {b}: track {} / instrument {} out of range", c.track_id, c.instrument));
                }
            }
        }
        Ok(())
    }

    /// Teacher-forced pass over one window, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, w: &WindowSample) -> Result<WindowOutput, ModelError> {
        self.build(tape, w, true)
    }

    fn build(&self, tape: &mut Tape, w: &WindowSample, music: bool) -> Result<WindowOutput, ModelError> {
        self.check_window(w)?;
        let map = build_track_prev_index_map(&w.track_ids())?;
        let cfg = &self.config;
        let nb = w.bars.len();
        let d = cfg.hidden;
        let mut bd = Builder::new(&self.params, &self.config, tape);
        if nb == 0 {
            let z = bd.tape.constant(Array2::zeros((0, d)));
            let loss = bd.tape.constant(Array2::zeros((1, 1)));
            return Ok(WindowOutput {
                loss,
                breakdown: LossBreakdown::default(),
                z_hb: z,
                z_b: z,
                z_t: None,
                c_hb: z,
                c_b: z,
                c_t: None,
                c_h: z,
                track_context: z,
                bar_length_logits: z,
                track_logits: z,
                instrument_logits: None,
                harmony_logits: z,
                music_logits: None,
                music_states: vec![],
                cells: vec![],
                harmony_spans: vec![],
                context_rows: vec![],
            });
        }

        // cell layout
        let mut cells = Vec::new();
        let mut cell_index: Vec<Vec<usize>> = Vec::with_capacity(nb);
        for (b, bar) in w.bars.iter().enumerate() {
            let mut row = Vec::new();
            for s in 0..bar.tracks.len() {
                row.push(cells.len());
                cells.push((b, s));
            }
            cell_index.push(row);
        }
        let nc = cells.len();

        // encoders
        let z_t = (nc > 0).then(|| {
            let enc: Vec<(&[usize], Option<(u32, u8, u8)>)> = cells
                .iter()
                .map(|&(b, s)| {
                    let c = &w.bars[b].tracks[s];
                    (c.tokens.as_slice(), Some((w.bars[b].bar_length, c.track_id, c.instrument)))
                })
                .collect();
            bd.encode_events(&enc, Stage::EventEncoder)
        });
        let henc: Vec<(&[usize], Option<(u32, u8, u8)>)> =
            w.bars.iter().map(|b| (b.harmony.as_slice(), None)).collect();
        let z_hb = bd.encode_events(&henc, Stage::HarmonyEncoder);

        let z_b = match z_t {
            Some(zt) => {
                let sp = bd.embed("slot_pos", cells.iter().map(|c| c.1).collect());
                let x = bd.tape.add(zt, sp);
                let groups = cell_index
                    .iter()
                    .filter(|r| !r.is_empty())
                    .map(|r| Group {
                        queries: r.clone(),
                        keys: r.clone(),
                        mask: Mask::Full,
                    })
                    .collect();
                let h = bd.stack(x, "enc_t", cfg.layers.track_encoder, groups, Stage::TrackEncoder);
                bd.tape.mean_pool(h, cell_index.clone())
            }
            None => bd.tape.constant(Array2::zeros((nb, d))),
        };

        // bar decoder over [harmony bars; music bars]
        let bp = bd.embed("bar_pos", (0..nb).collect());
        let th = bd.embed("bar_type", vec![0; nb]);
        let tm = bd.embed("bar_type", vec![1; nb]);
        let hx = bd.sum(&[z_hb, bp, th]);
        let mx = bd.sum(&[z_b, bp, tm]);
        let x = bd.tape.concat(vec![hx, mx]);
        let la = cfg.harmony_lookahead.unwrap_or(nb);
        let n2 = 2 * nb;
        let mut mask = vec![false; n2 * n2];
        for i in 0..nb {
            for j in 0..=i {
                mask[i * n2 + j] = true;
            }
            for j in 0..nb.min(i.saturating_add(la) + 1) {
                mask[(nb + i) * n2 + j] = true;
            }
            for j in 0..=i {
                mask[(nb + i) * n2 + nb + j] = true;
            }
        }
        let group = Group {
            queries: (0..n2).collect(),
            keys: (0..n2).collect(),
            mask: Mask::Custom(Rc::new(mask)),
        };
        let c = bd.stack(x, "dec_b", cfg.layers.bar_decoder, vec![group], Stage::BarDecoder);
        let c_hb = bd.tape.gather_all(c, 0..nb);
        let c_b = bd.tape.gather_all(c, nb..n2);
        let sc_b = bd.shift(c_b, "start_b", nb);
        let sc_hb = bd.shift(c_hb, "start_hb", nb);

        // track decoder
        let c_t = z_t.map(|zt| {
            let bc = bd.tape.gather_all(sc_b, cells.iter().map(|c| c.0));
            let sp = bd.embed("slot_pos", cells.iter().map(|c| c.1).collect());
            let x = bd.sum(&[bc, zt, sp]);
            let groups = cell_index
                .iter()
                .filter(|r| !r.is_empty())
                .map(|r| Group {
                    queries: r.clone(),
                    keys: r.clone(),
                    mask: Mask::Causal,
                })
                .collect();
            bd.stack(x, "dec_t", cfg.layers.track_decoder, groups, Stage::TrackDecoder)
        });

        // track context: slot 0 from the bar context, slot s from track s-1
        let ts = bd.p("track_start");
        let first = bd.tape.add_row(sc_b, ts);
        let src = match c_t {
            Some(ct) => bd.tape.concat(vec![first, ct]),
            None => first,
        };
        let mut gather = Vec::new();
        let mut context_rows = Vec::with_capacity(nb);
        for (b, idx) in cell_index.iter().enumerate() {
            let mut rows = Vec::with_capacity(idx.len() + 1);
            for s in 0..=idx.len() {
                rows.push(gather.len());
                gather.push(if s == 0 { b } else { nb + idx[s - 1] });
            }
            context_rows.push(rows);
        }
        let ctx = bd.tape.gather_all(src, gather);

        // metadata heads
        let bar_length_logits = bd.linear(sc_b, "head.bar_len");
        let track_logits = bd.linear(ctx, "head.track");
        let ce_bar = bd.tape.cross_entropy(
            bar_length_logits,
            w.bars.iter().map(|b| Some(b.bar_length as usize)).collect(),
        );
        let mut track_targets = Vec::new();
        for bar in &w.bars {
            track_targets.extend(bar.tracks.iter().map(|c| Some(c.track_id as usize)));
            track_targets.push(Some(END_OF_BAR));
        }
        let ce_track = bd.tape.cross_entropy(track_logits, track_targets);
        let mut meta_terms = vec![(ce_bar, 1.0), (ce_track, 1.0)];
        let instrument_logits = (nc > 0).then(|| {
            let rows: Vec<usize> = cells.iter().map(|&(b, s)| context_rows[b][s]).collect();
            let cx = bd.tape.gather_all(ctx, rows);
            let te = bd.embed(
                "track_emb",
                cells.iter().map(|&(b, s)| w.bars[b].tracks[s].track_id as usize).collect(),
            );
            let x = bd.tape.add(cx, te);
            bd.linear(x, "head.inst")
        });
        if let Some(il) = instrument_logits {
            let t = cells.iter().map(|&(b, s)| Some(w.bars[b].tracks[s].instrument as usize)).collect();
            let ce_inst = bd.tape.cross_entropy(il, t);
            meta_terms.push((ce_inst, 1.0));
        }
        let l_meta = bd.tape.weighted_sum(meta_terms);

        // harmony event decoder
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut bars = Vec::new();
        let mut harmony_spans = Vec::with_capacity(nb);
        let mut harm_targets = Vec::new();
        for (b, bar) in w.bars.iter().enumerate() {
            let inp = shifted_inputs(&bar.harmony);
            harmony_spans.push((ids.len(), inp.len()));
            pos.extend(0..inp.len());
            bars.extend(std::iter::repeat(b).take(inp.len()));
            ids.extend(inp);
            harm_targets.extend(bar.harmony.iter().map(|&t| Some(t)));
        }
        let tok = bd.embed("tok_emb", ids);
        let pe = bd.embed("evt_pos", pos);
        let hc = bd.tape.gather_all(sc_hb, bars);
        let x = bd.sum(&[tok, pe, hc]);
        let c_h = bd.stack(
            x,
            "dec_h",
            cfg.layers.harmony_decoder,
            spans_groups(&harmony_spans, &Mask::Causal),
            Stage::HarmonyDecoder,
        );
        let harmony_logits = bd.linear(c_h, "head.harm");
        let l_harm = bd.tape.cross_entropy(harmony_logits, harm_targets);

        // music event decoder
        let mut music_logits = None;
        let mut music_states = Vec::new();
        let mut spans_out = Vec::new();
        let mut l_music = None;
        if music && nc > 0 {
            let inputs: Vec<CellInput> = cells
                .iter()
                .map(|&(b, s)| {
                    let c = &w.bars[b].tracks[s];
                    CellInput {
                        inputs: shifted_inputs(&c.tokens),
                        bar_length: w.bars[b].bar_length,
                        track_id: c.track_id,
                        instrument: c.instrument,
                    }
                })
                .collect();
            let crow: Vec<usize> = cells.iter().map(|&(b, s)| context_rows[b][s]).collect();
            let (x, spans) = bd.music_input(&inputs, ctx, &crow);
            let hsp: Vec<(usize, usize)> = cells.iter().map(|&(b, _)| harmony_spans[b]).collect();
            let prev: Vec<Option<usize>> = cells
                .iter()
                .map(|&(b, s)| map.get(b, s).map(|j| cell_index[b - 1][j]))
                .collect();
            let (h, outs) = bd.music_stack(x, &spans, c_h, &hsp, &Previous::Internal(&prev));
            let logits = bd.linear(h, "head.music");
            let targets = cells
                .iter()
                .flat_map(|&(b, s)| w.bars[b].tracks[s].tokens.iter().map(|&t| Some(t)))
                .collect();
            l_music = Some(bd.tape.cross_entropy(logits, targets));
            music_logits = Some(logits);
            music_states = outs;
            spans_out = cells.iter().zip(&spans).map(|(&(b, s), &(a, n))| (b, s, a, n)).collect();
        }

        let mut terms = vec![(l_meta, LOSS_META), (l_harm, LOSS_HARM)];
        if let Some(lm) = l_music {
            terms.push((lm, LOSS_MUSIC));
        }
        let loss = bd.tape.weighted_sum(terms);
        let breakdown = LossBreakdown::new(
            bd.tape.scalar(l_meta),
            bd.tape.scalar(l_harm),
            l_music.map_or(0.0, |l| bd.tape.scalar(l)),
        );
        Ok(WindowOutput {
            loss,
            breakdown,
            z_hb,
            z_b,
            z_t,
            c_hb,
            c_b,
            c_t,
            c_h,
            track_context: ctx,
            bar_length_logits,
            track_logits,
            instrument_logits,
            harmony_logits,
            music_logits,
            music_states,
            cells: spans_out,
            harmony_spans,
            context_rows,
        })
    }

    /// Mean loss over a batch, recorded on a fresh tape.
    pub fn batch_loss(&self, windows: &[WindowSample]) -> Result<(Tape, Id, LossBreakdown), ModelError> {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(windows.len());
        let mut acc = LossBreakdown::default();
        let k = windows.len().max(1) as f64;
        for w in windows {
            let out = self.forward(&mut tape, w)?;
            terms.push((out.loss, 1.0 / k));
            acc.l_meta += out.breakdown.l_meta / k;
            acc.l_harm += out.breakdown.l_harm / k;
            acc.l_music += out.breakdown.l_music / k;
        }
        let root = tape.weighted_sum(terms);
        Ok((tape, root, LossBreakdown::new(acc.l_meta, acc.l_harm, acc.l_music)))
    }

    /// Loss and parameter gradients of a batch.
    pub fn gradients(&self, windows: &[WindowSample]) -> Result<(LossBreakdown, Vec<Option<Array2<f64>>>), ModelError> {
        let (tape, root, br) = self.batch_loss(windows)?;
        Ok((br, tape.backward(root, self.params.len())))
    }

    /// Intermediate features padded to `[B, T, E_h, D]`.
    pub fn activations(&self, w: &WindowSample) -> Result<ActivationBundle, ModelError> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, w, false)?;
        let cfg = &self.config;
        let (b, t, eh, d) = (cfg.bars, cfg.tracks, cfg.harmony_events, cfg.hidden);
        let pad2 = |id: Id| {
            let mut a = Array2::zeros((b, d));
            let v = tape.value(id);
            a.slice_mut(s![..v.nrows(), ..]).assign(v);
            a
        };
        let mut z_t = Array3::zeros((b, t, d));
        let mut c_t = Array3::zeros((b, t, d));
        let mut i = 0;
        for (bi, bar) in w.bars.iter().enumerate() {
            for s in 0..bar.tracks.len() {
                if let (Some(zt), Some(ct)) = (out.z_t, out.c_t) {
                    z_t.slice_mut(s![bi, s, ..]).assign(&tape.value(zt).row(i));
                    c_t.slice_mut(s![bi, s, ..]).assign(&tape.value(ct).row(i));
                }
                i += 1;
            }
        }
        let mut c_h = Array3::zeros((b, eh, d));
        let ch = tape.value(out.c_h);
        for (bi, &(a, n)) in out.harmony_spans.iter().enumerate() {
            c_h.slice_mut(s![bi, ..n, ..]).assign(&ch.slice(s![a..a + n, ..]));
        }
        Ok(ActivationBundle {
            z_hb: pad2(out.z_hb),
            z_t,
            z_b: pad2(out.z_b),
            c_hb: pad2(out.c_hb),
            c_b: pad2(out.c_b),
            c_t,
            c_h,
        })
    }

    /// Contexts for inference: bars after the one being generated may be
    /// empty; causality makes their content irrelevant.
    pub fn contexts(&self, w: &WindowSample) -> Result<Contexts, ModelError> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, w, false)?;
        let ctx = tape.value(out.track_context);
        let tl = tape.value(out.track_logits);
        let ch = tape.value(out.c_h);
        let rows = |m: &Array2<f64>, r: &[usize]| {
            Array2::from_shape_fn((r.len(), m.ncols()), |(i, j)| m[[r[i], j]])
        };
        Ok(Contexts {
            bar_length_logits: tape.value(out.bar_length_logits).clone(),
            track_context: out.context_rows.iter().map(|r| rows(ctx, r)).collect(),
            track_logits: out.context_rows.iter().map(|r| rows(tl, r)).collect(),
            harmony: out
                .harmony_spans
                .iter()
                .map(|&(a, n)| ch.slice(s![a..a + n, ..]).to_owned())
                .collect(),
        })
    }

    /// Instrument logits for a slot once its track id is known.
    pub fn instrument_logits(&self, context: ArrayView1<f64>, track_id: u8) -> Array1<f64> {
        let te = self.params.get("track_emb").expect("track_emb");
        let w = self.params.get("head.inst.w").expect("head.inst.w");
        let b = self.params.get("head.inst.b").expect("head.inst.b");
        let x = &context + &te.row(track_id as usize);
        x.dot(w) + b.row(0)
    }

    /// Runs the music decoder on cells with explicitly supplied contexts.
    pub fn decode_cells(&self, req: &DecodeRequest) -> Result<DecodeOutput, ModelError> {
        let n = req.cells.len();
        if req.context.nrows() != n || req.harmony_spans.len() != n || req.previous_spans.len() != n {
            return Err(ModelError::Shape("decode request arrays disagree on the cell count".into()));
        }
        for c in req.cells {
            if c.inputs.is_empty() || c.inputs.len() > self.config.events.max(self.config.harmony_events) {
                return Err(ModelError::Shape(format!("cell of {} inputs", c.inputs.len())));
            }
            if c.inputs.iter().any(|&t| t >= self.config.token_vocab) {
                return Err(ModelError::Shape("input token outside the vocabulary".into()));
            }
        }
        for &(a, k) in req.harmony_spans {
            if a + k > req.harmony.nrows() {
                return Err(ModelError::Shape("harmony span outside the harmony context".into()));
            }
        }
        let wants_prev = req.previous_spans.iter().any(Option::is_some);
        if wants_prev && req.previous.len() + 1 < self.config.layers.music_decoder {
            return Err(ModelError::Shape("previous-bar states missing layers".into()));
        }
        for (a, k) in req.previous_spans.iter().flatten() {
            if req.previous.iter().any(|p| a + k > p.nrows()) {
                return Err(ModelError::Shape("previous span outside the previous-bar states".into()));
            }
        }
        let mut tape = Tape::new();
        let mut bd = Builder::new(&self.params, &self.config, &mut tape);
        let ctx = bd.tape.constant(req.context.clone());
        let harm = bd.tape.constant(req.harmony.clone());
        let prev_ids: Vec<Id> = req.previous.iter().map(|p| bd.tape.constant(p.clone())).collect();
        let (x, spans) = bd.music_input(req.cells, ctx, &(0..n).collect::<Vec<_>>());
        let (h, outs) = bd.music_stack(x, &spans, harm, req.harmony_spans, &Previous::External(prev_ids, req.previous_spans));
        let logits = bd.linear(h, "head.music");
        Ok(DecodeOutput {
            logits: tape.value(logits).clone(),
            states: outs.iter().map(|&o| tape.value(o).clone()).collect(),
            spans,
        })
    }

    /// BOS-prefixed decoder inputs for a finished token list.
    pub fn decoder_inputs(tokens: &[usize]) -> Vec<usize> {
        shifted_inputs(tokens)
    }
}
