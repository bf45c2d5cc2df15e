//! Reverse-mode automatic differentiation over 2-D f64 arrays.
//!
//! Every tensor is a matrix; rows index tokens, cells, tracks or bars and
//! columns index features. Scalars are 1x1.

use super::params::Params;
use ndarray::{s, Array2, Axis};
use std::collections::BTreeMap;
use std::rc::Rc;

pub type Id = usize;

/// Which model stage an attention call belongs to, for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    EventEncoder,
    HarmonyEncoder,
    TrackEncoder,
    BarDecoder,
    TrackDecoder,
    HarmonyDecoder,
    MusicSelf,
    MusicCrossHarmony,
    MusicCrossPrevious,
}

#[derive(Debug, Clone)]
pub enum Mask {
    Full,
    /// Query `i` sees keys `0..=i` of the group.
    Causal,
    /// Row-major `queries x keys` visibility.
    Custom(Rc<Vec<bool>>),
}

impl Mask {
    #[inline]
    fn allows(&self, qi: usize, kj: usize, nk: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Causal => kj <= qi,
            Mask::Custom(m) => m[qi * nk + kj],
        }
    }
}

/// One dense block of attention: these query rows against these key rows.
#[derive(Debug, Clone)]
pub struct Group {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub mask: Mask,
}

/// Target of a cross-entropy row; `None` rows are padding.
pub type Targets = Rc<Vec<Option<usize>>>;

/// Constants of the clipped policy-gradient surrogate.
#[derive(Debug, Clone)]
pub struct SurrogateSpec {
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Sequence index of every token.
    pub sequence: Vec<usize>,
    pub clip: f64,
    pub kl_coeff: f64,
    pub sequence_level: bool,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Id, Id),
    Add(Id, Id),
    AddRow(Id, Id),
    Scale(Id, f64),
    Gather(Id, Rc<Vec<Option<usize>>>),
    Concat(Vec<Id>),
    LayerNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Id),
    Attend {
        q: Id,
        k: Id,
        v: Id,
        groups: Rc<Vec<Group>>,
        heads: usize,
        probs: Vec<Vec<Array2<f64>>>,
    },
    MeanPool(Id, Rc<Vec<Vec<usize>>>),
    CrossEntropy {
        logits: Id,
        targets: Targets,
        softmax: Array2<f64>,
        count: usize,
    },
    LogSoftmaxPick {
        logits: Id,
        picks: Rc<Vec<usize>>,
        softmax: Array2<f64>,
    },
    WeightedSum(Vec<(Id, f64)>),
    Surrogate {
        logp: Id,
        dlogp: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Attention score entries computed per stage (dense blocks, masked or not).
pub type CostCounter = BTreeMap<Stage, u64>;

pub struct Tape {
    nodes: Vec<Node>,
    pub cost: CostCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Dense masked multi-head attention over row groups. Returns the output and
/// the attention weights of every (group, head).
pub fn attend(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    groups: &[Group],
    heads: usize,
) -> (Array2<f64>, Vec<Vec<Array2<f64>>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(groups.len());
    for g in groups {
        let (nq, nk) = (g.queries.len(), g.keys.len());
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut sc = Array2::from_elem((nq, nk), f64::NEG_INFINITY);
            for (qi, &qr) in g.queries.iter().enumerate() {
                let qv = q.slice(s![qr, cols.clone()]);
                for (kj, &kr) in g.keys.iter().enumerate() {
                    if g.mask.allows(qi, kj, nk) {
                        sc[[qi, kj]] = qv.dot(&k.slice(s![kr, cols.clone()])) * scale;
                    }
                }
            }
            let p = softmax_rows(&sc);
            for (qi, &qr) in g.queries.iter().enumerate() {
                for (kj, &kr) in g.keys.iter().enumerate() {
                    let w = p[[qi, kj]];
                    if w != 0.0 {
                        let src = v.slice(s![kr, cols.clone()]);
                        let mut dst = out.slice_mut(s![qr, cols.clone()]);
                        dst.scaled_add(w, &src);
                    }
                }
            }
            per_head.push(p);
        }
        probs.push(per_head);
    }
    (out, probs)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            cost: CostCounter::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Id {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: Id) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: Id) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Id {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, params: &Params, index: usize) -> Id {
        self.push(params.value(index).clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a 1-row tensor to every row of `a`.
    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Selects rows of `a`; `None` produces a zero row.
    pub fn gather(&mut self, a: Id, rows: Vec<Option<usize>>) -> Id {
        let src = self.value(a);
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                v.row_mut(i).assign(&src.row(*r));
            }
        }
        self.push(v, Op::Gather(a, Rc::new(rows)))
    }

    pub fn gather_all(&mut self, a: Id, rows: impl IntoIterator<Item = usize>) -> Id {
        self.gather(a, rows.into_iter().map(Some).collect())
    }

    pub fn concat(&mut self, parts: Vec<Id>) -> Id {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let x = self.value(p);
            v.slice_mut(s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        self.push(v, Op::Concat(parts))
    }

    pub fn layer_norm(&mut self, x: Id, gamma: Id, beta: Id) -> Id {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Id) -> Id {
        let v = self.value(x).mapv(|a| gelu(a).0);
        self.push(v, Op::Gelu(x))
    }

    /// Multi-head attention core on projected queries, keys and values.
    pub fn attend(&mut self, q: Id, k: Id, v: Id, groups: Rc<Vec<Group>>, heads: usize, stage: Stage) -> Id {
        let entries: u64 = groups
            .iter()
            .map(|g| (g.queries.len() * g.keys.len() * heads) as u64)
            .sum();
        *self.cost.entry(stage).or_default() += entries;
        let (out, probs) = attend(self.value(q), self.value(k), self.value(v), &groups, heads);
        self.push(
            out,
            Op::Attend {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        )
    }

    /// Mean of each row group; an empty group gives a zero row.
    pub fn mean_pool(&mut self, x: Id, groups: Vec<Vec<usize>>) -> Id {
        let xv = self.value(x);
        let mut v = Array2::zeros((groups.len(), xv.ncols()));
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let mut row = v.row_mut(i);
            for &r in g {
                row += &xv.row(r);
            }
            row /= g.len() as f64;
        }
        self.push(v, Op::MeanPool(x, Rc::new(groups)))
    }

    /// Mean cross-entropy over rows with a target; 0 when there are none.
    pub fn cross_entropy(&mut self, logits: Id, targets: Vec<Option<usize>>) -> Id {
        let lv = self.value(logits);
        let softmax = softmax_rows(lv);
        let count = targets.iter().flatten().count();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                loss -= softmax[[i, *t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets),
                softmax,
                count,
            },
        )
    }

    /// Log-probability of the picked column of each row, as a column vector.
    pub fn log_softmax_pick(&mut self, logits: Id, picks: Vec<usize>) -> Id {
        let lv = self.value(logits);
        let mut v = Array2::zeros((picks.len(), 1));
        for (i, &p) in picks.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            v[[i, 0]] = row[p] - lse;
        }
        let softmax = softmax_rows(lv);
        self.push(
            v,
            Op::LogSoftmaxPick {
                logits,
                picks: Rc::new(picks),
                softmax,
            },
        )
    }

    /// Σ wᵢ·xᵢ over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Id, f64)>) -> Id {
        let v: f64 = terms.iter().map(|&(id, w)| w * self.scalar(id)).sum();
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(terms))
    }

    /// Negated clipped surrogate plus KL penalty (the quantity to minimize).
    ///
    /// Token level: mean over tokens of
    /// `-min(r·A, clip(r)·A) + β·(exp(ref-lp) - (ref-lp) - 1)`.
    /// Sequence level uses one ratio per sequence from the summed log-ratio.
    pub fn surrogate(&mut self, logp: Id, spec: SurrogateSpec) -> Id {
        let lp: Vec<f64> = self.value(logp).column(0).to_vec();
        let n = lp.len();
        let mut dlogp = vec![0.0; n];
        let mut loss = 0.0;
        if n > 0 {
            let clipped = |r: f64| r.clamp(1.0 - spec.clip, 1.0 + spec.clip);
            if spec.sequence_level {
                let seqs = spec.sequence.iter().copied().max().map_or(0, |m| m + 1);
                let mut logr = vec![0.0; seqs];
                let mut len = vec![0usize; seqs];
                for i in 0..n {
                    logr[spec.sequence[i]] += lp[i] - spec.old_logp[i];
                    len[spec.sequence[i]] += 1;
                }
                let mut adv = vec![0.0; seqs];
                for i in 0..n {
                    adv[spec.sequence[i]] = spec.advantages[i];
                }
                let active = len.iter().filter(|&&l| l > 0).count() as f64;
                for sq in 0..seqs {
                    if len[sq] == 0 {
                        continue;
                    }
                    let r = logr[sq].exp();
                    let (a, b) = (r * adv[sq], clipped(r) * adv[sq]);
                    loss -= a.min(b) / active;
                    // gradient flows only through the unclipped branch when it is the minimum
                    if a <= b {
                        for i in (0..n).filter(|&i| spec.sequence[i] == sq) {
                            dlogp[i] -= r * adv[sq] / active;
                        }
                    }
                }
            } else {
                for i in 0..n {
                    let r = (lp[i] - spec.old_logp[i]).exp();
                    let adv = spec.advantages[i];
                    let (a, b) = (r * adv, clipped(r) * adv);
                    loss -= a.min(b) / n as f64;
                    if a <= b {
                        dlogp[i] -= r * adv / n as f64;
                    }
                }
            }
            for i in 0..n {
                let d = spec.ref_logp[i] - lp[i];
                loss += spec.kl_coeff * (d.exp() - d - 1.0) / n as f64;
                // d/dlp of exp(d) - d - 1 with d = ref - lp
                dlogp[i] += spec.kl_coeff * (1.0 - d.exp()) / n as f64;
            }
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Surrogate { logp, dlogp },
        )
    }

    /// Backpropagates from scalar `root` and returns gradients for every
    /// parameter, indexed like `Params`.
    pub fn backward(&self, root: Id, n_params: usize) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Array2::ones((1, 1)));
        let mut out: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();
        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => acc(&mut out[*i], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[*a], ga);
                    acc(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[*b], g.clone());
                    acc(&mut grads[*a], g);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads[*r], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads[*a], g);
                }
                Op::Scale(a, c) => acc(&mut grads[*a], g * *c),
                Op::Gather(a, rows) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            let mut dst = ga.row_mut(*r);
                            dst += &g.row(i);
                        }
                    }
                    acc(&mut grads[*a], ga);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads[p], g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    acc(&mut grads[*beta], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut grads[*gamma],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &g * gv;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.dot(&xh) / n;
                        for j in 0..row.len() {
                            row[j] = inv_std[i] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
                        }
                    }
                    acc(&mut grads[*x], dx);
                }
                Op::Gelu(x) => {
                    let d = self.value(*x).mapv(|a| gelu(a).1);
                    acc(&mut grads[*x], g * d);
                }
                Op::Attend {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (gi, grp) in groups.iter().enumerate() {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[gi][h];
                            for (qi, &qr) in grp.queries.iter().enumerate() {
                                let go = g.slice(s![qr, cols.clone()]);
                                // dP and dV
                                let mut dp = vec![0.0; grp.keys.len()];
                                for (kj, &kr) in grp.keys.iter().enumerate() {
                                    let w = p[[qi, kj]];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    dp[kj] = go.dot(&vv.slice(s![kr, cols.clone()]));
                                    gv.slice_mut(s![kr, cols.clone()]).scaled_add(w, &go);
                                }
                                let dot: f64 = (0..grp.keys.len()).map(|kj| p[[qi, kj]] * dp[kj]).sum();
                                for (kj, &kr) in grp.keys.iter().enumerate() {
                                    let w = p[[qi, kj]];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let ds = w * (dp[kj] - dot) * scale;
                                    gq.slice_mut(s![qr, cols.clone()])
                                        .scaled_add(ds, &kv.slice(s![kr, cols.clone()]));
                                    gk.slice_mut(s![kr, cols.clone()])
                                        .scaled_add(ds, &qv.slice(s![qr, cols.clone()]));
                                }
                            }
                        }
                    }
                    acc(&mut grads[*q], gq);
                    acc(&mut grads[*k], gk);
                    acc(&mut grads[*v], gv);
                }
                Op::MeanPool(x, groups) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for (i, grp) in groups.iter().enumerate() {
                        for &r in grp {
                            gx.row_mut(r).scaled_add(1.0 / grp.len() as f64, &g.row(i));
                        }
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    softmax,
                    count,
                } => {
                    let mut gl = Array2::zeros(softmax.raw_dim());
                    if *count > 0 {
                        let c = g[[0, 0]] / *count as f64;
                        for (i, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                let mut row = gl.row_mut(i);
                                row.scaled_add(c, &softmax.row(i));
                                row[*t] -= c;
                            }
                        }
                    }
                    acc(&mut grads[*logits], gl);
                }
                Op::LogSoftmaxPick {
                    logits,
                    picks,
                    softmax,
                } => {
                    let mut gl = Array2::zeros(softmax.raw_dim());
                    for (i, &p) in picks.iter().enumerate() {
                        let c = g[[i, 0]];
                        let mut row = gl.row_mut(i);
                        row.scaled_add(-c, &softmax.row(i));
                        row[p] += c;
                    }
                    acc(&mut grads[*logits], gl);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        acc(&mut grads[t], Array2::from_elem((1, 1), w * g[[0, 0]]));
                    }
                }
                Op::Surrogate { logp, dlogp } => {
                    let gl = Array2::from_shape_vec((dlogp.len(), 1), dlogp.iter().map(|d| d * g[[0, 0]]).collect())
                        .expect("column shape");
                    acc(&mut grads[*logp], gl);
                }
            }
        }
        out
    }
}
