mod common;

use harmorch::hiermodel::{
    build_track_prev_index_map, CellInput, DecodeRequest, HierModel, LossBreakdown, ModelConfig, ModelError,
    Tape, WindowOutput, WindowSample,
};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window_with<F: Fn(&WindowSample) -> bool>(cfg: &ModelConfig, bars: usize, seed: u64, ok: F) -> WindowSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let w = common::random_window(&mut rng, cfg, bars);
        if ok(&w) {
            return w;
        }
    }
}

fn run(m: &HierModel, w: &WindowSample) -> (Tape, WindowOutput) {
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, w).unwrap();
    (tape, out)
}

fn rows(tape: &Tape, id: usize, r: std::ops::Range<usize>) -> Array2<f64> {
    tape.value(id).slice(s![r, ..]).to_owned()
}

/// Music logits rows of every cell in bars `< bar`.
fn music_before(tape: &Tape, out: &WindowOutput, bar: usize) -> Vec<Array2<f64>> {
    out.cells
        .iter()
        .filter(|c| c.0 < bar)
        .map(|&(_, _, a, n)| rows(tape, out.music_logits.unwrap(), a..a + n))
        .collect()
}

fn bump_pitch(tokens: &mut [usize]) -> bool {
    if let Some(t) = tokens.iter_mut().find(|t| **t < 128) {
        *t = (*t + 7) % 128;
        true
    } else {
        false
    }
}

#[test]
fn activation_shapes_at_desk_config() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 8, 1, |_| true);
    let a = m.activations(&w).unwrap();
    assert_eq!(a.z_t.dim(), (8, 4, 64));
    assert_eq!(a.c_t.dim(), (8, 4, 64));
    assert_eq!(a.c_h.dim(), (8, 16, 64));
    for x in [&a.z_hb, &a.z_b, &a.c_hb, &a.c_b] {
        assert_eq!(x.dim(), (8, 64));
    }
    // padded track slots pool to zero
    for (b, bar) in w.bars.iter().enumerate() {
        for t in bar.tracks.len()..4 {
            assert!(a.z_t.slice(s![b, t, ..]).iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(a, m.activations(&w).unwrap(), "forward must be deterministic");
}

#[test]
fn empty_bar_pools_to_zero() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let mut w = window_with(&cfg, 2, 2, |w| !w.bars[0].tracks.is_empty());
    w.bars[1].tracks.clear();
    let a = m.activations(&w).unwrap();
    assert!(a.z_b.row(1).iter().all(|&v| v == 0.0));
    assert!(a.z_b.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn loss_weights_combine_exactly() {
    let lb = LossBreakdown::new(1.0, 1.0, 1.0);
    assert_eq!(lb.total, 1.55);
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 3, 3, |w| w.bars.iter().all(|b| !b.tracks.is_empty()));
    let (tape, out) = run(&m, &w);
    let b = out.breakdown;
    assert!(b.l_meta > 0.0 && b.l_harm > 0.0 && b.l_music > 0.0);
    assert_eq!(b.total, 0.05 * b.l_meta + 0.5 * b.l_harm + b.l_music);
    assert!((tape.scalar(out.loss) - b.total).abs() <= 1e-15 * b.total);

    let (_, out) = run(&m, &WindowSample::default());
    assert_eq!(out.breakdown, LossBreakdown::default());
}

#[test]
fn central_differences_match_backprop() {
    let cfg = ModelConfig::gradcheck();
    let mut m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 3, 4, |w| w.bars.iter().filter(|b| b.tracks.len() >= 2).count() >= 2);
    let batch = [w];
    let (_, grads) = m.gradients(&batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-3;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while checked < 40 && attempts < 5000 {
        attempts += 1;
        let i = rng.gen_range(0..m.params.len());
        let Some(g) = &grads[i] else { continue };
        let (r, c) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
        let analytic = g[[r, c]];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let orig = m.params.value(i)[[r, c]];
        m.params.value_mut(i)[[r, c]] = orig + h;
        let lp = m.batch_loss(&batch).unwrap().2.total;
        m.params.value_mut(i)[[r, c]] = orig - h;
        let lm = m.batch_loss(&batch).unwrap().2.total;
        m.params.value_mut(i)[[r, c]] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "{}[{r},{c}]: backprop {analytic:e} vs numeric {numeric:e} (rel {rel:e})",
            m.params.name(i)
        );
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} parameters with usable gradients");
    eprintln!("gradient check: {checked} parameters, worst relative error {worst:e}");
}

#[test]
fn bar_axis_causality_under_music_perturbation() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 5, 5, |w| w.bars.iter().all(|b| !b.tracks.is_empty()));
    let (t0, o0) = run(&m, &w);
    for j in 1..5 {
        let mut p = w.clone();
        assert!(p.bars[j].tracks.iter_mut().any(|c| bump_pitch(&mut c.tokens)));
        let (t1, o1) = run(&m, &p);
        assert_eq!(music_before(&t0, &o0, j), music_before(&t1, &o1, j), "bar {j}");
        // bar-length and track heads up to bar j read only earlier bars
        assert_eq!(rows(&t0, o0.bar_length_logits, 0..j + 1), rows(&t1, o1.bar_length_logits, 0..j + 1));
        let ctx_end = o0.context_rows[j][0];
        assert_eq!(rows(&t0, o0.track_logits, 0..ctx_end + 1), rows(&t1, o1.track_logits, 0..ctx_end + 1));
        assert_eq!(t0.value(o0.harmony_logits), t1.value(o1.harmony_logits));
        // and the perturbation is visible downstream
        assert_ne!(t0.value(o0.music_logits.unwrap()), t1.value(o1.music_logits.unwrap()));
    }
}

#[test]
fn bar_axis_causality_under_harmony_perturbation() {
    let cfg = ModelConfig {
        harmony_lookahead: Some(0),
        ..ModelConfig::desk()
    };
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 5, 6, |w| w.bars.iter().all(|b| !b.tracks.is_empty() && b.harmony.len() > 2));
    let (t0, o0) = run(&m, &w);
    for j in 1..5 {
        let mut p = w.clone();
        assert!(bump_pitch(&mut p.bars[j].harmony));
        let (t1, o1) = run(&m, &p);
        assert_eq!(music_before(&t0, &o0, j), music_before(&t1, &o1, j), "bar {j}");
        let (a, _) = o0.harmony_spans[j];
        assert_eq!(rows(&t0, o0.harmony_logits, 0..a), rows(&t1, o1.harmony_logits, 0..a));
        assert_ne!(t0.value(o0.music_logits.unwrap()), t1.value(o1.music_logits.unwrap()));
    }
}

#[test]
fn full_lookahead_lets_music_plan_from_later_harmony() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 3, 7, |w| w.bars.iter().all(|b| !b.tracks.is_empty() && b.harmony.len() > 2));
    let (t0, o0) = run(&m, &w);
    let mut p = w.clone();
    bump_pitch(&mut p.bars[2].harmony);
    let (t1, o1) = run(&m, &p);
    // bar 1 reads the bar context of bar 0, which sees all harmony bars
    let a = o0.cells.iter().find(|c| c.0 == 1).unwrap();
    assert_ne!(
        rows(&t0, o0.music_logits.unwrap(), a.2..a.2 + a.3),
        rows(&t1, o1.music_logits.unwrap(), a.2..a.2 + a.3)
    );
}

#[test]
fn track_and_event_axis_causality() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 2, 8, |w| w.bars[1].tracks.len() >= 3 && w.bars[1].tracks[1].tokens.len() >= 4);
    let (t0, o0) = run(&m, &w);
    let ml = |t: &Tape, o: &WindowOutput, bar: usize, slot: usize| {
        let c = o.cells.iter().find(|c| c.0 == bar && c.1 == slot).unwrap();
        rows(t, o.music_logits.unwrap(), c.2..c.2 + c.3)
    };

    // track axis: changing slot 1 leaves slots 0 and 1's own context alone
    let mut p = w.clone();
    assert!(bump_pitch(&mut p.bars[1].tracks[1].tokens));
    let (t1, o1) = run(&m, &p);
    assert_eq!(ml(&t0, &o0, 1, 0), ml(&t1, &o1, 1, 0));
    for s in 0..=1 {
        let r = o0.context_rows[1][s];
        assert_eq!(rows(&t0, o0.track_context, r..r + 1), rows(&t1, o1.track_context, r..r + 1));
    }
    let r = o0.context_rows[1][2];
    assert_ne!(rows(&t0, o0.track_context, r..r + 1), rows(&t1, o1.track_context, r..r + 1));

    // event axis: changing token k leaves decoder rows 0..=k unchanged
    let cell = &w.bars[1].tracks[1].tokens;
    let k = cell.iter().position(|&t| t < 128).unwrap();
    let before = ml(&t0, &o0, 1, 1);
    let after = ml(&t1, &o1, 1, 1);
    assert_eq!(before.slice(s![..=k, ..]), after.slice(s![..=k, ..]));
    assert_ne!(before.slice(s![k + 1.., ..]), after.slice(s![k + 1.., ..]));
}

#[test]
fn harmony_decoder_is_causal_within_a_bar() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 1, 10, |w| w.bars[0].harmony.len() >= 4);
    let (t0, o0) = run(&m, &w);
    let mut p = w.clone();
    let k = p.bars[0].harmony.iter().position(|&t| t < 128).unwrap();
    bump_pitch(&mut p.bars[0].harmony);
    let (t1, o1) = run(&m, &p);
    let (a, n) = o0.harmony_spans[0];
    let h0 = rows(&t0, o0.harmony_logits, a..a + n);
    let h1 = rows(&t1, o1.harmony_logits, a..a + n);
    assert_eq!(h0.slice(s![..=k, ..]), h1.slice(s![..=k, ..]));
    assert_ne!(h0.slice(s![k + 1.., ..]), h1.slice(s![k + 1.., ..]));
}

fn decode_fixture(m: &HierModel, previous: &[Array2<f64>], span: Option<(usize, usize)>) -> Array2<f64> {
    let d = m.config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let context = Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0));
    let harmony = Array2::from_shape_fn((3, d), |_| rng.gen_range(-1.0..1.0));
    let cells = [CellInput {
        inputs: vec![harmorch::hiermodel::BOS_ID, 140, 260, 60],
        bar_length: 32,
        track_id: 2,
        instrument: 40,
    }];
    m.decode_cells(&DecodeRequest {
        cells: &cells,
        context: &context,
        harmony: &harmony,
        harmony_spans: &[(0, 3)],
        previous,
        previous_spans: &[span],
    })
    .unwrap()
    .logits
}

#[test]
fn previous_bar_retrieval_reads_only_the_mapped_cell() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // two previous-bar cells stacked: rows 0..5 and 5..9; the cell maps to the second
    let prev: Vec<Array2<f64>> = (0..cfg.layers.music_decoder)
        .map(|_| Array2::from_shape_fn((9, cfg.hidden), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let base = decode_fixture(&m, &prev, Some((5, 4)));
    let mut other = prev.clone();
    for p in &mut other {
        p.slice_mut(s![0..5, ..]).mapv_inplace(|v| v * -3.0 + 0.5);
    }
    assert_eq!(base, decode_fixture(&m, &other, Some((5, 4))));
    let mut mapped = prev.clone();
    mapped[0].slice_mut(s![5..9, ..]).mapv_inplace(|v| v + 1.0);
    assert_ne!(base, decode_fixture(&m, &mapped, Some((5, 4))));
    // no predecessor: the cross-attention is skipped entirely
    assert_eq!(decode_fixture(&m, &[], None), decode_fixture(&m, &prev, None));
}

#[test]
fn two_stream_mechanism_is_live() {
    let on = ModelConfig::desk();
    let off = ModelConfig {
        two_stream: false,
        ..on.clone()
    };
    let (a, b) = (HierModel::new(on.clone()).unwrap(), HierModel::new(off).unwrap());
    assert_eq!(a.params, b.params);
    for seed in 0..5 {
        let w = window_with(&on, 3, 20 + seed, |w| w.bars.iter().all(|b| !b.tracks.is_empty()));
        let (ta, oa) = run(&a, &w);
        let (tb, ob) = run(&b, &w);
        assert_ne!(ta.value(oa.music_logits.unwrap()), tb.value(ob.music_logits.unwrap()));
    }
}

#[test]
fn incremental_decoding_matches_the_teacher_forced_pass() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 3, 12, |w| {
        w.bars.iter().all(|b| !b.tracks.is_empty())
            && w.bars[2].tracks.iter().any(|c| w.bars[1].tracks.iter().any(|p| p.track_id == c.track_id))
    });
    let (tape, out) = run(&m, &w);
    let ctx = m.contexts(&w).unwrap();
    let map = build_track_prev_index_map(&w.track_ids()).unwrap();
    let logits = tape.value(out.music_logits.unwrap());
    for &(b, s, a, n) in &out.cells {
        let c = &w.bars[b].tracks[s];
        let previous: Vec<Array2<f64>> = match map.get(b, s) {
            Some(j) => {
                let &(_, _, pa, pn) = out.cells.iter().find(|x| x.0 == b - 1 && x.1 == j).unwrap();
                out.music_states.iter().map(|&id| rows(&tape, id, pa..pa + pn)).collect()
            }
            None => vec![],
        };
        let span = (!previous.is_empty()).then(|| (0, previous[0].nrows()));
        let context = ctx.track_context[b].slice(s![s..s + 1, ..]).to_owned();
        let cells = [CellInput {
            inputs: HierModel::decoder_inputs(&c.tokens),
            bar_length: w.bars[b].bar_length,
            track_id: c.track_id,
            instrument: c.instrument,
        }];
        let d = m
            .decode_cells(&DecodeRequest {
                cells: &cells,
                context: &context,
                harmony: &ctx.harmony[b],
                harmony_spans: &[(0, ctx.harmony[b].nrows())],
                previous: &previous,
                previous_spans: &[span],
            })
            .unwrap();
        let full = logits.slice(s![a..a + n, ..]);
        let diff = (&d.logits - &full).iter().fold(0.0f64, |x, v| x.max(v.abs()));
        assert!(diff < 1e-9, "cell ({b},{s}) differs by {diff}");
    }
}

#[test]
fn track_prev_index_map_examples() {
    let m = build_track_prev_index_map(&[vec![Some(3), Some(5)], vec![Some(5), Some(9)]]).unwrap();
    assert_eq!(m.map, vec![vec![None, None], vec![Some(1), None]]);
    let same = build_track_prev_index_map(&vec![vec![Some(1), Some(2), Some(4)]; 3]).unwrap();
    assert_eq!(same.map[1..], [vec![Some(0), Some(1), Some(2)], vec![Some(0), Some(1), Some(2)]]);
    let fresh = build_track_prev_index_map(&[vec![Some(1)], vec![Some(2), Some(3)]]).unwrap();
    assert_eq!(fresh.map[1], vec![None, None]);
    let padded = build_track_prev_index_map(&[vec![Some(1), None], vec![None, Some(1)]]).unwrap();
    assert_eq!(padded.map[1], vec![None, Some(0)]);
    assert!(matches!(
        build_track_prev_index_map(&[vec![Some(4), Some(4)]]),
        Err(ModelError::DuplicateTrack { bar: 0, track_id: 4 })
    ));
}

#[test]
fn oversized_windows_are_shape_errors() {
    let cfg = ModelConfig::desk();
    let m = HierModel::new(cfg.clone()).unwrap();
    let w = window_with(&cfg, 2, 13, |w| !w.bars[0].tracks.is_empty());
    let mut long = w.clone();
    long.bars = std::iter::repeat(w.bars[0].clone()).take(9).collect();
    assert!(matches!(m.forward(&mut Tape::new(), &long), Err(ModelError::Shape(_))));
    let mut fat = w.clone();
    fat.bars[0].tracks[0].tokens = vec![60; 17];
    assert!(matches!(m.forward(&mut Tape::new(), &fat), Err(ModelError::Shape(_))));
}
