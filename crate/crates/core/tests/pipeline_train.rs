use harmorch::harmony::{filter_skeleton, FilterConfig, HarmonySkeleton};
use harmorch::hiermodel::{load_checkpoint, save_checkpoint, AdamW, HierModel, ModelConfig};
use harmorch::pipeline::{
    generate_window, read_skeletons, toy_corpus, toy_windows, train, SamplingConfig, SkeletonDecoder, SkeletonStream,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn toy_corpus_overfits() {
    let cfg = ModelConfig::desk();
    let mut model = HierModel::new(cfg.clone()).unwrap();
    let data = toy_windows(&cfg).unwrap();
    let mut opt = AdamW::new(0.0);
    let mut losses = Vec::new();
    let rep = train(&mut model, &mut opt, &data, &TrainConfig::default(), |_, l| losses.push(l.total)).unwrap();
    assert!(rep.reached_target.is_some(), "final loss {:?}", rep.last);
    assert!(rep.last.total < 0.1);
    assert!(rep.first.total > 5.0);
    assert!(losses.iter().all(|l| l.is_finite()));

    // the memorized pieces come back when sampling cold
    let (score, sk) = &toy_corpus()[0];
    let g = generate_window(
        &model,
        sk,
        &SamplingConfig {
            temperature: 0.05,
            ..Default::default()
        },
    )
    .unwrap();
    let want: usize = score.note_count();
    let got = g.score.note_count();
    assert!(got.abs_diff(want) * 5 <= want, "{got} notes vs {want}");
}

#[test]
fn interrupted_training_resumes_exactly() {
    let cfg = ModelConfig {
        hidden: 16,
        heads: 2,
        ..ModelConfig::desk()
    };
    let data = toy_windows(&cfg).unwrap();
    let tc = TrainConfig {
        steps: 6,
        warmup: 2,
        target_loss: None,
        ..Default::default()
    };

    let mut straight = HierModel::new(cfg.clone()).unwrap();
    let mut opt = AdamW::new(0.01);
    train(&mut straight, &mut opt, &data, &tc, |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = HierModel::new(cfg).unwrap();
    let mut opt1 = AdamW::new(0.01);
    let half = TrainConfig {
        stop_after: Some(3),
        ..tc.clone()
    };
    let rep = train(&mut first, &mut opt1, &data, &half, |_, _| {}).unwrap();
    assert_eq!(rep.steps, 3);
    save_checkpoint(&path, &first, Some(&opt1)).unwrap();

    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.params, first.params);
    let mut resumed = ck.model;
    let mut opt2 = ck.optimizer.unwrap();
    assert_eq!(opt2.step, 3);
    train(&mut resumed, &mut opt2, &data, &tc, |_, _| {}).unwrap();
    assert_eq!(resumed.params, straight.params);
    assert_eq!(opt2.step, opt.step);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = HierModel::new(ModelConfig {
        hidden: 8,
        heads: 2,
        ..ModelConfig::desk()
    })
    .unwrap();
    save_checkpoint(&path, &m, None).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().model.params, m.params);
    bytes.truncate(bytes.len() - 9);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"nope").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn skeleton_stream_accounts_for_every_item() {
    let good: Vec<HarmonySkeleton> = toy_corpus().into_iter().map(|(_, sk)| sk).collect();
    let empty = HarmonySkeleton::default();
    let mut repetitive = good[0].clone();
    for i in 1..repetitive.beats.len() {
        let first = repetitive.beats[0].clone();
        repetitive.beats[i] = harmorch::harmony::HarmonyBeat { beat_index: i, ..first };
    }
    let items = vec![good[0].clone(), empty, good[1].clone(), repetitive, good[2].clone()];
    let expected: Vec<bool> = items
        .iter()
        .map(|s| filter_skeleton(s, &FilterConfig::default()).accepted)
        .collect();
    let mut stream = SkeletonStream::new(items.clone().into_iter(), FilterConfig::default());
    let kept: Vec<_> = stream.by_ref().collect();
    let r = &stream.report;
    assert_eq!(r.seen, 5);
    assert_eq!(r.accepted + r.rejected.len(), r.seen);
    assert_eq!(kept.len(), r.accepted);
    assert_eq!(r.accepted, expected.iter().filter(|&&a| a).count());
    assert!(r.rejected.iter().any(|(i, _)| *i == 1));
    assert!(r.rejected.iter().all(|(i, reasons)| !expected[*i] && !reasons.is_empty()));
    assert!((r.rate() - r.accepted as f64 / 5.0).abs() < 1e-12);
}

#[test]
fn skeleton_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let skeletons: Vec<HarmonySkeleton> = toy_corpus().into_iter().map(|(_, sk)| sk).collect();
    let many = dir.path().join("many.json");
    std::fs::write(&many, serde_json::to_string(&skeletons).unwrap()).unwrap();
    assert_eq!(read_skeletons(&many).unwrap(), skeletons);
    let one = dir.path().join("one.json");
    std::fs::write(&one, serde_json::to_string(&skeletons[1]).unwrap()).unwrap();
    assert_eq!(read_skeletons(&one).unwrap(), vec![skeletons[1].clone()]);
    let midi = dir.path().join("piece.mid");
    let (score, sk) = &toy_corpus()[2];
    std::fs::write(&midi, harmorch::score::write_midi(score)).unwrap();
    assert_eq!(read_skeletons(&midi).unwrap(), vec![sk.clone()]);
    std::fs::write(&one, "{").unwrap();
    assert!(read_skeletons(&one).is_err());
}

#[test]
fn skeleton_decoder_learns_the_progressions() {
    let skeletons: Vec<HarmonySkeleton> = toy_corpus().into_iter().map(|(_, sk)| sk).collect();
    let mut dec = SkeletonDecoder::new(1);
    let loss = dec.train(&skeletons, 150, 3e-3);
    assert!(loss < 0.6, "{loss}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let sk = dec.sample(4, &mut rng).unwrap();
        assert_eq!(sk.beats.len(), 16);
        assert_eq!(sk.bar_lengths, vec![32; 4]);
        sk.validate().unwrap();
        // every toy progression opens on C major
        assert_eq!(sk.beats[0].tones, vec![60, 64, 67]);
    }
}
