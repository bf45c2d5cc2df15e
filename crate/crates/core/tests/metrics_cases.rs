mod common;

use common::random_score;
use harmorch::dissonance::{d_total, default_w, DissonanceParams};
use harmorch::harmony::{analyze_skeleton, skeleton_to_score};
use harmorch::metrics::{evaluate, melodic_movement, melodic_ornament, track_density, MetricError};
use harmorch::score::{Bar, NoteEvent, Score, TrackBar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn melody_bar(notes: &[(u8, u32, u32)]) -> Bar {
    let mut b = Bar::new(32);
    b.tracks.push(TrackBar::new(
        0,
        73,
        notes.iter().map(|&(p, o, d)| NoteEvent::new(p, o, d)).collect(),
    ));
    b
}

fn tracks_bar(active: u8, empty: u8) -> Bar {
    let mut b = Bar::new(32);
    for t in 0..active {
        b.tracks.push(TrackBar::new(t, 0, vec![NoteEvent::new(60 + t, 0, 8)]));
    }
    for t in active..active + empty {
        b.tracks.push(TrackBar::new(t, 0, vec![]));
    }
    b
}

#[test]
fn track_density_cases() {
    assert_eq!(track_density(&Score::new(vec![tracks_bar(3, 0), tracks_bar(5, 1)])).unwrap(), 4.0);
    assert_eq!(track_density(&Score::new(vec![tracks_bar(0, 4), tracks_bar(0, 2)])).unwrap(), 0.0);
    assert_eq!(track_density(&Score::new(vec![tracks_bar(10, 0); 6])).unwrap(), 10.0);
    assert!(matches!(track_density(&Score::default()), Err(MetricError::Undefined { .. })));
}

fn quarters() -> Bar {
    melody_bar(&[(72, 0, 8), (74, 8, 8), (76, 16, 8), (77, 24, 8)])
}

fn eighths() -> Bar {
    melody_bar(&(0..8).map(|i| (72 + i as u8, i * 4, 4)).collect::<Vec<_>>())
}

#[test]
fn movement_cases() {
    assert_eq!(melodic_movement(&Score::new(vec![quarters(); 4])).unwrap(), 0.0);
    assert_eq!(
        melodic_movement(&Score::new(vec![quarters(), eighths(), quarters(), eighths()])).unwrap(),
        1.0
    );
    let m = melodic_movement(&Score::new(vec![quarters(), quarters(), eighths(), eighths()])).unwrap();
    assert!((m - 1.0 / 3.0).abs() < 1e-15);
    assert!(melodic_movement(&Score::new(vec![quarters()])).is_err());
}

#[test]
fn skyline_picks_the_highest_track() {
    // the low track changes rhythm, the top line does not
    let mut bars = vec![quarters(), quarters()];
    bars[0].tracks.push(TrackBar::new(1, 32, vec![NoteEvent::new(36, 0, 32)]));
    bars[1].tracks.push(TrackBar::new(1, 32, (0..8).map(|i| NoteEvent::new(36, i * 4, 4)).collect()));
    assert_eq!(melodic_movement(&Score::new(bars)).unwrap(), 0.0);
}

#[test]
fn ornament_cases() {
    let whole = melody_bar(&[(60, 0, 32)]);
    // D E F eighths into a half-note G, in one bar of four
    let run = melody_bar(&[(62, 0, 4), (64, 4, 4), (65, 8, 4), (67, 12, 16)]);
    let s = Score::new(vec![whole.clone(), run, whole.clone(), whole.clone()]);
    assert_eq!(melodic_ornament(&s).unwrap(), 0.25);

    assert_eq!(melodic_ornament(&Score::new(vec![whole.clone(); 4])).unwrap(), 0.0);

    let leap = melody_bar(&[(60, 0, 4), (64, 4, 4), (65, 8, 4), (67, 12, 16)]);
    assert_eq!(melodic_ornament(&Score::new(vec![leap, whole.clone()])).unwrap(), 0.0);

    // direction reversal breaks the run
    let zigzag = melody_bar(&[(62, 0, 4), (64, 4, 4), (62, 8, 4), (64, 12, 16)]);
    assert_eq!(melodic_ornament(&Score::new(vec![zigzag])).unwrap(), 0.0);

    // a run crossing the bar line counts for the bar of the landing note
    let tail = melody_bar(&[(60, 0, 16), (62, 20, 4), (64, 24, 4), (65, 28, 4)]);
    let land = melody_bar(&[(67, 0, 16)]);
    let s = Score::new(vec![tail, land]);
    assert_eq!(melodic_ornament(&s).unwrap(), 0.5);
}

#[test]
fn evaluate_without_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_score(&mut rng, 4, 3, 40, 90);
    let r = evaluate(&s, None, DissonanceParams::default(), &default_w());
    assert!(r.prc.is_none() && r.rec.is_none());
    assert!(r.trk.is_some() && r.d_hn.is_some() && r.d_nn.is_some() && r.mov.is_some() && r.orn.is_some());
    let js: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert!(js["prc"].is_null() && js["rec"].is_null());
    assert!(js["absent"]["prc"].is_string());
}

#[test]
fn dataset_self_evaluation_and_shared_dissonance_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = default_w();
    for _ in 0..30 {
        let s = random_score(&mut rng, 4, 4, 30, 95);
        let sk = analyze_skeleton(&s);
        let r = evaluate(&s, Some(&sk), DissonanceParams::default(), &w);
        assert_eq!((r.prc, r.rec), (Some(1.0), Some(1.0)));
        let d = d_total(&s, &sk, DissonanceParams::default(), &w).unwrap();
        assert_eq!(r.d_hn.unwrap().to_bits(), d.d_hn.to_bits());
        assert_eq!(r.d_nn.unwrap().to_bits(), d.d_nn.to_bits());
        for v in [r.mov, r.orn, r.prc, r.rec].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((0.0..=32.0).contains(&r.trk.unwrap()));
        assert_eq!(evaluate(&s, Some(&sk), DissonanceParams::default(), &w), r);
    }
}

#[test]
fn skeleton_only_output_has_full_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let reference = analyze_skeleton(&random_score(&mut rng, 3, 3, 40, 85));
        let generated = skeleton_to_score(&reference);
        let r = evaluate(&generated, Some(&reference), DissonanceParams::default(), &default_w());
        assert_eq!(r.prc, Some(1.0));
    }
}
