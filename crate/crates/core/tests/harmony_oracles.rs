mod common;

use common::{all_similarities, brute_extensions, brute_template, random_score};
use harmorch::harmony::{
    analyze_skeleton, filter_skeleton, find_extensions, interval_class, match_template,
    precision_recall, prune_to_template, ChordTemplate, FilterConfig, HarmonyBeat, HarmonySkeleton,
    PcSet, Quality, RejectReason,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn extensions_match_exhaustive_search_on_every_case() {
    let mut checked = 0usize;
    for t in ChordTemplate::all() {
        let tpcs = t.pcs().to_vec();
        for present in 0u16..4096 {
            let got = find_extensions(PcSet(present), &t).to_vec();
            assert_eq!(got, brute_extensions(present, &tpcs), "{t} present {present:#05x}");
            checked += 1;
        }
    }
    assert_eq!(checked, 4096 * 108);
}

#[test]
fn extensions_are_sound() {
    for t in ChordTemplate::all() {
        let tpcs = t.pcs();
        for present in (0u16..4096).step_by(7) {
            let ext = find_extensions(PcSet(present), &t);
            assert!(ext.intersection(tpcs).is_empty());
            for e in ext.iter() {
                for o in ext.union(tpcs).iter().filter(|&o| o != e) {
                    assert!(!matches!(interval_class(e, o), 1 | 2));
                }
            }
        }
    }
}

#[test]
fn template_examples_against_brute_force() {
    let mut h = [0.0; 12];
    h[0] = 8.0;
    h[4] = 4.0;
    assert_eq!(match_template(&h).unwrap().0, brute_template(&h));

    // {0,3,4,7} equal mass: listing confirms Cmaj and Cmin share the maximum.
    let mut h = [0.0; 12];
    for pc in [0, 3, 4, 7] {
        h[pc] = 1.0;
    }
    let sims = all_similarities(&h);
    let top = sims.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let tied: Vec<ChordTemplate> = sims.iter().filter(|s| (s.1 - top).abs() < 1e-12).map(|s| s.0).collect();
    assert!(tied.contains(&ChordTemplate::new(0, Quality::Maj)));
    assert!(tied.contains(&ChordTemplate::new(0, Quality::Min)));
    assert_eq!(match_template(&h).unwrap().0, ChordTemplate::new(0, Quality::Maj));
}

#[test]
fn pure_chords_match_themselves_exactly() {
    for t in ChordTemplate::all() {
        let mut h = [0.0; 12];
        for pc in t.pcs().iter() {
            h[pc as usize] = 5.0;
        }
        let (got, sim) = match_template(&h).unwrap();
        assert_eq!(sim, 1.0);
        // Aug and dim7 are symmetric: every inversion is the same pitch-class set.
        assert_eq!(got.pcs(), t.pcs());
        if !matches!(t.quality, Quality::Aug | Quality::Dim7) {
            assert_eq!(got, t);
        }
    }
}

fn beat(i: usize, root: u8, q: Quality, tones: &[u8]) -> HarmonyBeat {
    HarmonyBeat {
        beat_index: i,
        template: Some(ChordTemplate::new(root, q)),
        extensions: PcSet::EMPTY,
        tones: tones.to_vec(),
    }
}

fn skeleton(bars: usize, per_bar: impl Fn(usize, usize) -> (u8, Quality, Vec<u8>)) -> HarmonySkeleton {
    let beats = (0..bars * 4)
        .map(|i| {
            let (r, q, tones) = per_bar(i / 4, i % 4);
            beat(i, r, q, &tones)
        })
        .collect();
    HarmonySkeleton {
        beats,
        bar_lengths: vec![32; bars],
    }
}

#[test]
fn held_triads_fail_repetition() {
    let sk = skeleton(32, |_, _| (0, Quality::Maj, vec![60, 64, 67]));
    let v = filter_skeleton(&sk, &FilterConfig::default());
    assert!(!v.accepted);
    assert!(v.reasons.contains(&RejectReason::Repetition));
    assert!(!v.reasons.contains(&RejectReason::Density));
}

#[test]
fn thin_beats_fail_density() {
    let sk = skeleton(8, |bar, b| {
        let tones = [vec![60, 64], vec![64, 67], vec![60, 67], vec![48, 64]][(bar + b) % 4].clone();
        (0, Quality::Maj, tones)
    });
    let v = filter_skeleton(&sk, &FilterConfig::default());
    assert_eq!(v.reasons, vec![RejectReason::Density]);
    assert_eq!(v.mean_tones_per_beat, 2.0);
}

#[test]
fn alternating_dominant_tonic_is_accepted_with_cadences() {
    // voicings vary every beat so no beat repeats its predecessor
    let sk = skeleton(32, |bar, b| {
        if bar % 2 == 0 {
            let v = [vec![55, 59, 62], vec![59, 62, 65], vec![55, 62, 65], vec![55, 59, 65]];
            (7, Quality::Dom7, v[b].clone())
        } else {
            let v = [vec![60, 64, 67], vec![48, 60, 64], vec![48, 60, 67], vec![52, 64, 67]];
            (0, Quality::Maj, v[b].clone())
        }
    });
    sk.validate().unwrap();
    let cfg = FilterConfig {
        min_cadences_per_32_bars: Some(4),
        require_major_minor_start: false,
        ..FilterConfig::default()
    };
    let v = filter_skeleton(&sk, &cfg);
    assert_eq!(v.cadences, 16);
    assert!(v.accepted, "{v:?}");
    assert_eq!(v.max_repetition, 0.0);

    let strict = FilterConfig {
        require_major_minor_start: true,
        ..cfg
    };
    assert_eq!(filter_skeleton(&sk, &strict).reasons, vec![RejectReason::StartQuality]);
}

#[test]
fn missing_cadences_are_reported() {
    let sk = skeleton(8, |bar, b| {
        let v = [vec![60, 64, 67], vec![48, 60, 64], vec![48, 60, 67], vec![52, 64, 67]];
        ((bar as u8 * 2) % 12, Quality::Maj, v[b].clone())
    });
    let cfg = FilterConfig {
        min_cadences_per_32_bars: Some(4),
        ..FilterConfig::default()
    };
    let v = filter_skeleton(&sk, &cfg);
    assert_eq!(v.cadences, 0);
    assert_eq!(v.reasons, vec![RejectReason::Cadence]);
}

#[test]
fn analyzed_example_skeletons_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let s = random_score(&mut rng, 4, 4, 36, 84);
        let sk = analyze_skeleton(&s);
        sk.validate().unwrap();
        assert_eq!(sk.beats.len(), s.total_length().div_ceil(8) as usize);
        let js = serde_json::to_string(&sk).unwrap();
        assert_eq!(serde_json::from_str::<HarmonySkeleton>(&js).unwrap(), sk);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn template_choice_matches_brute_force(h in prop::array::uniform12(0u8..5)) {
        let hist = h.map(f64::from);
        match match_template(&hist) {
            None => prop_assert!(hist.iter().all(|&x| x == 0.0)),
            Some((t, sim)) => {
                prop_assert_eq!(t, brute_template(&hist));
                let top = all_similarities(&hist).iter().map(|s| s.1).fold(f64::MIN, f64::max);
                prop_assert!((sim - top).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_precision_recall_is_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bars = rng.gen_range(1..5);
        let s = random_score(&mut rng, bars, 3, 30, 90);
        let sk = analyze_skeleton(&s);
        prop_assert_eq!(precision_recall(&sk, &sk).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn pruning_is_idempotent_and_never_adds_tones(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_score(&mut rng, 3, 4, 40, 80);
        let sk = analyze_skeleton(&s);
        let once = prune_to_template(&sk);
        prop_assert_eq!(&prune_to_template(&once), &once);
        once.validate().unwrap();
        for (a, b) in sk.beats.iter().zip(&once.beats) {
            prop_assert_eq!(a.template, b.template);
            prop_assert!(b.extensions.is_empty());
            prop_assert!(b.tones.len() <= a.tones.len());
        }
    }
}
