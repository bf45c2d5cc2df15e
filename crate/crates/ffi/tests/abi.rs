use harmorch::dissonance::{adjust_pitch_logits, d_total, AdjustContext, DissonanceMatrix, DissonanceParams};
use harmorch::harmony::{analyze_skeleton, PcSet};
use harmorch::hiermodel::{HierModel, ModelConfig};
use harmorch::pipeline::{generate_window, SamplingConfig};
use harmorch::score::{parse_midi, write_midi, Bar, NoteEvent, Score, TrackBar};
use harmorch::tokenizer::{encode, Capacity};
use harmorch_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn progression() -> Score {
    let chords: [[u8; 3]; 4] = [[60, 64, 67], [57, 60, 64], [53, 57, 60], [55, 59, 62]];
    let bars = chords
        .chunks(2)
        .map(|pair| {
            let mut bar = Bar::new(32);
            let mut piano = Vec::new();
            for (half, chord) in pair.iter().enumerate() {
                piano.extend(chord.iter().map(|&p| NoteEvent::new(p, 16 * half as u32, 16)));
            }
            bar.tracks.push(TrackBar::new(0, 0, piano));
            bar.tracks.push(TrackBar::new(1, 33, vec![NoteEvent::new(pair[0][0] - 24, 0, 8), NoteEvent::new(61, 8, 2)]));
            bar
        })
        .collect();
    Score::new(bars)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hm_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn load(score: &Score) -> *mut HmScore {
    let midi = write_midi(score);
    let mut h = ptr::null_mut();
    assert_eq!(hm_score_from_midi(midi.as_ptr(), midi.len(), &mut h), HM_OK, "{}", last_error());
    h
}

unsafe fn export(h: *const HmScore) -> Score {
    let mut buf = HmBytes {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(hm_score_to_midi(h, &mut buf), HM_OK);
    let s = parse_midi(std::slice::from_raw_parts(buf.data, buf.len)).unwrap();
    hm_bytes_free(buf);
    s
}

unsafe fn skeleton_of(score: *const HmScore) -> *mut HmSkeleton {
    let mut sk = ptr::null_mut();
    assert_eq!(hm_skeleton_analyze(score, &mut sk), HM_OK);
    sk
}

#[test]
fn midi_round_trips_through_handles() {
    let s = progression();
    unsafe {
        let h = load(&s);
        assert_eq!(hm_score_bar_count(h), 2);
        assert_eq!(hm_score_note_count(h), s.note_count());
        assert_eq!(export(h), parse_midi(&write_midi(&s)).unwrap());
        hm_score_free(h);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let junk = b"MThd\0\0\0\x06garbage";
        let mut h = ptr::null_mut();
        assert_eq!(hm_score_from_midi(junk.as_ptr(), junk.len(), &mut h), HM_ERR_PARSE);
        assert!(h.is_null());
        assert!(last_error().contains("malformed MIDI"), "{}", last_error());

        let midi = write_midi(&progression());
        assert_eq!(hm_score_from_midi(midi.as_ptr(), midi.len(), ptr::null_mut()), HM_ERR_NULL);
        assert_eq!(hm_score_from_midi(ptr::null(), 10, &mut h), HM_ERR_NULL);
        assert_eq!(hm_score_from_midi(midi.as_ptr(), midi.len(), &mut h), HM_OK);
        assert_eq!(last_error(), "");
        hm_score_free(h);

        let bad = CString::new("{\"beats\": 3}").unwrap();
        let mut sk = ptr::null_mut();
        assert_eq!(hm_skeleton_from_json(bad.as_ptr(), &mut sk), HM_ERR_PARSE);

        // null handles are tolerated by the free and count functions
        hm_score_free(ptr::null_mut());
        hm_skeleton_free(ptr::null_mut());
        hm_model_free(ptr::null_mut());
        assert_eq!(hm_score_bar_count(ptr::null()), 0);
    }
}

#[test]
fn skeleton_json_and_self_agreement() {
    let s = progression();
    unsafe {
        let h = load(&s);
        let sk = skeleton_of(h);
        assert_eq!(hm_skeleton_beat_count(sk), analyze_skeleton(&s).beats.len());

        let mut json = ptr::null_mut();
        assert_eq!(hm_skeleton_to_json(sk, &mut json), HM_OK);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        assert_eq!(text, serde_json::to_string(&analyze_skeleton(&s)).unwrap());
        let mut back = ptr::null_mut();
        assert_eq!(hm_skeleton_from_json(json, &mut back), HM_OK);
        hm_string_free(json);

        let (mut p, mut r) = (0.0, 0.0);
        assert_eq!(hm_precision_recall(sk, back, &mut p, &mut r), HM_OK);
        assert_eq!((p, r), (1.0, 1.0));

        let mut metrics = ptr::null_mut();
        assert_eq!(hm_metrics_json(h, sk, &mut metrics), HM_OK);
        let m: serde_json::Value = serde_json::from_str(CStr::from_ptr(metrics).to_str().unwrap()).unwrap();
        hm_string_free(metrics);
        assert_eq!(m["prc"], 1.0);
        assert_eq!(m["trk"], 2.0);
        let mut bare = ptr::null_mut();
        assert_eq!(hm_metrics_json(h, ptr::null(), &mut bare), HM_OK);
        hm_string_free(bare);

        hm_score_free(h);
        hm_skeleton_free(sk);
        hm_skeleton_free(back);
    }
}

#[test]
fn dissonance_matches_library() {
    let s = progression();
    let sk_lib = analyze_skeleton(&s);
    let want = d_total(&s, &sk_lib, DissonanceParams::new(1.0, 10.0), &DissonanceMatrix::default()).unwrap();
    unsafe {
        let h = load(&s);
        let sk = skeleton_of(h);
        let mut d = HmDissonance {
            total: -1.0,
            d_hn: -1.0,
            d_nn: -1.0,
        };
        assert_eq!(hm_dissonance(h, sk, 1.0, 10.0, &mut d), HM_OK);
        assert_eq!((d.total, d.d_hn, d.d_nn), (want.total, want.d_hn, want.d_nn));
        assert!(d.total > 0.0, "the C# passing note clashes");
        assert_eq!(hm_dissonance(h, sk, -1.0, 10.0, &mut d), HM_ERR_INVALID);
        assert_eq!(hm_dissonance(h, sk, f64::NAN, 10.0, &mut d), HM_ERR_INVALID);

        // a skeleton shorter than the score
        let short = Score::new(vec![progression().bars[0].clone()]);
        let hs = load(&short);
        let sks = skeleton_of(hs);
        assert_eq!(hm_dissonance(h, sks, 1.0, 10.0, &mut d), HM_ERR_INVALID);
        assert!(last_error().contains("beyond the skeleton"));
        let (mut p, mut r) = (0.0, 0.0);
        assert_eq!(hm_precision_recall(sk, sks, &mut p, &mut r), HM_ERR_INVALID);

        hm_score_free(h);
        hm_score_free(hs);
        hm_skeleton_free(sk);
        hm_skeleton_free(sks);
    }
}

#[test]
fn tokenize_matches_encoder_and_reports_sizes() {
    let s = progression();
    let want = encode(s.bars[0].track(0).unwrap(), 32, Capacity::Custom(usize::MAX)).unwrap().ids();
    unsafe {
        let h = load(&s);
        let mut buf = vec![0u32; 64];
        let mut n = 0usize;
        assert_eq!(hm_score_tokenize(h, 0, 0, 0, buf.as_mut_ptr(), buf.len(), &mut n), HM_OK);
        assert_eq!(buf[..n].iter().map(|&t| t as usize).collect::<Vec<_>>(), want);

        let mut small = [0u32; 2];
        assert_eq!(hm_score_tokenize(h, 0, 0, 0, small.as_mut_ptr(), 2, &mut n), HM_ERR_BUFFER_TOO_SMALL);
        assert_eq!(n, want.len());
        assert_eq!(hm_score_tokenize(h, 0, 0, 3, buf.as_mut_ptr(), buf.len(), &mut n), HM_ERR_CAPACITY);
        assert_eq!(hm_score_tokenize(h, 0, 9, 0, buf.as_mut_ptr(), buf.len(), &mut n), HM_ERR_INVALID);
        assert_eq!(hm_score_tokenize(h, 5, 0, 0, buf.as_mut_ptr(), buf.len(), &mut n), HM_ERR_INVALID);
        hm_score_free(h);
    }
}

#[test]
fn logit_adjustment_matches_library() {
    let logits: Vec<f64> = (0..513).map(|i| ((i * 37) % 19) as f64 * 0.3 - 2.0).collect();
    let active = [60u8, 64, 67];
    let allowed = 0b0000_1001_0001u16; // C, E, G
    let mut want = logits.clone();
    let table = DissonanceMatrix::default().pitch_table();
    adjust_pitch_logits(
        &mut want,
        &AdjustContext {
            active: &active,
            allowed: PcSet(allowed),
            params: DissonanceParams::new(1.0, 10.0),
            weights: &table,
        },
    );
    let mut got = logits.clone();
    unsafe {
        assert_eq!(
            hm_adjust_pitch_logits(got.as_mut_ptr(), got.len(), active.as_ptr(), active.len(), allowed, 1.0, 10.0),
            HM_OK
        );
        assert_eq!(got, want);
        assert_ne!(got, logits);
        assert_eq!(hm_adjust_pitch_logits(got.as_mut_ptr(), 100, active.as_ptr(), 3, allowed, 1.0, 10.0), HM_ERR_INVALID);
        assert_eq!(hm_adjust_pitch_logits(got.as_mut_ptr(), 513, active.as_ptr(), 3, 1 << 12, 1.0, 10.0), HM_ERR_INVALID);
        let loud = [200u8];
        assert_eq!(hm_adjust_pitch_logits(got.as_mut_ptr(), 513, loud.as_ptr(), 1, allowed, 1.0, 10.0), HM_ERR_INVALID);
    }
}

#[test]
fn generation_is_seeded_and_checkpoints_round_trip() {
    let s = progression();
    let sk_lib = analyze_skeleton(&s);
    let lib_model = HierModel::new(ModelConfig::desk()).unwrap();
    let want = generate_window(
        &lib_model,
        &sk_lib,
        &SamplingConfig {
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap()
    .score;
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(hm_model_new_desk(&mut m), HM_OK);
        assert_eq!(hm_model_save(m, path.as_ptr()), HM_OK);
        let mut loaded = ptr::null_mut();
        assert_eq!(hm_model_load(path.as_ptr(), &mut loaded), HM_OK, "{}", last_error());

        let h = load(&s);
        let sk = skeleton_of(h);
        let params = HmSamplingParams {
            seed: 7,
            ..hm_sampling_defaults()
        };
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(hm_generate(m, sk, &params, &mut a), HM_OK, "{}", last_error());
        assert_eq!(hm_generate(loaded, sk, &params, &mut b), HM_OK);
        let want = parse_midi(&write_midi(&want)).unwrap();
        assert_eq!(export(a), want);
        assert_eq!(export(b), want);

        let bad = HmSamplingParams { top_p: 0.0, ..params };
        let mut c = ptr::null_mut();
        assert_eq!(hm_generate(m, sk, &bad, &mut c), HM_ERR_INVALID);

        std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
        let junk = CString::new(dir.path().join("junk.ckpt").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(hm_model_load(junk.as_ptr(), &mut none), HM_ERR_PARSE);
        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(hm_model_load(missing.as_ptr(), &mut none), HM_ERR_IO);

        for p in [h, a, b] {
            hm_score_free(p);
        }
        hm_skeleton_free(sk);
        hm_model_free(m);
        hm_model_free(loaded);
    }
}
