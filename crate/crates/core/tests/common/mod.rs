//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use harmorch::harmony::{ChordTemplate, HarmonySkeleton};
use harmorch::score::{Bar, NoteEvent, Score, TrackBar};
use rand::Rng;

/// Random score with up to `max_tracks` tracks and pitches in `lo..=hi`.
pub fn random_score<R: Rng>(rng: &mut R, bars: usize, max_tracks: u8, lo: u8, hi: u8) -> Score {
    let lens = [16u32, 24, 32, 32, 32, 48];
    let bars = (0..bars)
        .map(|_| {
            let len = lens[rng.gen_range(0..lens.len())];
            let mut bar = Bar::new(len);
            for tid in 0..max_tracks {
                if rng.gen_bool(0.3) {
                    continue;
                }
                let n = rng.gen_range(0..8);
                let events = (0..n)
                    .map(|_| {
                        NoteEvent::new(
                            rng.gen_range(lo..=hi),
                            rng.gen_range(0..len),
                            [1u32, 2, 4, 4, 8, 8, 12, 16, 32][rng.gen_range(0..9)],
                        )
                    })
                    .collect();
                bar.tracks.push(TrackBar::new(tid, rng.gen_range(0..128), events));
            }
            bar
        })
        .collect();
    Score::new(bars)
}

fn ic(a: u8, b: u8) -> u8 {
    let d = (a as i32 - b as i32).rem_euclid(12) as u8;
    d.min(12 - d)
}

/// Exhaustive subset enumeration: the maximum-size admissible extension set,
/// smallest in ascending lexicographic order among ties.
pub fn brute_extensions(present: u16, template: &[u8]) -> Vec<u8> {
    let cands: Vec<u8> = (0..12u8)
        .filter(|&pc| present >> pc & 1 == 1 && !template.contains(&pc))
        .collect();
    let mut best: Option<Vec<u8>> = None;
    for mask in 0u32..(1 << cands.len()) {
        let s: Vec<u8> = cands
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &c)| c)
            .collect();
        let ok = s.iter().all(|&e| {
            template
                .iter()
                .chain(s.iter())
                .all(|&t| t == e || !matches!(ic(e, t), 1 | 2))
        });
        if !ok {
            continue;
        }
        best = match best {
            None => Some(s),
            Some(b) if s.len() > b.len() || (s.len() == b.len() && s < b) => Some(s),
            b => b,
        };
    }
    best.unwrap_or_default()
}

/// Cosine similarity of every template, listed in generation order.
pub fn all_similarities(hist: &[f64; 12]) -> Vec<(ChordTemplate, f64)> {
    let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    ChordTemplate::all()
        .map(|t| {
            let ind: Vec<f64> = (0..12u8)
                .map(|pc| if t.pcs().contains(pc) { 1.0 } else { 0.0 })
                .collect();
            let dot: f64 = ind.iter().zip(hist).map(|(a, b)| a * b).sum();
            let tn = ind.iter().map(|x| x * x).sum::<f64>().sqrt();
            (t, dot / (norm * tn))
        })
        .collect()
}

/// Brute-force template choice with the documented tie-break.
pub fn brute_template(hist: &[f64; 12]) -> ChordTemplate {
    let sims = all_similarities(hist);
    let top = sims.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    sims.into_iter()
        .filter(|s| (s.1 - top).abs() < 1e-12)
        .map(|s| s.0)
        .min_by_key(|t| (t.pcs().len(), t.root, t.quality))
        .unwrap()
}

/// The dissonance score computed term by term over explicit note pairs at every grid step.
/// Returns (total, mean H-N term, mean N-N term).
pub fn naive_d_total(
    score: &Score,
    sk: &HarmonySkeleton,
    lambda: (f64, f64),
    weight: impl Fn(u8, u8) -> f64,
) -> (f64, f64, f64) {
    let notes = score.placed_notes();
    let steps = score.total_length();
    let (mut shn, mut snn) = (0.0, 0.0);
    for t in 0..steps {
        let allowed = sk.beat_at(t).map(|b| b.allowed());
        let mut h = Vec::new();
        let mut n = Vec::new();
        for x in notes.iter().filter(|x| x.start <= t && t < x.start + x.duration) {
            if allowed.is_some_and(|a| a.contains(x.pitch % 12)) {
                h.push(x.pitch);
            } else {
                n.push(x.pitch);
            }
        }
        let (hl, nl) = (h.len() as f64, n.len() as f64);
        for &a in &h {
            for &b in &n {
                shn += weight(a, b) / (hl * nl);
            }
        }
        for &a in &n {
            for &b in &n {
                snn += 0.5 * weight(a, b) / (nl * nl);
            }
        }
    }
    let total = lambda.0 * shn + lambda.1 * snn;
    if steps == 0 {
        return (total, 0.0, 0.0);
    }
    (total, shn / steps as f64, snn / steps as f64)
}

/// Tokenized window of a random score, analyzed against its own skeleton.
pub fn random_window<R: Rng>(
    rng: &mut R,
    cfg: &harmorch::hiermodel::ModelConfig,
    bars: usize,
) -> harmorch::hiermodel::WindowSample {
    let score = random_score(rng, bars, cfg.tracks as u8, 40, 90);
    let sk = harmorch::harmony::analyze_skeleton(&score);
    harmorch::hiermodel::WindowSample::from_score(&score, &sk, cfg).unwrap().0
}
