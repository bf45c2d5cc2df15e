use harmorch::score::{NoteEvent, TrackBar};
use harmorch::tokenizer::{decode, encode, naive_remi, Capacity, Token};
use proptest::prelude::*;

/// Reference compressor: starts from plain REMI and applies the three passes
/// one at a time on the token stream itself.
mod oracle {
    use super::Token;

    /// Grouping: merge consecutive `[Pos][Dur][Pitch]` triples that share
    /// position (and, within a position, duration).
    pub fn group(naive: &[Token]) -> Vec<(u8, Vec<(u8, Vec<u8>)>)> {
        let mut groups: Vec<(u8, Vec<(u8, Vec<u8>)>)> = Vec::new();
        for triple in naive[..naive.len() - 1].chunks(3) {
            let (Token::Pos(p), Token::Dur(d), Token::Pitch(x)) = (triple[0], triple[1], triple[2]) else {
                panic!("not a naive stream");
            };
            if groups.last().map(|g| g.0) != Some(p) {
                groups.push((p, Vec::new()));
            }
            let g = groups.last_mut().unwrap();
            match g.1.iter_mut().find(|s| s.0 == d) {
                Some(s) => s.1.push(x),
                None => g.1.push((d, vec![x])),
            }
        }
        groups
    }

    fn flatten(groups: &[(u8, Vec<(u8, Vec<u8>)>)]) -> Vec<Token> {
        let mut out = Vec::new();
        for (p, subs) in groups {
            out.push(Token::Pos(*p));
            for (d, xs) in subs {
                out.push(Token::Dur(*d));
                out.extend(xs.iter().map(|&x| Token::Pitch(x)));
            }
        }
        out.push(Token::Eot);
        out
    }

    pub fn grouped(naive: &[Token]) -> Vec<Token> {
        flatten(&group(naive))
    }

    pub fn pruned(stream: &[Token]) -> Vec<Token> {
        match stream.first() {
            Some(Token::Pos(0)) => stream[1..].to_vec(),
            _ => stream.to_vec(),
        }
    }

    /// Fusion on an already grouped and pruned stream.
    pub fn fused(stream: &[Token]) -> Vec<Token> {
        // Re-split into position groups; the first may have lost its Pos:0.
        let mut groups: Vec<(u8, Vec<Token>)> = Vec::new();
        let mut i = 0;
        if !matches!(stream.first(), Some(Token::Pos(_)) | Some(Token::Eot)) {
            groups.push((0, Vec::new()));
        }
        while i < stream.len() {
            match stream[i] {
                Token::Pos(p) => groups.push((p, Vec::new())),
                Token::Eot => break,
                t => groups.last_mut().unwrap().1.push(t),
            }
            i += 1;
        }
        let mut out = Vec::new();
        let mut suppress = false;
        for gi in 0..groups.len() {
            let (p, body) = &groups[gi];
            if !suppress && !(gi == 0 && *p == 0) {
                out.push(Token::Pos(*p));
            }
            // split body into (Dur, pitches) subgroups
            let mut subs: Vec<Vec<Token>> = Vec::new();
            for &t in body {
                if matches!(t, Token::Dur(_)) {
                    subs.push(vec![t]);
                } else {
                    subs.last_mut().unwrap().push(t);
                }
            }
            suppress = false;
            if let Some(next) = groups.get(gi + 1) {
                let gap = next.0 - p;
                if let Some(k) = subs.iter().position(|s| s[0] == Token::Dur(gap)) {
                    let mut s = subs.remove(k);
                    s[0] = Token::Legato(gap);
                    subs.push(s);
                    suppress = true;
                }
            }
            out.extend(subs.into_iter().flatten());
        }
        out.push(Token::Eot);
        out
    }

    pub fn compress(naive: &[Token]) -> Vec<Token> {
        fused(&pruned(&grouped(naive)))
    }
}

fn tb(notes: &[(u8, u32, u32)]) -> TrackBar {
    TrackBar::new(3, 40, notes.iter().map(|&(p, o, d)| NoteEvent::new(p, o, d)).collect())
}

#[test]
fn single_downbeat_note() {
    let t = tb(&[(60, 0, 8)]);
    let naive = naive_remi(&t);
    assert_eq!(naive, vec![Token::Pos(0), Token::Dur(8), Token::Pitch(60), Token::Eot]);
    let expected = oracle::compress(&naive);
    assert_eq!(expected, vec![Token::Dur(8), Token::Pitch(60), Token::Eot]);
    assert_eq!(encode(&t, 32, Capacity::Music).unwrap().tokens, expected);
}

#[test]
fn two_note_legato() {
    let t = tb(&[(60, 0, 8), (62, 8, 8)]);
    let expected = oracle::compress(&naive_remi(&t));
    assert_eq!(
        expected,
        vec![Token::Legato(8), Token::Pitch(60), Token::Dur(8), Token::Pitch(62), Token::Eot]
    );
    let s = encode(&t, 32, Capacity::Music).unwrap();
    assert_eq!(s.tokens, expected);
    assert_eq!(decode(&s.tokens, 32).unwrap(), t.events);
}

#[test]
fn triad_grouping() {
    let t = tb(&[(60, 0, 16), (64, 0, 16), (67, 0, 16)]);
    let expected = oracle::compress(&naive_remi(&t));
    assert_eq!(
        expected,
        vec![Token::Dur(16), Token::Pitch(60), Token::Pitch(64), Token::Pitch(67), Token::Eot]
    );
    assert_eq!(encode(&t, 32, Capacity::Music).unwrap().tokens, expected);
}

fn arb_track_bar() -> impl Strategy<Value = (TrackBar, u32)> {
    prop::sample::select(vec![8u32, 16, 24, 32, 48, 64, 128]).prop_flat_map(|len| {
        let note = (0u8..128, 0..len, prop::sample::select(vec![1u32, 2, 3, 4, 6, 8, 12, 16, 24, 32, 64, 128]));
        prop::collection::vec(note, 0..14).prop_map(move |ns| {
            (
                TrackBar::new(0, 0, ns.into_iter().map(|(p, o, d)| NoteEvent::new(p, o, d)).collect()),
                len,
            )
        })
    })
}

fn strict_expected(t: &TrackBar) -> bool {
    let e = &t.events;
    let shared_onset = e.windows(2).any(|w| w[0].onset == w[1].onset);
    let zero_onset = e.first().is_some_and(|n| n.onset == 0);
    let mut onsets: Vec<u32> = e.iter().map(|n| n.onset).collect();
    onsets.dedup();
    let fusion = onsets
        .windows(2)
        .any(|w| e.iter().any(|n| n.onset == w[0] && n.onset + n.duration == w[1]));
    shared_onset || zero_onset || fusion
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip_and_compression((t, len) in arb_track_bar()) {
        let s = encode(&t, len, Capacity::Custom(usize::MAX)).unwrap();
        prop_assert_eq!(&decode(&s.tokens, len).unwrap(), &t.events);
        let naive = naive_remi(&t);
        prop_assert!(s.len() <= naive.len());
        if strict_expected(&t) {
            prop_assert!(s.len() < naive.len());
        }
        prop_assert_eq!(&s.tokens, &oracle::compress(&naive));
        // determinism
        prop_assert_eq!(&encode(&t, len, Capacity::Custom(usize::MAX)).unwrap().tokens, &s.tokens);
    }

    #[test]
    fn decoded_onsets_are_monotone_in_stream_order((t, len) in arb_track_bar()) {
        let s = encode(&t, len, Capacity::Custom(usize::MAX)).unwrap();
        let mut g = harmorch::tokenizer::Grammar::new(len);
        for tok in &s.tokens {
            g.push(*tok).unwrap();
        }
        let onsets: Vec<u32> = g.notes().iter().map(|n| n.onset).collect();
        prop_assert!(onsets.windows(2).all(|w| w[0] <= w[1]));
    }
}
