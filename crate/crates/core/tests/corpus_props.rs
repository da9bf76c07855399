mod common;

use std::collections::HashMap;

use common::{session, WORDS};
use dialflow::corpus::{build_vocab, concat_session, shuffle_session, DialogueSession, EOS_ID};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sessions_strategy() -> impl Strategy<Value = DialogueSession> {
    prop::collection::vec(prop::collection::vec(0usize..WORDS.len(), 1..7), 1..6).prop_map(|utts| DialogueSession {
        id: "p".into(),
        utterances: utts
            .into_iter()
            .map(|u| u.into_iter().map(|i| WORDS[i].to_string()).collect())
            .collect(),
    })
}

proptest! {
    #[test]
    fn spans_partition_everything_after_bos(s in sessions_strategy()) {
        let vocab = build_vocab(std::slice::from_ref(&s), 100).unwrap();
        let c = concat_session(&s, &vocab);
        prop_assert_eq!(c.spans.len(), s.len());
        let mut cursor = 1;
        for (&(start, end), u) in c.spans.iter().zip(&s.utterances) {
            prop_assert_eq!(start, cursor);
            prop_assert_eq!(end - start, u.len() + 1);
            prop_assert_eq!(c.ids[end - 1], EOS_ID);
            cursor = end;
        }
        prop_assert_eq!(cursor, c.ids.len());
    }

    #[test]
    fn encode_decode_round_trip(s in sessions_strategy()) {
        let vocab = build_vocab(std::slice::from_ref(&s), 100).unwrap();
        for u in &s.utterances {
            prop_assert_eq!(&vocab.decode(&vocab.encode(u)), u);
        }
    }

    #[test]
    fn shuffle_preserves_multiset(s in sessions_strategy(), seed in 0u64..500) {
        let out = shuffle_session(&s, &mut ChaCha8Rng::seed_from_u64(seed));
        let (mut a, mut b) = (s.utterances.clone(), out.utterances.clone());
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
        if s.utterances.iter().any(|u| u != &s.utterances[0]) {
            prop_assert_ne!(&out.utterances, &s.utterances);
        }
    }
}

/// Pearson chi-square over the five non-identity orders of three utterances.
#[test]
fn shuffle_is_uniform_over_non_identity_orders() {
    let s = session("u", &["one", "two", "three"]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let out = shuffle_session(&s, &mut rng);
        *counts.entry(out.utterances.iter().map(|u| u[0].clone()).collect()).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    assert!(!counts.contains_key(&vec!["one".to_string(), "two".into(), "three".into()]));
    let expected = draws as f64 / 5.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 1% point of chi-square with 4 degrees of freedom.
    assert!(chi2 < 13.2767, "chi-square {chi2}");
}
