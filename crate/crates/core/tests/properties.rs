//! Property tests over the metric and bridge invariants.

use proptest::prelude::*;

use asrlab::metrics::wer;
use asrlab::rlhf_ppo::{reward, MpSource, RewardConfig};
use asrlab::token_bridge::{build_vocab_map, encode_example, NUM_RESERVED};

fn word_seq(max_len: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["ba", "ko", "mi", "zu", "ta"]), 1..max_len)
        .prop_map(|ws| ws.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wer_triangle_inequality_on_edit_counts(
        a in word_seq(6),
        b in word_seq(6),
        c in word_seq(6),
    ) {
        let ab = wer(&a, &b).unwrap().edits();
        let bc = wer(&b, &c).unwrap().edits();
        let ac = wer(&a, &c).unwrap().edits();
        prop_assert!(ac <= ab + bc, "d(a,c)={ac} > d(a,b)+d(b,c)={}", ab + bc);
    }

    #[test]
    fn wer_backtrace_counts_always_sum_to_the_distance(
        a in word_seq(7),
        b in word_seq(7),
    ) {
        let x = wer(&a, &b).unwrap();
        let y = wer(&b, &a).unwrap();
        // edit distance is symmetric even though S/I/D roles swap
        prop_assert_eq!(x.edits(), y.edits());
        prop_assert_eq!(x.insertions, y.deletions);
        prop_assert_eq!(x.deletions, y.insertions);
    }

    #[test]
    fn vocab_map_round_trip_and_disjointness(
        k in 1usize..48,
        extra in 5usize..64,
        freq_seed in 0u64..1000,
    ) {
        let v = k + NUM_RESERVED + extra;
        let freqs: Vec<u64> = (0..v).map(|i| {
            // arbitrary but deterministic frequency table
            (i as u64).wrapping_mul(freq_seed).wrapping_add(freq_seed) % 97
        }).collect();
        let map = build_vocab_map(v, k, &freqs).unwrap();
        for a in 0..k as u32 {
            let vid = map.audio_to_vocab(a).unwrap();
            prop_assert_eq!(map.vocab_to_audio(vid).unwrap(), Some(a));
            prop_assert!(vid as usize >= v - k);
        }
        // every id producible from a transcript is outside the audio range
        for t in 0..(v - k) as u32 {
            prop_assert_eq!(map.vocab_to_audio(t).unwrap(), None);
        }
        // encoding accepts text ids and rejects audio-range ids
        let ex = encode_example(&map, &[0, (k - 1) as u32], &[NUM_RESERVED as u32]).unwrap();
        for (&tok, &m) in ex.tokens.iter().zip(&ex.loss_mask) {
            if m {
                prop_assert!(!map.is_audio_vocab_id(tok) || tok == asrlab::token_bridge::EOS);
            }
        }
    }

    #[test]
    fn reward_is_always_finite_and_bounded(
        r in word_seq(6),
        h in word_seq(10),
        gamma in prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]),
        mp in 0.0f64..=1.0,
    ) {
        let cfg = RewardConfig { gamma, wer_clamp_delta: 1e-3, mp_source: MpSource::Oracle };
        let val = reward(&r, &h, &|_, _| mp, &cfg).unwrap();
        prop_assert!(val.is_finite());
        prop_assert!(val.abs() <= gamma + 1e-3f64.ln().abs() + 1e-12);
    }
}
