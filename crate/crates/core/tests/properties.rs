use std::collections::BTreeSet;

use dre_core::corpus::Dialogue;
use dre_core::evaluate::{micro_f1_topk, Golds};
use dre_core::inference::{InferenceMode, RankedPrediction, RelationScore};
use dre_core::reformulate::layout_sequence;
use dre_core::tokenizer::Tokenizer;
use dre_core::trigger_head::{decode_span, SpanLogits};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (5usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-4.0..4.0f64, n),
            prop::collection::vec(-4.0..4.0f64, n),
            1usize..=10,
        )
    })
}

fn ranking(universe: usize) -> impl Strategy<Value = (Vec<usize>, BTreeSet<usize>)> {
    (
        Just((0..universe).collect::<Vec<_>>()).prop_shuffle(),
        prop::collection::btree_set(0..universe, 1..=3),
    )
}

fn to_predictions(rows: &[(Vec<usize>, BTreeSet<usize>)]) -> (Vec<RankedPrediction>, Golds) {
    let name = |r: usize| format!("per:r{r}");
    let preds = rows
        .iter()
        .enumerate()
        .map(|(q, (order, _))| RankedPrediction {
            query_id: q.to_string(),
            mode: InferenceMode::GoldTrigger,
            k: 1,
            candidates: order
                .iter()
                .map(|&r| RelationScore {
                    relation_id: name(r),
                    probability: 0.5,
                    span: None,
                    span_text: None,
                })
                .collect(),
        })
        .collect();
    let golds = rows
        .iter()
        .enumerate()
        .map(|(q, (_, g))| (q.to_string(), g.iter().map(|&r| name(r)).collect()))
        .collect();
    (preds, golds)
}

proptest! {
    #[test]
    fn decode_ignores_a_constant_shift((start, end, max_len) in logits(), c in -10.0..10.0f64) {
        let mask = vec![true; start.len()];
        let base = decode_span(&SpanLogits { start: start.clone(), end: end.clone(), mask: mask.clone() }, max_len);
        let shifted: Vec<f64> = start.iter().map(|x| x + c).collect();
        let moved = decode_span(&SpanLogits { start: shifted, end: end.clone(), mask }, max_len);
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn decoded_span_is_admissible((start, end, max_len) in logits(), cut in 1usize..5) {
        let mask: Vec<bool> = (0..start.len()).map(|i| i == 0 || i >= cut).collect();
        let s = decode_span(&SpanLogits { start: start.clone(), end: end.clone(), mask: mask.clone() }, max_len);
        if !s.is_none() {
            prop_assert!(s.start >= 1 && s.start <= s.end && s.end - s.start < max_len);
            prop_assert!(mask[s.start] && mask[s.end]);
            prop_assert!(start[s.start] + end[s.end] > start[0] + end[0]);
        }
    }

    #[test]
    fn micro_f1_is_a_bounded_order_free_score(
        rows in prop::collection::vec(ranking(6), 1..15),
        k in 1usize..=3,
    ) {
        let (preds, golds) = to_predictions(&rows);
        let f = micro_f1_topk(&preds, &golds, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let mut reversed = preds.clone();
        reversed.reverse();
        prop_assert_eq!(f, micro_f1_topk(&reversed, &golds, k).unwrap());
        let perfect: Vec<RankedPrediction> = rows.iter().zip(&preds).map(|((_, g), p)| {
            let mut p = p.clone();
            p.candidates.sort_by_key(|c| !g.iter().any(|r| c.relation_id == format!("per:r{r}")));
            p
        }).collect();
        prop_assert!(micro_f1_topk(&perfect, &golds, 1).unwrap() >= micro_f1_topk(&preds, &golds, 1).unwrap());
    }

    #[test]
    fn char_to_token_is_monotone(words in prop::collection::vec("[a-z]{1,8}", 1..40), max_len in 12usize..64) {
        let turn = format!("S1: {}", words.join(" "));
        let dialogue = Dialogue::new("d", vec![turn.clone()]).unwrap();
        let tok = Tokenizer::build_word([turn.as_str(), "per children"]);
        let seq = layout_sequence(Some("per children"), "S1", "S2", &dialogue, None, &tok, max_len).unwrap();
        prop_assert_eq!(seq.char_to_token.len(), dialogue.char_len());
        let mapped: Vec<usize> = seq.char_to_token.iter().flatten().copied().collect();
        prop_assert!(mapped.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(mapped.iter().all(|t| seq.layout.dialogue.contains(t)));
        prop_assert!(seq.len() <= max_len);
    }
}
