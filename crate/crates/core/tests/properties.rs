use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use sefun_core::corpus::{
    aggregate_annotations, corpus_stats, decode_pair, encode_pair, is_delimiter, segment, AggregationOutcome, Corpus,
    ConversationPair, DropReason, LabelRecord, Vocabulary, UNK,
};
use sefun_core::harness::{
    accuracy, gen_keyword_corpus, gen_synthetic_corpus, ingest_grading_sheet, macro_f1, micro_f1, ClassWeights,
    TemplateSpec, SHEET_HEADER,
};
use sefun_core::nncore::{clip_gradients, softmax, ParameterSet, Tensor};
use sefun_core::retrieve::{brute_force_topk, rerank, RankedCandidate, RetrievalIndex, Similarity};
use sefun_core::taxonomy::{parse_label, serialize_label, Level1, SentenceFunction};

const CHARS: &[char] = &['甲', '乙', '丙', '丁', '戊', '己', '庚', '辛'];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(CHARS), 1..6).prop_map(|cs| cs.into_iter().collect())
}

fn corpus_of(queries: &[String]) -> Corpus {
    Corpus::new(
        queries
            .iter()
            .map(|q| ConversationPair::from_texts(&[&format!("{q}。")], &["好。"], "prop"))
            .collect(),
    )
}

fn candidates() -> impl Strategy<Value = Vec<RankedCandidate>> {
    prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12).prop_map(|mut v| {
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v.into_iter()
            .enumerate()
            .map(|(i, (s, p))| RankedCandidate {
                pair_id: i,
                response: format!("r{i}"),
                lead_tokens: vec![format!("r{i}")],
                base_score: s,
                prediction: None,
                penalty: p,
                rerank_score: 0.0,
            })
            .collect()
    })
}

fn label_set() -> impl Strategy<Value = BTreeSet<u8>> {
    prop::collection::btree_set(0u8..4, 0..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rerank_with_zero_lambda_is_identity(cands in candidates(), k in 1usize..15) {
        let out = rerank(cands.clone(), 0.0, k).unwrap();
        prop_assert_eq!(out.iter().map(|c| c.pair_id).collect::<Vec<_>>(), (0..cands.len()).collect::<Vec<_>>());
        prop_assert!(out.iter().all(|c| c.rerank_score == c.base_score));
    }

    #[test]
    fn rerank_permutes_and_bounds_scores(cands in candidates(), lambda in 0.0f64..3.0, k in 1usize..15) {
        let kk = k.clamp(1, cands.len());
        let spread = cands[0].base_score - cands[kk - 1].base_score;
        let out = rerank(cands.clone(), lambda, k).unwrap();
        let mut ids: Vec<usize> = out.iter().map(|c| c.pair_id).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..cands.len()).collect::<Vec<_>>());
        for c in &out {
            prop_assert!(c.rerank_score <= c.base_score);
            prop_assert!(c.rerank_score >= c.base_score - lambda * spread - 1e-12);
        }
        prop_assert!(out.windows(2).all(|w| w[0].rerank_score >= w[1].rerank_score));
    }

    #[test]
    fn index_agrees_with_brute_force(
        queries in prop::collection::vec(text(), 1..30),
        probe in text(),
        k in 1usize..25,
        multiset in any::<bool>(),
    ) {
        let sim = if multiset { Similarity::Multiset } else { Similarity::Set };
        let corpus = corpus_of(&queries);
        let index = RetrievalIndex::build(&corpus, sim).unwrap();
        let tokens = ConversationPair::from_texts(&[&format!("{probe}。")], &["好。"], "").query_tokens();
        let got: Vec<(usize, f64)> = index.retrieve_topk(&tokens, k).into_iter().map(|c| (c.pair_id, c.base_score)).collect();
        prop_assert_eq!(got, brute_force_topk(&corpus, &tokens, k, sim));
    }

    #[test]
    fn segmentation_reconstructs_input(parts in prop::collection::vec(
        prop::sample::select(&['甲', '乙', 'a', ' ', '。', '！', '？', '，', '…', ',', '\n'][..]), 1..40,
    )) {
        let input: String = parts.into_iter().collect();
        match segment(&input) {
            Err(_) => prop_assert!(input.trim().is_empty()),
            Ok(segs) => {
                let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
                prop_assert_eq!(strip(&segs.concat()), strip(&input));
                for s in &segs {
                    prop_assert!(!s.trim().is_empty());
                    let delims: Vec<usize> = s.char_indices().filter(|(_, c)| is_delimiter(*c)).map(|(i, _)| i).collect();
                    prop_assert!(delims.len() <= 1);
                    if let Some(&i) = delims.first() {
                        prop_assert_eq!(i + s[i..].chars().next().unwrap().len_utf8(), s.len());
                    }
                }
            }
        }
    }

    #[test]
    fn stats_totals_add_up(n in 0usize..80, seed in any::<u64>()) {
        let corpus = gen_synthetic_corpus(&TemplateSpec::default(), n, &ClassWeights::dataset_response(), seed).unwrap();
        let stats = corpus_stats(&corpus);
        prop_assert_eq!(stats.pairs, n);
        for side in [&stats.query, &stats.response] {
            prop_assert_eq!(side.labeled() + side.unlabeled, side.segments);
            prop_assert_eq!(Level1::ALL.iter().map(|l| side.level1_count(*l)).sum::<usize>(), side.labeled());
        }
    }

    #[test]
    fn adjudication_ignores_annotator_order(
        sets in prop::collection::vec(prop::collection::vec(label_set(), 2), 3),
        perm in prop::sample::select(vec![[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]),
    ) {
        let names = ["a", "b", "c"];
        let records: Vec<LabelRecord<u8>> =
            (0..3).map(|i| LabelRecord { annotator: names[i].into(), segments: sets[i].clone() }).collect();
        let permuted: Vec<LabelRecord<u8>> = perm.iter().map(|&i| records[i].clone()).collect();
        let out = aggregate_annotations(&records).unwrap();
        prop_assert_eq!(&out, &aggregate_annotations(&permuted).unwrap());
        match out {
            AggregationOutcome::Accepted(agreed) => prop_assert!(sets.iter().all(|s| *s == agreed)),
            AggregationOutcome::Dropped(DropReason::NoLabel) => {
                prop_assert!((0..2).any(|seg| sets.iter().all(|s| s[seg].is_empty())))
            }
            AggregationOutcome::Dropped(_) => {}
            AggregationOutcome::NeedsConfirmation { majority, dissenter } => {
                let d = names.iter().position(|n| *n == dissenter).unwrap();
                prop_assert!(sets.iter().any(|s| *s != sets[d]));
                for (seg, m) in majority.iter().enumerate() {
                    for label in m {
                        prop_assert!(sets.iter().filter(|s| s[seg].contains(label)).count() >= 2);
                    }
                }
            }
        }
    }

    #[test]
    fn clipping_never_increases_the_norm(
        values in prop::collection::vec(-50.0f64..50.0, 1..20),
        clip in 0.01f64..20.0,
    ) {
        let mut params = ParameterSet::new();
        let id = params.add("w", Tensor::zeros(&[values.len()]));
        let mut grads = params.zero_grads();
        grads.get_mut(id).data_mut().copy_from_slice(&values);
        let before = grads.global_norm();
        prop_assert_eq!(clip_gradients(&mut grads, clip), before);
        let after = grads.global_norm();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip * (1.0 + 1e-12));
        if before <= clip {
            prop_assert_eq!(grads.get(id).data(), &values[..]);
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..25), shift in -100.0f64..100.0) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn micro_f1_equals_accuracy(pairs in prop::collection::vec((0u8..6, 0u8..6), 1..60)) {
        let (gold, pred): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let acc = accuracy(&gold, &pred).unwrap();
        prop_assert_eq!(micro_f1(&gold, &pred).unwrap(), acc);
        let m = macro_f1(&gold, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        if acc == 1.0 {
            prop_assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn normalised_grades_are_fractions_of_the_top_grade(
        rows in prop::collection::vec((0usize..3, [0u8..=5, 0u8..=5, 0u8..=5, 0u8..=5]), 1..30),
    ) {
        let mut sheet = SHEET_HEADER.join(",") + "\n";
        let mut key = BTreeMap::new();
        let mut oracle: BTreeMap<String, ([u32; 4], u32)> = BTreeMap::new();
        for (i, (sys, g)) in rows.iter().enumerate() {
            let name = format!("s{sys}");
            sheet += &format!("{},q,DE,A,r,{},{},{},{}\n", i + 1, g[0], g[1], g[2], g[3]);
            key.insert(i + 1, name.clone());
            let e = oracle.entry(name).or_default();
            (0..4).for_each(|a| e.0[a] += u32::from(g[a]));
            e.1 += 1;
        }
        let scores = ingest_grading_sheet(sheet.as_bytes(), &key).unwrap();
        prop_assert_eq!(scores.systems.len(), oracle.len());
        for (name, (sums, n)) in oracle {
            let got = scores.systems[&name];
            for a in 0..4 {
                prop_assert!((0.0..=1.0).contains(&got[a]));
                prop_assert!((got[a] - f64::from(sums[a]) / f64::from(n) / 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_corpora_are_seeded_and_round_trip(n in 0usize..40, seed in any::<u64>(), noise in 0.0f64..=1.0) {
        let spec = TemplateSpec::default();
        let a = gen_keyword_corpus(&spec, n, noise, seed).unwrap();
        prop_assert_eq!(&a, &gen_keyword_corpus(&spec, n, noise, seed).unwrap());
        let b = gen_synthetic_corpus(&spec, n, &ClassWeights::uniform(), seed).unwrap();
        prop_assert_eq!(&b, &gen_synthetic_corpus(&spec, n, &ClassWeights::uniform(), seed).unwrap());
        for p in a.pairs.iter().chain(&b.pairs) {
            prop_assert_eq!(&decode_pair(&encode_pair(p), 1).unwrap(), p);
        }
    }

    #[test]
    fn vocabulary_round_trips_known_tokens(
        seqs in prop::collection::vec(prop::collection::vec(prop::sample::select(CHARS), 1..8), 1..10),
        cap in 1usize..10,
    ) {
        let seqs: Vec<Vec<String>> = seqs.into_iter().map(|s| s.into_iter().map(String::from).collect()).collect();
        let vocab = Vocabulary::build(seqs.iter().map(Vec::as_slice), cap).unwrap();
        for seq in &seqs {
            let ids = vocab.encode(seq);
            for (t, id) in seq.iter().zip(&ids) {
                if vocab.contains(t) {
                    prop_assert_eq!(vocab.token(*id), t.as_str());
                } else {
                    prop_assert_eq!(*id, UNK);
                }
            }
        }
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), vocab.len());
        for id in 0..vocab.len() {
            prop_assert_eq!(back.token(id), vocab.token(id));
            prop_assert_eq!(back.freq(id), vocab.freq(id));
        }
    }
}

#[test]
fn every_label_round_trips_through_its_wire_form() {
    for sf in SentenceFunction::all() {
        assert_eq!(parse_label(&serialize_label(sf)).unwrap(), sf);
        assert_eq!(parse_label(sf.level2().name()).unwrap(), sf);
    }
}
