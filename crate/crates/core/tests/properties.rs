use std::collections::{BTreeMap, HashSet};

use annp::ann::{brute_force_query, AnnConfig, AnnIndex};
use annp::autodiff::Tape;
use annp::context_encoder::{tokenize, EncoderConfig, EncoderParams};
use annp::inventory::{AnnotatedTranscript, PhraseId, PhraseInventory};
use annp::model::{transcript_labels, ModelConfig, ModelParams};
use annp::sampler::{build_context_list, Provenance, QueryContext, SamplerConfig};
use annp::trainer::RunConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=3).prop_map(|w| w.join(" "))
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_len: 48,
    }
}

fn inventory_of(texts: &[String]) -> PhraseInventory {
    let mut inv = PhraseInventory::new();
    for t in texts {
        inv.insert(t).expect("non-empty phrase");
    }
    inv
}

fn vectors(rows: &[Vec<f64>]) -> BTreeMap<PhraseId, Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, v)| (PhraseId(i as u32), v.clone()))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inventory_keeps_one_entry_per_text(texts in prop::collection::vec(phrase(), 1..20)) {
        let transcripts: Vec<AnnotatedTranscript> = texts
            .iter()
            .map(|t| {
                let n = t.split_whitespace().count();
                AnnotatedTranscript::new(format!("call {t}"), vec![(1, n)])
            })
            .collect();
        let inv = PhraseInventory::ingest(&transcripts).unwrap();
        let distinct: HashSet<&String> = texts.iter().collect();
        prop_assert_eq!(inv.len(), distinct.len());
        for t in &texts {
            let p = inv.lookup(t).unwrap();
            prop_assert_eq!(&p.text, t);
            prop_assert_eq!(p.words.join(" "), t.clone());
        }
        let again = PhraseInventory::ingest(&transcripts).unwrap();
        prop_assert_eq!(inv.to_text(), again.to_text());
    }

    #[test]
    fn inventory_survives_save_and_load(texts in prop::collection::vec(phrase(), 0..20)) {
        let inv = inventory_of(&texts).with_word_entries();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inventory.txt");
        inv.save(&path).unwrap();
        let loaded = PhraseInventory::load(&path).unwrap();
        prop_assert_eq!(loaded.to_text(), inv.to_text());
        for p in inv.iter() {
            prop_assert_eq!(loaded.lookup(&p.text).map(|q| q.id), Some(p.id));
        }
    }

    #[test]
    fn encoding_is_deterministic_and_batch_independent(
        texts in prop::collection::vec(phrase(), 1..6),
        seed in 0u64..1000,
    ) {
        let a = EncoderParams::new(small_encoder(), seed);
        let b = EncoderParams::new(small_encoder(), seed);
        let tokens: Vec<_> = texts.iter().map(|t| tokenize(t).unwrap()).collect();
        let batch = a.encode_batch(&tokens).unwrap();
        for (t, e) in tokens.iter().zip(&batch) {
            prop_assert_eq!(&a.encode(t).unwrap(), e);
            prop_assert_eq!(&b.encode(t).unwrap(), e);
        }
    }

    #[test]
    fn small_index_matches_brute_force(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..=16),
        query in prop::collection::vec(-1.0f64..1.0, 4),
        n in 1usize..20,
        seed in 0u64..100,
    ) {
        let entries = vectors(&rows);
        let index = AnnIndex::build(&entries, &AnnConfig::default(), seed).unwrap();
        let got = index.query(&query, n).unwrap();
        prop_assert_eq!(&got, &brute_force_query(&entries, &query, n).unwrap());
        prop_assert_eq!(got.len(), n.min(rows.len()));
    }

    #[test]
    fn neighbours_are_unique_sorted_and_exactly_scored(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 20..200),
        query in prop::collection::vec(-1.0f64..1.0, 6),
        n in 1usize..30,
    ) {
        let entries = vectors(&rows);
        let cfg = AnnConfig { num_trees: 4, leaf_capacity: 8, ..AnnConfig::default() };
        let index = AnnIndex::build(&entries, &cfg, 1).unwrap();
        let got = index.query(&query, n).unwrap();
        let ids: HashSet<PhraseId> = got.iter().map(|s| s.phrase_id).collect();
        prop_assert_eq!(ids.len(), got.len());
        for pair in got.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        for s in &got {
            prop_assert_eq!(s.score, dot(&query, &entries[&s.phrase_id]));
        }
    }

    #[test]
    fn sampled_lists_hold_references_once(
        names in prop::collection::hash_set("[a-z]{3,7}", 8..40),
        picks in prop::collection::vec(0usize..1000, 1..5),
        ratio in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let names: Vec<String> = names.into_iter().collect();
        let inv = inventory_of(&names);
        let params = EncoderParams::new(small_encoder(), 3);
        let texts: Vec<&str> = inv.iter().map(|p| p.text.as_str()).collect();
        let embedded = params.as_ref().encode_texts(&texts).unwrap();
        let entries: BTreeMap<PhraseId, Vec<f64>> = inv.ids().into_iter().zip(embedded.into_iter().map(|e| e.0)).collect();
        let index = AnnIndex::build(&entries, &AnnConfig::default(), 3).unwrap();
        let batch: Vec<QueryContext> = picks
            .iter()
            .map(|&i| {
                let name = &names[i % names.len()];
                QueryContext {
                    transcript: format!("call {name}"),
                    reference_phrases: vec![inv.lookup(name).unwrap().clone()],
                }
            })
            .collect();
        let cfg = SamplerConfig { n: 6, k: 2, append_ratio: ratio, phrases_per_query: 4, ..SamplerConfig::default() };
        let build = |s: u64| {
            build_context_list(&batch, &inv, Some(&index), &cfg, &mut ChaCha8Rng::seed_from_u64(s)).unwrap()
        };
        let list = build(seed);
        prop_assert_eq!(&list, &build(seed));
        prop_assert_eq!(list.count(Provenance::Backoff), 1);
        prop_assert_eq!(list.entries[list.backoff_position].phrase, None);
        let ids = list.phrase_ids();
        prop_assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
        for (q, rel) in batch.iter().zip(&list.relevance) {
            prop_assert_eq!(rel.len(), 1);
            prop_assert_eq!(list.entries[rel[0]].phrase, Some(q.reference_phrases[0].id));
        }
        if ratio == 0.0 {
            prop_assert_eq!(list.count(Provenance::Ann), 0);
        }
        let unmined = build_context_list(&batch, &inv, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(unmined.count(Provenance::Ann), 0);
    }

    #[test]
    fn rebuild_schedule_law(epochs in 1usize..60, period in 1usize..20, miner: bool) {
        let cfg = RunConfig { epochs, rebuild_period_epochs: period, miner_enabled: miner, ..RunConfig::default() };
        let expected = if miner { 1 + (epochs - 1) / period } else { 0 };
        prop_assert_eq!(cfg.scheduled_rebuilds(), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn biasing_attention_rows_are_distributions(
        list in prop::collection::vec(prop::option::of("[a-z]{1,8}"), 1..6),
        transcript in "[a-z]{1,8}( [a-z]{1,8}){0,2}",
        seed in 0u64..100,
    ) {
        let params = ModelParams::new(
            ModelConfig {
                dim: 8,
                heads: 2,
                ffn_dim: 16,
                audio_layers: 1,
                label_layers: 1,
                context_layers: 1,
                joint_dim: 8,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap();
        let items: Vec<_> = list.iter().map(|t| t.as_ref().map(|t| tokenize(t).unwrap())).collect();
        let context = params.context_values(&items).unwrap();
        let labels = transcript_labels(&transcript).unwrap();
        let mut tape = Tape::new(&params.store);
        let c = tape.constant(context);
        let states = params.label_states(&mut tape, &labels).unwrap();
        let (_, weights) = params.label_bias.forward(&mut tape, states, c).unwrap();
        prop_assert_eq!(weights.len(), 2);
        for w in weights {
            let m = tape.value(w);
            prop_assert_eq!(m.cols(), list.len());
            prop_assert_eq!(m.rows(), labels.len() + 1);
            for r in 0..m.rows() {
                let sum: f64 = m.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
                prop_assert!(m.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }
}
