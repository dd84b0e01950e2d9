use std::cell::Cell;

use proptest::prelude::*;

use mrgr_core::annotate::{
    annotate_dataset, annotate_sample, delta_for_element, labels_from_deltas, read_cache,
    sequence_probability, AnnotateConfig, BackboneTarget, DeltaSpace, TargetProbability, TAU_GRID,
};
use mrgr_core::backbone::{tokenize_prompt, Backbone, ModelConfig};
use mrgr_core::data::{
    filter_and_sequence, split_chronological, DatasetSplit, FilterRules, InteractionEvent, Sample,
    SplitBoundaries, WindowRule,
};
use mrgr_core::memory::{MemoryConfig, MemoryStore};
use mrgr_core::retriever::select_top;
use mrgr_core::vocab::ItemVocabulary;
use mrgr_core::Error;

/// Token probabilities (0.9, 0.8) under any injected element, (0.6, 0.5)
/// under the null prefix.
struct Fixture {
    calls: Cell<usize>,
}

impl TargetProbability for Fixture {
    fn token_probs(&self, prefix: Option<&[f64]>) -> mrgr_core::Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        Ok(match prefix {
            Some(_) => vec![0.9, 0.8],
            None => vec![0.6, 0.5],
        })
    }
}

fn sample(id: &str) -> Sample {
    Sample {
        id: id.into(),
        user: "u".into(),
        target: "y".into(),
        target_pos: 12,
        target_ts: 12,
        history: 12,
        short: (2, 12),
        candidates: (0, 2),
        window: Vec::new(),
    }
}

/// Plain `exp(x) / Σ exp`, no max shift.
fn naive_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| (v / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn delta_fixture() {
    let f = Fixture {
        calls: Cell::new(0),
    };
    let baseline = sequence_probability(&f.token_probs(None).unwrap());
    let d = delta_for_element(&f, &[0.0], baseline, DeltaSpace::Probability).unwrap();
    assert!((d - 0.42).abs() < 1e-12, "{d}");
    assert!((0.9 * 0.8 - 0.6 * 0.5 - 0.42f64).abs() < 1e-12);
}

#[test]
fn label_fixture() {
    let expected = [0.4441, 0.2918, 0.2640];
    let oracle = naive_softmax(&[0.42, 0.0, -0.1], 1.0);
    let labels = labels_from_deltas(&[0.42, 0.0, -0.1], 1.0).unwrap();
    for i in 0..3 {
        assert!((oracle[i] - expected[i]).abs() < 1e-4);
        assert!((labels[i] - expected[i]).abs() < 1e-4, "{labels:?}");
        assert!((labels[i] - oracle[i]).abs() < 1e-12);
    }
    let sharp = labels_from_deltas(&[0.42, 0.32, -0.1], 0.01).unwrap();
    assert!(sharp[0] > 0.999, "{sharp:?}");
    let flat = labels_from_deltas(&[0.2; 4], 1.0).unwrap();
    assert!(flat.iter().all(|v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn sample_with_fixture_probabilities() {
    let f = Fixture {
        calls: Cell::new(0),
    };
    let bank: Vec<&[f64]> = vec![&[1.0]; 5];
    let rec = annotate_sample(
        &sample("u#12"),
        &bank,
        &f,
        1.0,
        DeltaSpace::Probability,
        "ck",
    )
    .unwrap();
    assert_eq!(f.calls.get(), 6);
    assert!((rec.baseline - 0.30).abs() < 1e-12);
    assert!(rec.deltas.iter().all(|d| (d - 0.42).abs() < 1e-12));
    assert!(matches!(
        annotate_sample(&sample("u#12"), &[], &f, 1.0, DeltaSpace::Probability, "ck"),
        Err(Error::EmptyMemory)
    ));
}

proptest! {
    #[test]
    fn argmax_survives_every_temperature(deltas in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let top = select_top(&deltas).unwrap();
        for tau in TAU_GRID {
            let labels = labels_from_deltas(&deltas, tau).unwrap();
            prop_assert!((labels.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // ties in the labels can only come from ties or underflow; compare values
            prop_assert!(labels[select_top(&labels).unwrap()] == labels[top]);
        }
    }

    #[test]
    fn labels_ignore_a_common_shift(deltas in prop::collection::vec(-1.0f64..1.0, 1..20), c in -1.0f64..1.0) {
        let shifted: Vec<f64> = deltas.iter().map(|d| d + c).collect();
        let a = labels_from_deltas(&deltas, 0.1).unwrap();
        let b = labels_from_deltas(&shifted, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

fn tiny_model(vocab: usize) -> Backbone {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        ..ModelConfig::with_vocab(vocab)
    };
    Backbone::init(cfg, 5).unwrap()
}

#[test]
fn real_backbone_costs_one_pass_per_element_plus_baseline() {
    let vocab = ItemVocabulary::single_token((0..8).map(|i| format!("i{i}"))).unwrap();
    let m = tiny_model(vocab.vocab_size());
    let prompt = tokenize_prompt(&["i1", "i2", "i3"], &vocab, 10).unwrap();
    let src = BackboneTarget::new(&m, &prompt, vocab.tokens_of("i4").unwrap()).unwrap();
    let null = m.null_prefix().unwrap();
    let other: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut shuffled_src: Vec<Vec<f64>> = (0..5)
        .map(|k| other.iter().map(|v| v * k as f64).collect())
        .collect();
    shuffled_src[2] = null.clone();
    let bank: Vec<&[f64]> = shuffled_src.iter().map(|v| v.as_slice()).collect();
    let rec = annotate_sample(
        &sample("s"),
        &bank,
        &src,
        1.0,
        DeltaSpace::Probability,
        "ck",
    )
    .unwrap();
    assert_eq!(src.upper_passes(), 6);
    assert!(
        rec.deltas[2].abs() < 1e-12,
        "null prefix delta {}",
        rec.deltas[2]
    );
    assert!(rec.deltas.iter().all(|d| d.abs() < 1.0));

    // permuting the bank permutes deltas and labels
    let perm = [4, 2, 0, 3, 1];
    let permuted: Vec<&[f64]> = perm.iter().map(|&i| bank[i]).collect();
    let rec2 = annotate_sample(
        &sample("s"),
        &permuted,
        &src,
        1.0,
        DeltaSpace::Probability,
        "ck",
    )
    .unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(rec2.deltas[j].to_bits(), rec.deltas[i].to_bits());
        assert!((rec2.labels[j] - rec.labels[i]).abs() < 1e-15);
    }
}

fn small_split() -> (DatasetSplit, ItemVocabulary) {
    let mut events = Vec::new();
    for u in 0..6 {
        for k in 0..16 {
            events.push(InteractionEvent {
                user: format!("u{u}"),
                item: format!("i{}", (u * 3 + k * 7) % 11),
                ts: k,
            });
        }
        events.push(InteractionEvent {
            user: format!("u{u}"),
            item: format!("i{}", u % 11),
            ts: 100 + u as i64,
        });
    }
    let (seqs, vocab) = filter_and_sequence(
        &events,
        FilterRules {
            min_item_interactions: 1,
            min_seq_len: 2,
        },
    )
    .unwrap();
    let b = SplitBoundaries {
        train_start: Some(50),
        train_end: 200,
        val_end: 300,
        test_end: 400,
    };
    (
        split_chronological(seqs, b, WindowRule::default()).unwrap(),
        vocab,
    )
}

#[test]
fn dataset_cache_is_reused_bitwise() {
    let (split, vocab) = small_split();
    let m = tiny_model(vocab.vocab_size());
    let store = MemoryStore::build(&split, &m, "ck1", &vocab, MemoryConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("ann.jsonl");
    let cfg = AnnotateConfig::default();

    let first = annotate_dataset(&split, &store, &m, &vocab, cfg, "ck1", Some(&cache)).unwrap();
    assert_eq!(first.records.len(), 6);
    assert_eq!(first.cache_hits, 0);
    let expected: usize = first.records.iter().map(|r| r.deltas.len() + 1).sum();
    assert_eq!(first.upper_passes, expected);

    let second = annotate_dataset(&split, &store, &m, &vocab, cfg, "ck1", Some(&cache)).unwrap();
    assert_eq!(second.cache_hits, 6);
    assert_eq!(second.upper_passes, 0);
    let bits = |s: &mrgr_core::annotate::AnnotationSet| -> Vec<u64> {
        s.records
            .iter()
            .flat_map(|r| r.deltas.iter().chain(&r.labels).map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&first), bits(&second));
    assert_eq!(read_cache(&cache).unwrap(), second.records);

    // a different temperature is a different key
    let other = AnnotateConfig { tau: 0.1, ..cfg };
    let third = annotate_dataset(&split, &store, &m, &vocab, other, "ck1", Some(&cache)).unwrap();
    assert_eq!(third.cache_hits, 0);

    // banks from another backbone are refused
    assert!(matches!(
        annotate_dataset(&split, &store, &m, &vocab, cfg, "ck2", Some(&cache)),
        Err(Error::Stale(_))
    ));

    std::fs::write(&cache, "{\"sample_id\": 3\n").unwrap();
    assert!(matches!(read_cache(&cache), Err(Error::Format(_))));
}

#[test]
fn annotation_does_not_depend_on_worker_count() {
    let (split, vocab) = small_split();
    let m = tiny_model(vocab.vocab_size());
    let store = MemoryStore::build(&split, &m, "ck", &vocab, MemoryConfig::default()).unwrap();
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| {
                annotate_dataset(
                    &split,
                    &store,
                    &m,
                    &vocab,
                    AnnotateConfig::default(),
                    "ck",
                    None,
                )
                .unwrap()
            })
    };
    assert_eq!(run(1), run(4));
}
