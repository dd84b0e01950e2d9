use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrgr_core::backbone::{
    log_softmax_at, teacher_forced, train_backbone, Backbone, BackboneTrainConfig, ModelConfig,
};
use mrgr_core::data::{
    filter_and_sequence, split_chronological, FilterRules, InteractionEvent, SplitBoundaries,
    WindowRule,
};
use mrgr_core::eval::{item_scores, rank_of};
use mrgr_core::memory::MemoryConfig;
use mrgr_core::vocab::{TokenId, FIRST_ITEM_TOKEN, PRED, PREFIX_SLOT};

const VOCAB: usize = 40;

fn model(split_layer: usize, seed: u64) -> Backbone {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        split_layer,
        ..ModelConfig::with_vocab(VOCAB)
    };
    Backbone::init(cfg, seed).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let n = rng.gen_range(0..=10);
    let mut t = vec![PREFIX_SLOT];
    t.extend((0..n).map(|_| rng.gen_range(FIRST_ITEM_TOKEN..VOCAB)));
    t.push(PRED);
    t
}

#[test]
fn split_matches_monolithic_pass() {
    for l in 1..=3 {
        let m = model(l, 7 + l as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        for _ in 0..50 {
            let tokens = random_prompt(&mut rng);
            let prefix: Option<Vec<f64>> = rng
                .gen_bool(0.5)
                .then(|| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let split = m
                .decode_upper(&m.encode_lower(&tokens, prefix.as_deref()).unwrap())
                .unwrap();
            let whole = m.forward(&tokens, prefix.as_deref()).unwrap();
            assert_eq!(split.len(), VOCAB);
            assert!(
                split
                    .iter()
                    .zip(&whole)
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "L={l} {tokens:?}"
            );
        }
    }
}

#[test]
fn decode_rejects_states_from_other_layer() {
    let lower = model(1, 0);
    let upper = model(2, 0);
    let states = lower.encode_lower(&[PREFIX_SLOT, 5, PRED], None).unwrap();
    assert!(upper.decode_upper(&states).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn earlier_states_ignore_later_tokens(
        seed in 0u64..1000,
        items in prop::collection::vec(FIRST_ITEM_TOKEN..VOCAB, 1..10),
        j_frac in 0.0f64..1.0,
        replacement in FIRST_ITEM_TOKEN..VOCAB,
    ) {
        let m = model(2, seed);
        let mut tokens = vec![PREFIX_SLOT];
        tokens.extend(&items);
        tokens.push(PRED);
        let j = 1 + ((j_frac * items.len() as f64) as usize).min(items.len() - 1);
        let mut other = tokens.clone();
        other[j] = replacement;
        let a = m.encode_lower(&tokens, None).unwrap();
        let b = m.encode_lower(&other, None).unwrap();
        for i in 0..j {
            let same = a.states.row(i).iter().zip(b.states.row(i)).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "row {} moved after changing position {}", i, j);
        }
    }

    #[test]
    fn explicit_null_prefix_is_the_default(seed in 0u64..1000, items in prop::collection::vec(FIRST_ITEM_TOKEN..VOCAB, 0..10)) {
        let m = model(2, seed);
        let mut tokens = vec![PREFIX_SLOT];
        tokens.extend(&items);
        tokens.push(PRED);
        let null = m.null_prefix().unwrap();
        prop_assert_eq!(m.encode_lower(&tokens, Some(&null)).unwrap(), m.encode_lower(&tokens, None).unwrap());
        prop_assert_eq!(m.forward(&tokens, Some(&null)).unwrap(), m.forward(&tokens, None).unwrap());
    }

    #[test]
    fn sequence_probability_agrees_with_token_nll(
        seed in 0u64..1000,
        items in prop::collection::vec(FIRST_ITEM_TOKEN..VOCAB, 0..6),
        target in prop::collection::vec(FIRST_ITEM_TOKEN..VOCAB, 1..4),
    ) {
        let m = model(2, seed);
        let mut prompt = vec![PREFIX_SLOT];
        prompt.extend(&items);
        prompt.push(PRED);
        let states = m.encode_lower(&teacher_forced(&prompt, &target), None).unwrap();
        let p = m.sequence_prob(&states, &target).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);

        // one full forward pass per target token, each on the growing context
        let mut ctx = prompt.clone();
        let mut nll = 0.0;
        for &t in &target {
            nll -= log_softmax_at(&m.forward(&ctx, None).unwrap(), t);
            ctx.push(t);
        }
        let n = target.len() as f64;
        prop_assert!((-p.ln() / n - nll / n).abs() < 1e-10);
        if target.len() > 1 {
            let shorter = &target[..target.len() - 1];
            let s2 = m.encode_lower(&teacher_forced(&prompt, shorter), None).unwrap();
            prop_assert!(m.sequence_prob(&s2, shorter).unwrap() >= p);
        }
    }
}

/// Three users whose final item is a function of their window, repeated as
/// validation users so early stopping sees the same inputs.
fn toy_split() -> (
    mrgr_core::data::DatasetSplit,
    mrgr_core::vocab::ItemVocabulary,
) {
    let mut events = Vec::new();
    for (group, final_ts) in [("t", 150), ("v", 250)] {
        for u in 0..3 {
            let user = format!("{group}{u}");
            for k in 0..12 {
                events.push(InteractionEvent {
                    user: user.clone(),
                    item: format!("w{}", (u * 5 + k) % 13),
                    ts: k as i64,
                });
            }
            events.push(InteractionEvent {
                user,
                item: format!("y{u}"),
                ts: final_ts,
            });
        }
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
        train_start: Some(100),
        train_end: 200,
        val_end: 300,
        test_end: 400,
    };
    (
        split_chronological(seqs, b, WindowRule::default()).unwrap(),
        vocab,
    )
}

fn train_toy(seed: u64, max_epochs: usize) -> mrgr_core::backbone::TrainOutcome {
    let (split, vocab) = toy_split();
    let cfg = BackboneTrainConfig {
        seed,
        max_epochs,
        lr: 3e-3,
        p_prefix: 0.0,
        window_dropout: 0.0,
        batch_size: 3,
        min_epochs: 0,
        patience: 500,
        ..Default::default()
    };
    let mcfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        ..ModelConfig::with_vocab(vocab.vocab_size())
    };
    train_backbone(&split, &vocab, mcfg, MemoryConfig::default(), &cfg).unwrap()
}

#[test]
fn toy_set_is_memorized() {
    let (split, vocab) = toy_split();
    assert_eq!(split.train.len(), 3);
    let out = train_toy(0, 500);
    let hits = split
        .train
        .iter()
        .filter(|s| {
            let prompt = mrgr_core::backbone::tokenize_prompt(&s.window, &vocab, 10).unwrap();
            let logits = out.backbone.forward(&prompt, None).unwrap();
            rank_of(
                &item_scores(&logits, &vocab),
                vocab.index_of(&s.target).unwrap(),
            ) == 1
        })
        .count();
    assert_eq!(hits, 3, "best epoch {}", out.best_epoch);
}

#[test]
fn training_is_reproducible_across_worker_counts() {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_toy(3, 5))
    };
    let (a, b) = (run(1), run(3));
    let bits = |o: &mrgr_core::backbone::TrainOutcome| -> Vec<u64> {
        o.backbone
            .params()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.epochs, b.epochs);
}
