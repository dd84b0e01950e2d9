use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mrgr_numerics::{AdamConfig, AdamState, Tape, Tensor, Var};

use super::{teacher_forced, tokenize_prompt, Backbone, Dropout, ModelConfig};
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{item_scores, rank_of};
use crate::memory::{element_tokens, MemoryConfig, MemoryEncoding, Pooling};
use crate::vocab::{ItemVocabulary, TokenId, NULL_PREFIX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    /// Probability that a training sample carries a random past window in
    /// its prefix slot.
    pub p_prefix: f64,
    /// Samples per gradient chunk. Chunks are the unit of parallel work and
    /// are summed in order, so results do not depend on the worker count.
    pub chunk_size: usize,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Probability of blanking each short-window item token except the most
    /// recent one to the null token during training.
    pub window_dropout: f64,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 60,
            min_epochs: 40,
            patience: 10,
            p_prefix: 1.0,
            chunk_size: 8,
            weight_decay: 0.0,
            window_dropout: 0.9,
            seed: 0,
        }
    }
}

impl BackboneTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, chunk_size and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_prefix) || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "need lr > 0 and p_prefix in [0, 1], got {} and {}",
                self.lr, self.p_prefix
            )));
        }
        if !(0.0..1.0).contains(&self.window_dropout) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need window_dropout in [0, 1) and weight_decay >= 0, got {} and {}",
                self.window_dropout, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub backbone: Backbone,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recall1: f64,
}

/// A sample resolved to tokens, with the positions its prefix may come from.
struct Prepared {
    prompt: Vec<TokenId>,
    target: Vec<TokenId>,
    target_item: usize,
    seq: usize,
    candidates: (usize, usize),
}

fn prepare(
    split: &DatasetSplit,
    samples: &[Sample],
    vocab: &ItemVocabulary,
) -> Result<Vec<Prepared>> {
    let users = split.user_index();
    samples
        .iter()
        .map(|s| {
            let prompt = tokenize_prompt(&s.window, vocab, split.rule.short)?;
            let target = vocab.tokens_of(&s.target)?.to_vec();
            Ok(Prepared {
                prompt,
                target,
                target_item: vocab.index_of(&s.target)?,
                seq: users[s.user.as_str()],
                candidates: s.candidates,
            })
        })
        .collect()
}

/// Per-sample random choices, drawn sequentially before any parallel work.
struct Draw {
    prefix: Option<Vec<TokenId>>,
    blanked: Vec<usize>,
    dropout_seed: u64,
}

fn draw(
    rng: &mut ChaCha8Rng,
    p: &Prepared,
    split: &DatasetSplit,
    vocab: &ItemVocabulary,
    mem: MemoryConfig,
    p_prefix: f64,
    window_dropout: f64,
) -> Result<Draw> {
    let blanked = if window_dropout > 0.0 {
        (1..p.prompt.len().saturating_sub(2))
            .filter(|_| rng.gen_bool(window_dropout))
            .collect()
    } else {
        Vec::new()
    };
    let use_prefix = p_prefix > 0.0 && rng.gen_bool(p_prefix);
    let (lo, hi) = p.candidates;
    let prefix = if use_prefix && hi > lo {
        let m = rng.gen_range(lo..hi);
        let window = MemoryConfig {
            encoding: MemoryEncoding::Window,
            ..mem
        };
        Some(element_tokens(
            &split.sequences[p.seq],
            m,
            split.rule,
            window,
            vocab,
        )?)
    } else {
        None
    };
    Ok(Draw {
        prefix,
        blanked,
        dropout_seed: rng.gen(),
    })
}

fn pooled_on(tape: &Tape<'_>, x: Var, pooling: Pooling) -> Result<Var> {
    let n = tape.shape(x)?[0];
    Ok(match pooling {
        Pooling::Last => tape.select_rows(x, &[n - 1])?,
        Pooling::Mean => {
            let w = Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?;
            tape.matmul(tape.leaf(w), x)?
        }
    })
}

/// NLL of one sample's target tokens, optionally with a prefix window
/// encoded on the same tape so gradients reach its encoder too.
fn sample_loss(
    model: &Backbone,
    tape: &Tape<'_>,
    pv: &[Var],
    p: &Prepared,
    d: &Draw,
    pooling: Pooling,
) -> Result<Var> {
    let mut dropout = (model.config.dropout > 0.0).then(|| Dropout {
        rate: model.config.dropout,
        rng: ChaCha8Rng::seed_from_u64(d.dropout_seed),
    });
    let mut tokens = teacher_forced(&p.prompt, &p.target);
    for &i in &d.blanked {
        tokens[i] = NULL_PREFIX;
    }
    let mut x = model.lower_on(tape, pv, &tokens, &mut dropout)?;
    if let Some(prefix) = &d.prefix {
        let states = model.lower_on(tape, pv, prefix, &mut dropout)?;
        let z = pooled_on(tape, states, pooling)?;
        x = Backbone::inject_on(tape, x, z)?;
    }
    let first = tokens.len() - p.target.len();
    let rows: Vec<usize> = (first..tokens.len()).collect();
    let logits = model.upper_on(tape, pv, x, &rows, &mut dropout)?;
    Ok(tape.cross_entropy(logits, &p.target)?)
}

/// Gradient of `scale · Σ loss` over a chunk, plus the unscaled loss sum.
fn chunk_grads(
    model: &Backbone,
    items: &[(&Prepared, Draw)],
    scale: f64,
    pooling: Pooling,
) -> Result<(Vec<Tensor>, f64)> {
    let tape = Tape::new();
    let pv = model.bind(&tape);
    let mut total: Option<Var> = None;
    for (p, d) in items {
        let l = sample_loss(model, &tape, &pv, p, d, pooling)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("chunks are non-empty");
    let loss_sum = tape.value(total)?.item();
    let scaled = tape.scale(total, scale)?;
    let grads = tape.backward(scaled)?;
    let g = pv
        .iter()
        .map(|&v| grads.wrt(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((g, loss_sum))
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Recall@1 on `samples` with prefixes drawn as in training from a fixed
/// seed, so epochs are compared on identical inputs.
fn policy_recall1(
    model: &Backbone,
    prepared: &[Prepared],
    split: &DatasetSplit,
    vocab: &ItemVocabulary,
    mem: MemoryConfig,
    cfg: &BackboneTrainConfig,
) -> Result<f64> {
    if prepared.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1d_a7e5);
    let draws = prepared
        .iter()
        .map(|p| draw(&mut rng, p, split, vocab, mem, cfg.p_prefix, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let hits = prepared
        .par_iter()
        .zip(draws.par_iter())
        .map(|(p, d)| {
            let prefix = match &d.prefix {
                Some(t) => Some(crate::memory::encode_pooled(model, t, mem.pooling)?),
                None => None,
            };
            let states = model.encode_lower(&p.prompt, prefix.as_deref())?;
            let logits = model.decode_upper(&states)?;
            Ok((rank_of(&item_scores(&logits, vocab), p.target_item) == 1) as usize)
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / prepared.len() as f64)
}

/// Minimizes target-token NLL with Adam, exposing a random past window of
/// the same user in the prefix slot with probability `p_prefix`. Keeps the
/// parameters of the best validation Recall@1 and stops after `patience`
/// epochs without improvement (once `min_epochs` have run).
pub fn train_backbone(
    split: &DatasetSplit,
    vocab: &ItemVocabulary,
    model_cfg: ModelConfig,
    mem: MemoryConfig,
    cfg: &BackboneTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let train = prepare(split, &split.train, vocab)?;
    let val = prepare(split, &split.val, vocab)?;
    let mut model = Backbone::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_lr(cfg.lr)
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items = batch
                .iter()
                .map(|&i| {
                    Ok((
                        &train[i],
                        draw(
                            &mut rng,
                            &train[i],
                            split,
                            vocab,
                            mem,
                            cfg.p_prefix,
                            cfg.window_dropout,
                        )?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let parts = items
                .par_chunks(cfg.chunk_size)
                .map(|c| chunk_grads(&model, c, scale, mem.pooling))
                .collect::<Result<Vec<_>>>()?;
            let mut parts = parts.into_iter();
            let (mut grads, mut loss) = parts.next().expect("batch is non-empty");
            for (g, l) in parts {
                add_into(&mut grads, &g);
                loss += l;
            }
            loss_total += loss;
            model.apply_step(&mut adam, &grads)?;
        }
        let val_recall1 = policy_recall1(&model, &val, split, vocab, mem, cfg)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_total / train.len() as f64,
            val_recall1,
        };
        log::info!(
            "backbone epoch {epoch}: loss {:.4}, val recall@1 {:.4}",
            log.train_loss,
            log.val_recall1
        );
        epochs.push(log);
        if val_recall1 > best.2 {
            best = (model.clone(), epoch, val_recall1);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epoch >= cfg.min_epochs && since_best >= cfg.patience {
            break;
        }
    }
    let (backbone, best_epoch, best_val_recall1) = best;
    Ok(TrainOutcome {
        backbone,
        epochs,
        best_epoch,
        best_val_recall1,
    })
}
