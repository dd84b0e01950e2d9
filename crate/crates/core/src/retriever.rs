//! Query MLP, memory scoring and KL training against annotated labels.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mrgr_numerics::{kernels, AdamConfig, AdamState, Tape, Tensor, Var};

use crate::annotate::AnnotatedSample;
use crate::backbone::{tokenize_prompt, Backbone, HiddenSeq};
use crate::checkpoint::{Checkpoint, RETRIEVER_ROLE};
use crate::data::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{item_scores, rank_of};
use crate::memory::{pool_states, MemoryBank, MemoryStore, Pooling};
use crate::vocab::ItemVocabulary;

/// `θ`: `d → hidden → d` with a ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    params: Vec<Tensor>,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Serialize, Deserialize)]
struct RetrieverShape {
    d_model: usize,
    hidden: usize,
}

impl Retriever {
    /// Uniform `±1/√fan_in` for every tensor.
    pub fn init(d_model: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || hidden == 0 {
            return Err(Error::Config(
                "retriever dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-b..b)).collect(),
            )
            .expect("finite")
        };
        let params = vec![
            uniform(&[d_model, hidden], d_model),
            uniform(&[hidden], d_model),
            uniform(&[hidden, d_model], hidden),
            uniform(&[d_model], hidden),
        ];
        Ok(Self { params })
    }

    pub fn from_params(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (d, h) = match w1.shape() {
            [d, h] => (*d, *h),
            s => return Err(Error::Invalid(format!("w1 must be a matrix, got {s:?}"))),
        };
        if b1.shape() != [h] || w2.shape() != [h, d] || b2.shape() != [d] {
            return Err(Error::Invalid(
                "retriever tensor shapes do not line up".into(),
            ));
        }
        Ok(Self {
            params: vec![w1, b1, w2, b2],
        })
    }

    pub fn d_model(&self) -> usize {
        self.params[W1].rows()
    }

    pub fn hidden(&self) -> usize {
        self.params[W1].cols()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn query_on(&self, tape: &Tape<'_>, pv: &[Var], z: Var) -> Result<Var> {
        let h = tape.relu(tape.add_row(tape.matmul(z, pv[W1])?, pv[B1])?)?;
        Ok(tape.add_row(tape.matmul(h, pv[W2])?, pv[B2])?)
    }

    /// `MLP(z_t)`.
    pub fn query(&self, z_t: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z_t.len())?;
        let tape = Tape::new();
        let pv: Vec<Var> = self.params.iter().map(|t| tape.param(t)).collect();
        let z = tape.leaf(Tensor::new(vec![1, z_t.len()], z_t.to_vec())?);
        Ok(tape.value(self.query_on(&tape, &pv, z)?)?.into_data())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.d_model() {
            return Err(Error::Invalid(format!(
                "vector of width {d} against a retriever of width {}",
                self.d_model()
            )));
        }
        Ok(())
    }

    /// `softmax_m(MLP(z_t) · z_m)`.
    pub fn score(&self, z_t: &[f64], bank: &[&[f64]]) -> Result<Vec<f64>> {
        self.score_with_temperature(z_t, bank, 1.0)
    }

    pub fn score_with_temperature(
        &self,
        z_t: &[f64],
        bank: &[&[f64]],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        if bank.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let q = self.query(z_t)?;
        let mut dots = Vec::with_capacity(bank.len());
        for z in bank {
            self.check_dim(z.len())?;
            dots.push(q.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>());
        }
        Ok(kernels::softmax(&Tensor::vector(dots)?, temperature)?.into_data())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let shape = RetrieverShape {
            d_model: self.d_model(),
            hidden: self.hidden(),
        };
        Checkpoint {
            role: RETRIEVER_ROLE.into(),
            config: serde_json::to_value(shape).expect("serializes"),
            tensors: NAMES
                .iter()
                .map(|n| n.to_string())
                .zip(self.params.iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_role(RETRIEVER_ROLE)?;
        let names: Vec<&str> = ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != NAMES {
            return Err(Error::Format(format!(
                "retriever tensors {names:?}, expected {NAMES:?}"
            )));
        }
        let mut t = ckpt.tensors.into_iter().map(|(_, t)| t);
        let mut next = || t.next().expect("four tensors");
        Self::from_params(next(), next(), next(), next()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Index of the largest score; ties go to the earliest element.
pub fn select_top(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of one memory-augmented forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub logits: Vec<f64>,
    /// Position of the injected element in the bank, if any.
    pub retrieved: Option<usize>,
}

/// Scores the bank from the prompt's own pooled state, injects the top
/// element and decodes. An empty bank falls back to the null prefix.
pub fn recommend_with_memory(
    prompt: &[usize],
    bank: &MemoryBank,
    backbone: &Backbone,
    retriever: &Retriever,
    pooling: Pooling,
) -> Result<Recommendation> {
    let states = backbone.encode_lower(prompt, None)?;
    recommend_from_states(&states, bank, backbone, retriever, pooling)
}

pub fn recommend_from_states(
    states: &HiddenSeq,
    bank: &MemoryBank,
    backbone: &Backbone,
    retriever: &Retriever,
    pooling: Pooling,
) -> Result<Recommendation> {
    if bank.is_empty() {
        return Ok(Recommendation {
            logits: backbone.decode_upper(states)?,
            retrieved: None,
        });
    }
    let z_t = pool_states(states, pooling)?;
    let m = select_top(&retriever.score(&z_t, &bank.vectors())?)?;
    let logits = backbone.decode_upper(&states.with_prefix(&bank.entries[m].vector)?)?;
    Ok(Recommendation {
        logits,
        retrieved: Some(m),
    })
}

/// One supervised retrieval problem: query, bank matrix `[n×d]`, labels `[n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalExample {
    pub z_t: Vec<f64>,
    pub bank: Tensor,
    pub labels: Tensor,
}

impl RetrievalExample {
    pub fn new(z_t: Vec<f64>, bank: &MemoryBank, labels: &[f64]) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if labels.len() != bank.len() {
            return Err(Error::Invalid(format!(
                "{} labels for a bank of {} entries",
                labels.len(),
                bank.len()
            )));
        }
        let d = z_t.len();
        let mut data = Vec::with_capacity(bank.len() * d);
        for e in &bank.entries {
            if e.vector.len() != d {
                return Err(Error::Invalid("bank width differs from the query".into()));
            }
            data.extend_from_slice(&e.vector);
        }
        Ok(Self {
            z_t,
            bank: Tensor::new(vec![bank.len(), d], data)?,
            labels: Tensor::vector(labels.to_vec())?,
        })
    }
}

/// `KL(S′ ‖ S)` for one example, recorded on `tape`.
fn example_loss(r: &Retriever, tape: &Tape<'_>, pv: &[Var], ex: &RetrievalExample) -> Result<Var> {
    let z = tape.leaf(Tensor::new(vec![1, ex.z_t.len()], ex.z_t.clone())?);
    let q = r.query_on(tape, pv, z)?;
    let mt = tape.transpose(tape.leaf(ex.bank.clone()))?;
    let s = tape.softmax(tape.matmul(q, mt)?, 1.0)?;
    Ok(tape.kl_div(&ex.labels, s)?)
}

/// Mean KL over `examples` and its gradient.
pub fn kl_loss_and_grads(
    r: &Retriever,
    examples: &[&RetrievalExample],
) -> Result<(f64, Vec<Tensor>)> {
    let (grads, total) = chunk_grads(r, examples, 1.0 / examples.len() as f64)?;
    Ok((total / examples.len() as f64, grads))
}

fn chunk_grads(
    r: &Retriever,
    examples: &[&RetrievalExample],
    scale: f64,
) -> Result<(Vec<Tensor>, f64)> {
    let tape = Tape::new();
    let pv: Vec<Var> = r.params.iter().map(|t| tape.param(t)).collect();
    let mut total: Option<Var> = None;
    for ex in examples {
        let l = example_loss(r, &tape, &pv, ex)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::EmptyDataset("no retrieval examples".into()))?;
    let sum = tape.value(total)?.item();
    let grads = tape.backward(tape.scale(total, scale)?)?;
    let g = pv
        .iter()
        .map(|&v| grads.wrt(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((g, sum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            chunk_size: 16,
            seed: 0,
        }
    }
}

/// Validation problem: a prompt's lower states, its bank and the target.
pub struct RetrievalValidation<'a> {
    pub states: HiddenSeq,
    pub bank: MemoryBank,
    pub hit: Box<dyn Fn(&[f64]) -> bool + Send + Sync + 'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverEpoch {
    pub epoch: usize,
    pub train_kl: f64,
    pub val_recall1: f64,
}

#[derive(Clone, Debug)]
pub struct RetrieverOutcome {
    pub retriever: Retriever,
    pub epochs: Vec<RetrieverEpoch>,
    pub best_epoch: usize,
}

fn validation_recall(
    r: &Retriever,
    val: &[RetrievalValidation<'_>],
    backbone: &Backbone,
    pooling: Pooling,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let hits = val
        .par_iter()
        .map(|v| {
            let rec = recommend_from_states(&v.states, &v.bank, backbone, r, pooling)?;
            Ok((v.hit)(&rec.logits) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / val.len() as f64)
}

/// Minimizes mean `KL(S′ ‖ S)` with Adam, keeping the parameters with the
/// best validation Recall@1 (patience-based early stop). The backbone must
/// be frozen and is only read.
pub fn train_retriever(
    examples: &[RetrievalExample],
    val: &[RetrievalValidation<'_>],
    backbone: &Backbone,
    pooling: Pooling,
    cfg: &RetrieverTrainConfig,
) -> Result<RetrieverOutcome> {
    if !backbone.is_frozen() {
        return Err(Error::Invalid(
            "the backbone must be frozen while training the retriever".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(
            "no annotated samples with memory".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.chunk_size == 0 || cfg.max_epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "retriever training needs positive lr, batch, chunk and epochs".into(),
        ));
    }
    let d = backbone.config().d_model;
    let mut r = Retriever::init(d, cfg.hidden, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &r.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut epochs = Vec::new();
    let mut best = (
        r.clone(),
        0usize,
        validation_recall(&r, val, backbone, pooling)?,
    );
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut kl_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&RetrievalExample> = batch.iter().map(|&i| &examples[i]).collect();
            let scale = 1.0 / items.len() as f64;
            let parts = items
                .par_chunks(cfg.chunk_size)
                .map(|c| chunk_grads(&r, c, scale))
                .collect::<Result<Vec<_>>>()?;
            let mut parts = parts.into_iter();
            let (mut grads, mut kl) = parts.next().expect("batch is non-empty");
            for (g, l) in parts {
                for (a, b) in grads.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                kl += l;
            }
            kl_total += kl;
            adam.step(&mut r.params, &grads)?;
        }
        let val_recall1 = validation_recall(&r, val, backbone, pooling)?;
        log::info!(
            "retriever epoch {epoch}: kl {:.5}, val recall@1 {:.4}",
            kl_total / examples.len() as f64,
            val_recall1
        );
        epochs.push(RetrieverEpoch {
            epoch,
            train_kl: kl_total / examples.len() as f64,
            val_recall1,
        });
        if val_recall1 > best.2 {
            best = (r.clone(), epoch, val_recall1);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(RetrieverOutcome {
        retriever: best.0,
        epochs,
        best_epoch: best.1,
    })
}

/// One example per annotated record, in record order.
pub fn training_examples(
    split: &DatasetSplit,
    store: &MemoryStore,
    backbone: &Backbone,
    vocab: &ItemVocabulary,
    records: &[AnnotatedSample],
    pooling: Pooling,
) -> Result<Vec<RetrievalExample>> {
    let by_id: HashMap<&str, &Sample> = split.train.iter().map(|s| (s.id.as_str(), s)).collect();
    records
        .par_iter()
        .map(|r| {
            let s = by_id.get(r.sample_id.as_str()).ok_or_else(|| {
                Error::Stale(format!(
                    "annotated sample {} is not in the training split",
                    r.sample_id
                ))
            })?;
            let prompt = tokenize_prompt(&s.window, vocab, split.rule.short)?;
            let z_t = pool_states(&backbone.encode_lower(&prompt, None)?, pooling)?;
            RetrievalExample::new(z_t, &store.bank_for(s)?, &r.labels)
        })
        .collect()
}

/// Validation problems scoring a top-1 hit on each sample's target.
pub fn validation_problems<'a>(
    split: &DatasetSplit,
    samples: &[Sample],
    store: &MemoryStore,
    backbone: &Backbone,
    vocab: &'a ItemVocabulary,
) -> Result<Vec<RetrievalValidation<'a>>> {
    samples
        .par_iter()
        .map(|s| {
            let prompt = tokenize_prompt(&s.window, vocab, split.rule.short)?;
            let target = vocab.index_of(&s.target)?;
            Ok(RetrievalValidation {
                states: backbone.encode_lower(&prompt, None)?,
                bank: store.bank_for(s)?,
                hit: Box::new(move |logits: &[f64]| {
                    rank_of(&item_scores(logits, vocab), target) == 1
                }),
            })
        })
        .collect()
}

/// Takes plain Adam steps on a fixed set of examples, returning the loss
/// before each step. Used to probe optimization behavior.
pub fn fit_steps(
    r: &mut Retriever,
    examples: &[&RetrievalExample],
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), &r.params);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = kl_loss_and_grads(r, examples)?;
        losses.push(loss);
        adam.step(&mut r.params, &grads)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity2() -> Retriever {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        Retriever::from_params(eye.clone(), Tensor::zeros(&[2]), eye, Tensor::zeros(&[2])).unwrap()
    }

    #[test]
    fn identity_scores() {
        let s = identity2()
            .score(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]])
            .unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_banks() {
        let r = identity2();
        assert_eq!(r.score(&[0.3, 0.4], &[&[1.0, 2.0]]).unwrap(), [1.0]);
        let s = r
            .score(&[0.3, 0.4], &[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])
            .unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(r.score(&[0.3, 0.4], &[]), Err(Error::EmptyMemory)));
    }

    #[test]
    fn select_top_rules() {
        assert_eq!(select_top(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(select_top(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_top(&[1.0]).unwrap(), 0);
        assert!(select_top(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = Retriever::init(4, 6, 9).unwrap();
        let back = Retriever::from_checkpoint(
            Checkpoint::from_bytes(&r.to_checkpoint().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, r);
    }
}
