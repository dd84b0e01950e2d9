//! Decoder-only causal transformer over item tokens, split at layer `L`.
//!
//! Prompts are `[PREFIX_SLOT, items.., PRED]`. The lower stack (layers
//! `1..=L`) turns a prompt into layer-`L` states; a memory vector is injected
//! by overwriting row 0 of those states, and the upper stack (layers
//! `L+1..`) reads the result. Because attention is causal, row 0 of any
//! lower pass is the same constant vector, which is therefore the null
//! prefix.

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mrgr_numerics::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::vocab::{ItemVocabulary, TokenId, NULL_PREFIX, PRED, PREFIX_SLOT};

pub use train::{train_backbone, BackboneTrainConfig, EpochLog, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub split_layer: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 4,
            split_layer: 2,
            n_heads: 4,
            ff_dim: 128,
            max_seq_len: 12,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.vocab_size <= PRED + 1 {
            return fail(format!(
                "vocab_size {} leaves no item tokens",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.split_layer == 0 || self.split_layer >= self.n_layers {
            return fail(format!(
                "split_layer {} must lie strictly inside 1..{}",
                self.split_layer, self.n_layers
            ));
        }
        if self.max_seq_len < 12 {
            return fail(format!("max_seq_len {} is below 12", self.max_seq_len));
        }
        if self.ff_dim == 0 {
            return fail("ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn per_layer(&self) -> usize {
        4 * self.n_heads + 9
    }

    fn n_params(&self) -> usize {
        GLOBALS + self.n_layers * self.per_layer()
    }
}

/// States of a token sequence after some layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSeq {
    pub layer: usize,
    pub states: Tensor,
}

impl HiddenSeq {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self) -> &[f64] {
        self.states.row(self.len() - 1)
    }

    /// Copy with row 0 overwritten by `prefix`.
    pub fn with_prefix(&self, prefix: &[f64]) -> Result<HiddenSeq> {
        let d = self.states.cols();
        if prefix.len() != d {
            return Err(Error::Invalid(format!(
                "prefix has {} values, states have width {d}",
                prefix.len()
            )));
        }
        let mut data = self.states.data().to_vec();
        data[..d].copy_from_slice(prefix);
        Ok(HiddenSeq {
            layer: self.layer,
            states: Tensor::new(self.states.shape().to_vec(), data)?,
        })
    }
}

/// `[PREFIX_SLOT] + item tokens + [PRED]`.
pub fn tokenize_prompt<S: AsRef<str>>(
    window: &[S],
    vocab: &ItemVocabulary,
    max_items: usize,
) -> Result<Vec<TokenId>> {
    if window.len() > max_items {
        return Err(Error::Invalid(format!(
            "window of {} items exceeds the short window of {max_items}",
            window.len()
        )));
    }
    let mut tokens = vec![PREFIX_SLOT];
    for item in window {
        tokens.extend_from_slice(vocab.tokens_of(item.as_ref())?);
    }
    tokens.push(PRED);
    Ok(tokens)
}

/// Prompt followed by all but the last target token, the input for
/// teacher-forced scoring of `target`.
pub fn teacher_forced(prompt: &[TokenId], target: &[TokenId]) -> Vec<TokenId> {
    let mut t = prompt.to_vec();
    if let Some((_, head)) = target.split_last() {
        t.extend_from_slice(head);
    }
    t
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const LNF_G: usize = 2;
const LNF_B: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;
const GLOBALS: usize = 6;

/// Offsets of one block's tensors relative to the block base.
struct BlockLayout {
    base: usize,
    heads: usize,
}

impl BlockLayout {
    fn ln1_g(&self) -> usize {
        self.base
    }
    fn ln1_b(&self) -> usize {
        self.base + 1
    }
    fn wq(&self, h: usize) -> usize {
        self.base + 2 + h
    }
    fn wk(&self, h: usize) -> usize {
        self.base + 2 + self.heads + h
    }
    fn wv(&self, h: usize) -> usize {
        self.base + 2 + 2 * self.heads + h
    }
    fn wo(&self, h: usize) -> usize {
        self.base + 2 + 3 * self.heads + h
    }
    fn bo(&self) -> usize {
        self.base + 2 + 4 * self.heads
    }
    fn ln2_g(&self) -> usize {
        self.bo() + 1
    }
    fn ln2_b(&self) -> usize {
        self.bo() + 2
    }
    fn w1(&self) -> usize {
        self.bo() + 3
    }
    fn b1(&self) -> usize {
        self.bo() + 4
    }
    fn w2(&self) -> usize {
        self.bo() + 5
    }
    fn b2(&self) -> usize {
        self.bo() + 6
    }
}

/// Per-sample dropout masks, drawn from a seeded stream.
pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, rows: usize, cols: usize) -> Tensor {
        let keep = 1.0 / (1.0 - self.rate);
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Tensor::new(vec![rows, cols], data).expect("mask is finite")
    }
}

/// Parameters `φ` plus the frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: ModelConfig,
    params: Vec<Tensor>,
    frozen: bool,
}

impl Backbone {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.ff_dim);
        let dh = config.head_dim();
        let mut uniform = |shape: &[usize], bound: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        let mut params = Vec::with_capacity(config.n_params());
        params.push(uniform(&[v, d], 0.1));
        params.push(uniform(&[config.max_seq_len, d], 0.1));
        params.push(ones(d));
        params.push(Tensor::zeros(&[d]));
        params.push(uniform(&[d, v], 1.0 / (d as f64).sqrt()));
        params.push(Tensor::zeros(&[v]));
        let lin = 1.0 / (d as f64).sqrt();
        for _ in 0..config.n_layers {
            params.push(ones(d));
            params.push(Tensor::zeros(&[d]));
            for _ in 0..3 * config.n_heads {
                params.push(uniform(&[d, dh], lin));
            }
            for _ in 0..config.n_heads {
                params.push(uniform(&[dh, d], 1.0 / (d as f64).sqrt()));
            }
            params.push(Tensor::zeros(&[d]));
            params.push(ones(d));
            params.push(Tensor::zeros(&[d]));
            params.push(uniform(&[d, f], lin));
            params.push(Tensor::zeros(&[f]));
            params.push(uniform(&[f, d], 1.0 / (f as f64).sqrt()));
            params.push(Tensor::zeros(&[d]));
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuilds from named tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::init(config, 0)?;
        let names = template.param_names();
        if tensors.len() != names.len() {
            return Err(Error::Format(format!(
                "backbone expects {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(names.len());
        for ((name, t), (want, tmpl)) in tensors.into_iter().zip(names.iter().zip(&template.params))
        {
            if &name != want || t.shape() != tmpl.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    tmpl.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config: template.config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Applies one optimizer step unless frozen, in which case the
    /// parameters are left untouched.
    pub fn apply_step(
        &mut self,
        adam: &mut mrgr_numerics::AdamState,
        grads: &[Tensor],
    ) -> Result<bool> {
        if self.frozen {
            return Ok(false);
        }
        adam.step(&mut self.params, grads)?;
        Ok(true)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "tok_emb",
            "pos_emb",
            "ln_f.gamma",
            "ln_f.beta",
            "out.w",
            "out.b",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for l in 0..self.config.n_layers {
            let p = format!("layers.{l}");
            names.push(format!("{p}.ln1.gamma"));
            names.push(format!("{p}.ln1.beta"));
            for kind in ["wq", "wk", "wv", "wo"] {
                for h in 0..self.config.n_heads {
                    names.push(format!("{p}.attn.{kind}.{h}"));
                }
            }
            names.push(format!("{p}.attn.bo"));
            names.push(format!("{p}.ln2.gamma"));
            names.push(format!("{p}.ln2.beta"));
            names.push(format!("{p}.ff.w1"));
            names.push(format!("{p}.ff.b1"));
            names.push(format!("{p}.ff.w2"));
            names.push(format!("{p}.ff.b2"));
        }
        names
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.param_names()
            .into_iter()
            .zip(self.params.iter().cloned())
            .collect()
    }

    fn layout(&self, layer: usize) -> BlockLayout {
        BlockLayout {
            base: GLOBALS + layer * self.config.per_layer(),
            heads: self.config.n_heads,
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn bind<'p>(&'p self, tape: &Tape<'p>) -> Vec<Var> {
        self.params.iter().map(|t| tape.param(t)).collect()
    }

    pub(crate) fn embed_on(&self, tape: &Tape<'_>, pv: &[Var], tokens: &[TokenId]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather_rows(pv[TOK_EMB], tokens)?;
        let pos = tape.gather_rows(pv[POS_EMB], &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    /// One pre-norm block: `x + attn(ln1 x)`, then `x + ff(ln2 x)`.
    pub(crate) fn block_on(
        &self,
        tape: &Tape<'_>,
        pv: &[Var],
        layer: usize,
        x: Var,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        let b = self.layout(layer);
        let n = tape.shape(x)?[0];
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let h = tape.layer_norm(x, pv[b.ln1_g()], pv[b.ln1_b()])?;
        let mut attn: Option<Var> = None;
        for head in 0..self.config.n_heads {
            let q = tape.matmul(h, pv[b.wq(head)])?;
            let k = tape.matmul(h, pv[b.wk(head)])?;
            let v = tape.matmul(h, pv[b.wv(head)])?;
            let kt = tape.transpose(k)?;
            let scores = tape.scale(tape.matmul(q, kt)?, scale)?;
            let weights = tape.causal_softmax(scores)?;
            let ctx = tape.matmul(weights, v)?;
            let out = tape.matmul(ctx, pv[b.wo(head)])?;
            attn = Some(match attn {
                None => out,
                Some(acc) => tape.add(acc, out)?,
            });
        }
        let mut attn = tape.add_row(attn.expect("n_heads >= 1"), pv[b.bo()])?;
        if let Some(d) = dropout.as_mut() {
            attn = tape.mul(attn, tape.leaf(d.mask(n, self.config.d_model)))?;
        }
        let x = tape.add(x, attn)?;
        let h = tape.layer_norm(x, pv[b.ln2_g()], pv[b.ln2_b()])?;
        let h = tape.relu(tape.add_row(tape.matmul(h, pv[b.w1()])?, pv[b.b1()])?)?;
        let mut ff = tape.add_row(tape.matmul(h, pv[b.w2()])?, pv[b.b2()])?;
        if let Some(d) = dropout.as_mut() {
            ff = tape.mul(ff, tape.leaf(d.mask(n, self.config.d_model)))?;
        }
        Ok(tape.add(x, ff)?)
    }

    pub(crate) fn lower_on(
        &self,
        tape: &Tape<'_>,
        pv: &[Var],
        tokens: &[TokenId],
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        let mut x = self.embed_on(tape, pv, tokens)?;
        for l in 0..self.config.split_layer {
            x = self.block_on(tape, pv, l, x, dropout)?;
        }
        Ok(x)
    }

    /// Upper layers, then logits for the given rows.
    pub(crate) fn upper_on(
        &self,
        tape: &Tape<'_>,
        pv: &[Var],
        mut x: Var,
        rows: &[usize],
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        for l in self.config.split_layer..self.config.n_layers {
            x = self.block_on(tape, pv, l, x, dropout)?;
        }
        self.head_on(tape, pv, x, rows)
    }

    fn head_on(&self, tape: &Tape<'_>, pv: &[Var], x: Var, rows: &[usize]) -> Result<Var> {
        let picked = tape.select_rows(x, rows)?;
        let h = tape.layer_norm(picked, pv[LNF_G], pv[LNF_B])?;
        Ok(tape.add_row(tape.matmul(h, pv[W_OUT])?, pv[B_OUT])?)
    }

    /// Replaces row 0 of `x` with the `[1×d]` or `[d]` value `prefix`.
    pub(crate) fn inject_on(tape: &Tape<'_>, x: Var, prefix: Var) -> Result<Var> {
        let n = tape.shape(x)?[0];
        if n == 1 {
            return Ok(tape.concat_rows(&[prefix])?);
        }
        let rest: Vec<usize> = (1..n).collect();
        let tail = tape.select_rows(x, &rest)?;
        Ok(tape.concat_rows(&[prefix, tail])?)
    }

    /// Layer-`L` states of `tokens`; row 0 is `prefix` when given.
    pub fn encode_lower(&self, tokens: &[TokenId], prefix: Option<&[f64]>) -> Result<HiddenSeq> {
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let x = self.lower_on(&tape, &pv, tokens, &mut None)?;
        let seq = HiddenSeq {
            layer: self.config.split_layer,
            states: tape.value(x)?,
        };
        match prefix {
            Some(p) => seq.with_prefix(p),
            None => Ok(seq),
        }
    }

    /// Next-token logits at the last position.
    pub fn decode_upper(&self, states: &HiddenSeq) -> Result<Vec<f64>> {
        let rows = [states.len() - 1];
        Ok(self.decode_upper_rows(states, &rows)?.into_data())
    }

    /// Logits `[rows × vocab]` for the requested positions.
    pub fn decode_upper_rows(&self, states: &HiddenSeq, rows: &[usize]) -> Result<Tensor> {
        if states.layer != self.config.split_layer {
            return Err(Error::Invalid(format!(
                "states come from layer {}, upper stack starts after layer {}",
                states.layer, self.config.split_layer
            )));
        }
        if states.is_empty() || states.states.cols() != self.config.d_model {
            return Err(Error::Invalid("states do not match the model width".into()));
        }
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let x = tape.leaf(states.states.clone());
        let logits = self.upper_on(&tape, &pv, x, rows, &mut None)?;
        Ok(tape.value(logits)?)
    }

    /// Unsplit pass through every layer; the prefix replaces row 0 between
    /// layer `L` and `L+1`.
    pub fn forward(&self, tokens: &[TokenId], prefix: Option<&[f64]>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let pv = self.bind(&tape);
        let mut x = self.embed_on(&tape, &pv, tokens)?;
        for l in 0..self.config.n_layers {
            if l == self.config.split_layer {
                if let Some(p) = prefix {
                    if p.len() != self.config.d_model {
                        return Err(Error::Invalid(format!(
                            "prefix has {} values, model width is {}",
                            p.len(),
                            self.config.d_model
                        )));
                    }
                    let pvar = tape.leaf(Tensor::new(vec![1, p.len()], p.to_vec())?);
                    x = Self::inject_on(&tape, x, pvar)?;
                }
            }
            x = self.block_on(&tape, &pv, l, x, &mut None)?;
        }
        let logits = self.head_on(&tape, &pv, x, &[tokens.len() - 1])?;
        Ok(tape.value(logits)?.into_data())
    }

    /// The layer-`L` state of the prefix slot holding `NULL_PREFIX`.
    pub fn null_prefix(&self) -> Result<Vec<f64>> {
        Ok(self.encode_lower(&[NULL_PREFIX], None)?.states.into_data())
    }

    /// Teacher-forced probability of `target`, read from `states` of
    /// `teacher_forced(prompt, target)`: the last `|target|` positions
    /// predict its tokens in order.
    pub fn sequence_prob(&self, states: &HiddenSeq, target: &[TokenId]) -> Result<f64> {
        Ok(self.sequence_log_prob(states, target)?.exp())
    }

    pub fn sequence_log_prob(&self, states: &HiddenSeq, target: &[TokenId]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::Invalid("empty target".into()));
        }
        if target.len() > states.len() {
            return Err(Error::Invalid(
                "target longer than the encoded sequence".into(),
            ));
        }
        if let Some(&t) = target.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        let first = states.len() - target.len();
        let rows: Vec<usize> = (first..states.len()).collect();
        let logits = self.decode_upper_rows(states, &rows)?;
        let mut total = 0.0;
        for (i, &t) in target.iter().enumerate() {
            total += log_softmax_at(logits.row(i), t);
        }
        Ok(total)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("finite")
}

/// `ln softmax(row)[t]`, via log-sum-exp.
pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 3,
            split_layer: 1,
            n_heads: 2,
            ff_dim: 16,
            max_seq_len: 12,
            dropout: 0.0,
        };
        Backbone::init(cfg, 3).unwrap()
    }

    #[test]
    fn shapes_and_split() {
        let m = tiny();
        let toks = [0, 4, 5, 6, 1];
        let h = m.encode_lower(&toks, None).unwrap();
        assert_eq!(h.states.shape(), &[5, 8]);
        let logits = m.decode_upper(&h).unwrap();
        assert_eq!(logits.len(), 9);
        assert_eq!(logits, m.forward(&toks, None).unwrap());
    }

    #[test]
    fn null_prefix_is_neutral() {
        let m = tiny();
        let toks = [0, 4, 5, 1];
        let null = m.null_prefix().unwrap();
        let a = m.encode_lower(&toks, None).unwrap();
        let b = m.encode_lower(&toks, Some(&null)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            m.forward(&toks, Some(&null)).unwrap(),
            m.forward(&toks, None).unwrap()
        );
    }

    #[test]
    fn prefix_changes_output() {
        let m = tiny();
        let toks = [0, 4, 5, 1];
        let other = m.encode_lower(&[0, 7, 8, 1], None).unwrap();
        let with = m.forward(&toks, Some(other.last())).unwrap();
        assert_ne!(with, m.forward(&toks, None).unwrap());
        let split = m
            .decode_upper(&m.encode_lower(&toks, Some(other.last())).unwrap())
            .unwrap();
        assert_eq!(split, with);
    }

    #[test]
    fn rejects_bad_input() {
        let m = tiny();
        assert!(matches!(
            m.encode_lower(&[0, 9], None),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(m.encode_lower(&[0; 13], None).is_err());
        let h = m.encode_lower(&[0, 1], None).unwrap();
        assert!(m.sequence_prob(&h, &[]).is_err());
        let wrong = HiddenSeq { layer: 2, ..h };
        assert!(m.decode_upper(&wrong).is_err());
    }

    #[test]
    fn frozen_step_is_noop() {
        let mut m = tiny();
        let grads: Vec<Tensor> = m.params().iter().map(|p| ones_like(p)).collect();
        let mut adam = mrgr_numerics::AdamState::new(Default::default(), m.params());
        m.freeze();
        let before = m.clone();
        assert!(!m.apply_step(&mut adam, &grads).unwrap());
        assert_eq!(m.params(), before.params());
        m.unfreeze();
        assert!(m.apply_step(&mut adam, &grads).unwrap());
        assert_ne!(m.params(), before.params());
    }

    fn ones_like(t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), vec![1.0; t.len()]).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = [
            ModelConfig {
                split_layer: 0,
                ..ModelConfig::with_vocab(10)
            },
            ModelConfig {
                split_layer: 4,
                ..ModelConfig::with_vocab(10)
            },
            ModelConfig {
                n_heads: 3,
                ..ModelConfig::with_vocab(10)
            },
            ModelConfig {
                max_seq_len: 11,
                ..ModelConfig::with_vocab(10)
            },
            ModelConfig::with_vocab(2),
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(ModelConfig::with_vocab(10).validate().is_ok());
    }
}
