//! Siamese, weight-shared transformer encoder with a mean-pool
//! `[u; v; |u − v|]` classification head.

mod checkpoint;
mod train;

use ndarray::{Array1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{segments_from_lengths, Matrix, Segment, Tape, Var};
use crate::corpus::{SentencePair, Task, TokenSequence};
use crate::persist::PersistError;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use train::{
    evaluate_accuracy, inverse_sqrt_lr, token_budget_batches, train_model, Accuracy, Adam,
    StepLog, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("model has {model} classes but task {task} has {task_classes}")]
    ClassMismatch {
        model: usize,
        task: Task,
        task_classes: usize,
    },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenId { id: usize, vocab_size: usize },
    #[error("no training data")]
    EmptyData,
    #[error("non-finite loss {loss} at step {step} (lr {lr:e}, batch {batch})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub emb_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
}

impl EncoderConfig {
    /// CPU-sized default: 2 layers, 4 heads, ffn 256, width 128.
    pub fn desk(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            emb_dim: 128,
            dropout: 0.1,
            max_len: 64,
            vocab_size,
            n_classes,
        }
    }

    /// Full-size configuration: 6 layers, 8 heads, ffn 1024, width 512.
    pub fn full(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            ffn_dim: 1024,
            emb_dim: 512,
            dropout: 0.1,
            max_len: 256,
            vocab_size,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.n_heads == 0 || self.emb_dim % self.n_heads != 0 {
            return fail(format!(
                "emb_dim {} not divisible by n_heads {}",
                self.emb_dim, self.n_heads
            ));
        }
        if !(self.n_classes == 2 || self.n_classes == 3) {
            return fail(format!("n_classes must be 2 or 3, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, max_len and ffn_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: usize,
    pub max_batch_tokens: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup: 500,
            max_batch_tokens: 64_000,
            epochs: 6,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.lr > 0.0) {
            return Err(EncoderError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(EncoderError::Config(format!("betas must lie in [0, 1), got {b}")));
            }
        }
        if self.max_batch_tokens == 0 {
            return Err(EncoderError::Config("max_batch_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Token representations of every layer; index 0 is the embedding output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
    pub truncated: bool,
}

impl HiddenStates {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |m| m.nrows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub(crate) fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, value: Matrix) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Binds every tensor to `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect()
    }
}

const PER_LAYER: usize = 16;

// Offsets of per-layer tensors within a block of `PER_LAYER`.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let d = Uniform::new_inclusive(-a, a);
    Matrix::from_shape_fn((rows, cols), |_| d.sample(rng))
}

/// Fixed sinusoidal position table, `max_len × dim`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Matrix {
    Matrix::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Dropout source for one forward pass; `None` in evaluation mode.
pub struct DropoutRng<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl DropoutRng<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let dim = tape.value(x).dim();
        let rng = &mut *self.rng;
        let mask = Matrix::from_shape_fn(dim, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.dropout(x, mask)
    }
}

/// The siamese sentence-pair classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PairClassifier {
    pub config: EncoderConfig,
    pub params: ParamStore,
    positions: Matrix,
}

/// Parameters of a [`PairClassifier`] bound to one tape.
pub struct Bound<'m> {
    model: &'m PairClassifier,
    vars: Vec<Var>,
}

impl PairClassifier {
    /// Random initialization, deterministic in `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.emb_dim;
        let mut params = ParamStore::new();
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let mut emb = Matrix::from_shape_fn((config.vocab_size, d), |_| normal.sample(&mut rng));
        emb.row_mut(crate::corpus::PAD_ID).fill(0.0);
        params.push("embedding".into(), emb);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            for n in ["q", "k", "v", "o"] {
                params.push(p(&format!("w{n}")), xavier(d, d, &mut rng));
                params.push(p(&format!("b{n}")), Matrix::zeros((1, d)));
            }
            params.push(p("ln1.gamma"), Matrix::ones((1, d)));
            params.push(p("ln1.beta"), Matrix::zeros((1, d)));
            params.push(p("ffn.w1"), xavier(d, config.ffn_dim, &mut rng));
            params.push(p("ffn.b1"), Matrix::zeros((1, config.ffn_dim)));
            params.push(p("ffn.w2"), xavier(config.ffn_dim, d, &mut rng));
            params.push(p("ffn.b2"), Matrix::zeros((1, d)));
            params.push(p("ln2.gamma"), Matrix::ones((1, d)));
            params.push(p("ln2.beta"), Matrix::zeros((1, d)));
        }
        params.push("head.w".into(), xavier(3 * d, config.n_classes, &mut rng));
        params.push("head.b".into(), Matrix::zeros((1, config.n_classes)));
        Ok(Self::from_parts(config, params))
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: ParamStore) -> Self {
        let positions = sinusoidal_positions(config.max_len, config.emb_dim);
        Self {
            config,
            params,
            positions,
        }
    }

    fn layer_param(&self, layer: usize, offset: usize) -> usize {
        1 + layer * PER_LAYER + offset
    }

    fn head_w(&self) -> usize {
        1 + self.config.n_layers * PER_LAYER
    }

    /// Sets the classification head to zero, making every prediction uniform.
    pub fn zero_head(&mut self) {
        let w = self.head_w();
        self.params.value_mut(w).fill(0.0);
        self.params.value_mut(w + 1).fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        Bound {
            model: self,
            vars: self.params.bind(tape, trainable),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), EncoderError> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(EncoderError::TokenId {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Clips a sequence to `max_len`, reporting whether it was cut.
    pub fn truncate<'a>(&self, ids: &'a [usize]) -> (&'a [usize], bool) {
        if ids.len() > self.config.max_len {
            (&ids[..self.config.max_len], true)
        } else {
            (ids, false)
        }
    }

    /// Runs the encoder on one sequence in evaluation mode.
    pub fn encode(&self, seq: &TokenSequence) -> Result<HiddenStates, EncoderError> {
        self.check_ids(&seq.ids)?;
        let (ids, truncated) = self.truncate(&seq.ids);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let segs = segments_from_lengths([ids.len()]);
        let emb = bound.embed(&mut tape, ids);
        let layers = bound.encode_embedded(&mut tape, emb, &segs, None);
        Ok(HiddenStates {
            layers: layers.iter().map(|&v| tape.value(v).clone()).collect(),
            truncated,
        })
    }

    /// Hidden states of many sequences at once, split per sequence.
    pub fn encode_batch(&self, seqs: &[&[usize]]) -> Result<Vec<HiddenStates>, EncoderError> {
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        let mut truncated = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            let (t, cut) = self.truncate(s);
            ids.extend_from_slice(t);
            lens.push(t.len());
            truncated.push(cut);
        }
        let segs = segments_from_lengths(lens);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let emb = bound.embed(&mut tape, &ids);
        let layers = bound.encode_embedded(&mut tape, emb, &segs, None);
        Ok(segs
            .iter()
            .zip(truncated)
            .map(|(seg, truncated)| HiddenStates {
                layers: layers
                    .iter()
                    .map(|&v| {
                        tape.value(v)
                            .slice(ndarray::s![seg.start..seg.end(), ..])
                            .to_owned()
                    })
                    .collect(),
                truncated,
            })
            .collect())
    }

    /// Mean-pooled sentence vectors (one row per sequence).
    pub fn pooled(&self, seqs: &[&[usize]]) -> Result<Matrix, EncoderError> {
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            let (t, _) = self.truncate(s);
            ids.extend_from_slice(t);
            lens.push(t.len());
        }
        let segs = segments_from_lengths(lens);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let emb = bound.embed(&mut tape, &ids);
        let layers = bound.encode_embedded(&mut tape, emb, &segs, None);
        let last = *layers.last().expect("at least the embedding layer");
        let pooled = tape.segment_mean(last, &segs);
        Ok(tape.value(pooled).clone())
    }

    /// Label distributions from already pooled sentence vectors.
    pub fn classify_pooled(&self, u: &Matrix, v: &Matrix) -> Vec<LabelDistribution> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let u = tape.constant(u.clone());
        let v = tape.constant(v.clone());
        let logits = bound.head(&mut tape, u, v);
        tape.value(logits)
            .outer_iter()
            .map(|row| LabelDistribution::from_logits(row.as_slice().expect("contiguous")))
            .collect()
    }

    /// Label distributions for a batch of pairs in evaluation mode.
    pub fn predict(
        &self,
        pairs: &[(&TokenSequence, &TokenSequence)],
    ) -> Result<Vec<LabelDistribution>, EncoderError> {
        let firsts: Vec<&[usize]> = pairs.iter().map(|p| p.0.ids.as_slice()).collect();
        let seconds: Vec<&[usize]> = pairs.iter().map(|p| p.1.ids.as_slice()).collect();
        let u = self.pooled(&firsts)?;
        let v = self.pooled(&seconds)?;
        Ok(self.classify_pooled(&u, &v))
    }

    /// Distribution for one pair. With `dropout` the pass runs in training
    /// mode.
    pub fn classify_pair(
        &self,
        pair: &SentencePair,
        dropout: Option<DropoutRng<'_>>,
    ) -> Result<LabelDistribution, EncoderError> {
        let task = pair.label.task();
        if task.n_classes() != self.config.n_classes {
            return Err(EncoderError::ClassMismatch {
                model: self.config.n_classes,
                task,
                task_classes: task.n_classes(),
            });
        }
        match dropout {
            None => Ok(self.predict(&[(&pair.first, &pair.second)])?.remove(0)),
            Some(mut d) => {
                self.check_ids(&pair.first.ids)?;
                self.check_ids(&pair.second.ids)?;
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, false);
                let logits = bound.pair_logits(
                    &mut tape,
                    &[pair.first.ids.as_slice()],
                    &[pair.second.ids.as_slice()],
                    Some(&mut d),
                );
                let row = tape.value(logits).row(0).to_vec();
                Ok(LabelDistribution::from_logits(&row))
            }
        }
    }

    /// Position encodings for packed segments.
    fn positions_for(&self, segs: &[Segment]) -> Matrix {
        let total: usize = segs.iter().map(|s| s.len).sum();
        let mut out = Matrix::zeros((total, self.config.emb_dim));
        for seg in segs {
            for p in 0..seg.len {
                out.row_mut(seg.start + p).assign(&self.positions.row(p));
            }
        }
        out
    }
}

/// Arithmetic mean of the last layer's token vectors; zero when empty.
pub fn pool(h: &HiddenStates) -> Array1<f64> {
    let last = h.layers.last().expect("at least one layer");
    if last.nrows() == 0 {
        Array1::zeros(last.ncols())
    } else {
        last.mean_axis(Axis(0)).expect("non-empty")
    }
}

impl Bound<'_> {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Scaled word embeddings of packed ids (`N × d`), before positions.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let g = tape.gather(self.vars[0], ids);
        tape.scale(g, (self.model.config.emb_dim as f64).sqrt())
    }

    /// Adds positions and runs every encoder layer; returns all `L + 1`
    /// hidden states.
    pub fn encode_embedded(
        &self,
        tape: &mut Tape,
        emb: Var,
        segs: &[Segment],
        mut dropout: Option<&mut DropoutRng<'_>>,
    ) -> Vec<Var> {
        let m = self.model;
        let pos = tape.constant(m.positions_for(segs));
        let mut x = tape.add(emb, pos);
        if let Some(d) = dropout.as_deref_mut() {
            x = d.apply(tape, x);
        }
        let mut layers = vec![x];
        for l in 0..m.config.n_layers {
            let p = |o: usize| self.vars[m.layer_param(l, o)];
            let q = tape.linear(x, p(WQ), p(BQ));
            let k = tape.linear(x, p(WK), p(BK));
            let v = tape.linear(x, p(WV), p(BV));
            let a = tape.attention(q, k, v, segs, m.config.n_heads);
            let mut o = tape.linear(a, p(WO), p(BO));
            if let Some(d) = dropout.as_deref_mut() {
                o = d.apply(tape, o);
            }
            let r = tape.add(x, o);
            x = tape.layer_norm(r, p(LN1_G), p(LN1_B));
            let h = tape.linear(x, p(W1), p(B1));
            let h = tape.gelu(h);
            let mut f = tape.linear(h, p(W2), p(B2));
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f);
            }
            let r = tape.add(x, f);
            x = tape.layer_norm(r, p(LN2_G), p(LN2_B));
            layers.push(x);
        }
        layers
    }

    /// Mean-pooled last layer, one row per segment.
    pub fn pool(&self, tape: &mut Tape, layers: &[Var], segs: &[Segment]) -> Var {
        tape.segment_mean(*layers.last().expect("non-empty"), segs)
    }

    /// Logits from pooled `u`, `v` via `[u; v; |u − v|]`.
    pub fn head(&self, tape: &mut Tape, u: Var, v: Var) -> Var {
        let w = self.model.head_w();
        let diff = tape.sub(u, v);
        let diff = tape.abs(diff);
        let feats = tape.concat_cols(&[u, v, diff]);
        tape.linear(feats, self.vars[w], self.vars[w + 1])
    }

    /// Pooled sentence vectors for packed sequences.
    pub fn sentence_vectors(
        &self,
        tape: &mut Tape,
        seqs: &[&[usize]],
        dropout: Option<&mut DropoutRng<'_>>,
    ) -> Var {
        let mut ids = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let (t, _) = self.model.truncate(s);
            ids.extend_from_slice(t);
            lens.push(t.len());
        }
        let segs = segments_from_lengths(lens);
        let emb = self.embed(tape, &ids);
        let layers = self.encode_embedded(tape, emb, &segs, dropout);
        self.pool(tape, &layers, &segs)
    }

    pub fn pair_logits(
        &self,
        tape: &mut Tape,
        firsts: &[&[usize]],
        seconds: &[&[usize]],
        mut dropout: Option<&mut DropoutRng<'_>>,
    ) -> Var {
        let u = self.sentence_vectors(tape, firsts, dropout.as_deref_mut());
        let v = self.sentence_vectors(tape, seconds, dropout);
        self.head(tape, u, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    fn tiny(n_layers: usize) -> PairClassifier {
        let cfg = EncoderConfig {
            n_layers,
            n_heads: 2,
            ffn_dim: 16,
            emb_dim: 8,
            dropout: 0.1,
            max_len: 10,
            vocab_size: 12,
            n_classes: 3,
        };
        PairClassifier::new(cfg, 7).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            tokens: ids.iter().map(|i| format!("t{i}")).collect(),
            ids: ids.to_vec(),
        }
    }

    #[test]
    fn empty_sequence_gives_zero_rows() {
        let m = tiny(2);
        let h = m.encode(&seq(&[])).unwrap();
        assert_eq!(h.layers.len(), 3);
        assert!(h.layers.iter().all(|l| l.dim() == (0, 8)));
        assert!(pool(&h).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let m = tiny(2);
        let s = seq(&[2, 3, 4, 5, 6]);
        let a = m.encode(&s).unwrap();
        let b = m.encode(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 3);
        assert!(a.layers.iter().all(|l| l.dim() == (5, 8)));
    }

    #[test]
    fn pool_is_mean() {
        let m = tiny(1);
        let single = m.encode(&seq(&[4])).unwrap();
        assert_eq!(pool(&single), single.layers[1].row(0).to_owned());
        let two = m.encode(&seq(&[4, 9])).unwrap();
        let p = pool(&two);
        for j in 0..8 {
            let expect = (two.layers[1][[0, j]] + two.layers[1][[1, j]]) / 2.0;
            assert!((p[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_flagged() {
        let m = tiny(1);
        let h = m.encode(&seq(&[2; 14])).unwrap();
        assert!(h.truncated);
        assert_eq!(h.seq_len(), 10);
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let m = tiny(1);
        assert!(matches!(
            m.encode(&seq(&[99])),
            Err(EncoderError::TokenId { id: 99, .. })
        ));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = tiny(2);
        m.zero_head();
        let pair = SentencePair {
            id: "p".into(),
            first: seq(&[2, 3]),
            second: seq(&[5]),
            label: Label::Neutral,
        };
        let d = m.classify_pair(&pair, None).unwrap();
        for p in &d.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_mismatch() {
        let m = tiny(1);
        let pair = SentencePair {
            id: "p".into(),
            first: seq(&[2]),
            second: seq(&[3]),
            label: Label::Paraphrase,
        };
        assert!(matches!(
            m.classify_pair(&pair, None),
            Err(EncoderError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn probabilities_sum_to_one_in_both_modes() {
        let m = tiny(2);
        let pair = SentencePair {
            id: "p".into(),
            first: seq(&[2, 3, 7]),
            second: seq(&[5, 11]),
            label: Label::Entailment,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = m
            .classify_pair(&pair, Some(DropoutRng { rate: 0.3, rng: &mut rng }))
            .unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let e = m.classify_pair(&pair, None).unwrap();
        assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let m = tiny(2);
        let a: &[usize] = &[2, 3, 4];
        let b: &[usize] = &[];
        let c: &[usize] = &[7, 8];
        let batch = m.encode_batch(&[a, b, c]).unwrap();
        for (s, h) in [a, b, c].iter().zip(&batch) {
            let single = m.encode(&seq(s)).unwrap();
            for (x, y) in single.layers.iter().zip(&h.layers) {
                let diff = (x - y).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(diff < 1e-12, "{diff}");
            }
        }
    }

    #[test]
    fn same_sequence_same_states_on_either_side() {
        let m = tiny(2);
        let s: &[usize] = &[3, 4, 5];
        let h = m.encode_batch(&[s, &[9], s]).unwrap();
        assert_eq!(h[0], h[2]);
    }

    #[test]
    fn argmax_ties_lowest() {
        let d = LabelDistribution {
            probs: vec![0.4, 0.4, 0.2],
        };
        assert_eq!(d.argmax(), 0);
    }
}
