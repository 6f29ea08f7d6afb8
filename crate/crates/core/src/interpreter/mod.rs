//! Per-layer mask predictors trained against a frozen classifier, and the
//! token scores read off them.
//!
//! Training follows a two-pass scheme. The unmasked pass yields the
//! classifier's distribution `y` and the hidden states of every layer for
//! the sentence being masked. Predictor `k` reads each token's layer-`k`
//! state; the gate location at layer `k` sums predictors `0..=k`. Sampled
//! gates interpolate the token's word embedding toward a learned baseline,
//! and the masked sentence is re-encoded to give `ŷ`. For every layer the
//! objective trades the expected number of open gates against
//! `KL(y ‖ ŷ)` through that layer's Lagrange multiplier.

mod scores;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::{Matrix, Tape, Var, PROB_FLOOR};
use crate::encoder::{xavier, Checkpoint, EncoderError, HiddenStates, LabelDistribution, ParamStore};
use crate::corpus::{SentencePair, TokenSequence};
use crate::gates::{GateLocations, HardConcreteParams};
use crate::persist::{self, PersistError, Provenance};

pub use scores::{read_scores, write_scores, ScoreIndex, ScoreRecord};
pub use train::{
    build_interpreter_loss, masked_kl, train_interpreter, InterpStepLog, InterpreterConfig,
    InterpreterOutcome, LossParts, MaskedBatch,
};

#[derive(Debug, Error)]
pub enum InterpreterError {
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("expected {expected} hidden layers, got {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("invalid interpreter config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("score file {path}: {message}")]
    ScoreFile { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    First,
    Second,
}

impl Side {
    pub fn of(self, pair: &SentencePair) -> &TokenSequence {
        match self {
            Side::First => &pair.first,
            Side::Second => &pair.second,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::First => "first",
            Side::Second => "second",
        }
    }
}

/// Lagrange multiplier for the divergence constraint `KL ≤ margin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub margin: f64,
    pub lr: f64,
}

impl LagrangianState {
    /// Projected gradient ascent on `λ · (kl − margin)`.
    pub fn update(&mut self, kl: f64) {
        self.lambda = (self.lambda + self.lr * (kl - self.margin)).max(0.0);
    }
}

/// `KL(y ‖ ŷ)` with `ŷ` floored at [`PROB_FLOOR`].
pub fn kl_divergence(y: &LabelDistribution, y_hat: &LabelDistribution) -> f64 {
    y.probs
        .iter()
        .zip(&y_hat.probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(PROB_FLOOR).ln()))
        .sum()
}

/// Objective for one masked example: expected L0 summed over every
/// predictor layer and divided by the sentence length, plus
/// `λ · (KL(y ‖ ŷ) − margin)`.
pub fn interpreter_loss(
    y: &LabelDistribution,
    y_hat: &LabelDistribution,
    locs: &GateLocations,
    lag: &LagrangianState,
    gate: &HardConcreteParams,
) -> f64 {
    let n = locs.last().len().max(1) as f64;
    locs.expected_l0(gate) / n + lag.lambda * (kl_divergence(y, y_hat) - lag.margin)
}

/// Maps each raw score into `[0, 1]` by the sentence's own minimum and
/// maximum; constant input maps to `0.5`.
pub fn rescale_minmax(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max - min <= 1e-12 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&x| (x - min) / (max - min)).collect()
}

/// `z_i · x_i + (1 − z_i) · baseline` row by row.
pub fn apply_soft_mask(embeddings: &Matrix, gates: &[f64], baseline: &[f64]) -> Matrix {
    assert_eq!(embeddings.nrows(), gates.len(), "one gate per token");
    assert_eq!(embeddings.ncols(), baseline.len());
    Matrix::from_shape_fn(embeddings.dim(), |(i, j)| {
        gates[i] * embeddings[[i, j]] + (1.0 - gates[i]) * baseline[j]
    })
}

/// Per-token scores of one sentence of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub id: String,
    pub side: Side,
    pub tokens: Vec<String>,
    pub raw: Vec<f64>,
    pub rescaled: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_raw: Option<Vec<Vec<f64>>>,
}

const INTERP_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WIMPINT\0";

/// `L + 1` single-hidden-layer perceptrons plus the masking baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpreter {
    pub gate: HardConcreteParams,
    pub hidden: usize,
    pub emb_dim: usize,
    pub n_layers: usize,
    pub vocab_hash: String,
    pub encoder_fingerprint: String,
    /// Predictor `k` owns entries `4k..4k+4` (w1, b1, w2, b2); the baseline
    /// vector is last.
    pub params: ParamStore,
    pub provenance: Option<Provenance>,
}

impl Interpreter {
    /// Fresh predictors for `encoder`. Output layers start at zero, so every
    /// initial location is 0.
    pub fn new(encoder: &Checkpoint, hidden: usize, gate: HardConcreteParams, seed: u64) -> Self {
        let d = encoder.encoder.emb_dim;
        let n_layers = encoder.encoder.n_layers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for k in 0..=n_layers {
            params.push(format!("pred{k}.w1"), xavier(d, hidden, &mut rng));
            params.push(format!("pred{k}.b1"), Matrix::zeros((1, hidden)));
            params.push(format!("pred{k}.w2"), Matrix::zeros((hidden, 1)));
            params.push(format!("pred{k}.b2"), Matrix::zeros((1, 1)));
        }
        params.push("baseline".into(), Matrix::zeros((1, d)));
        Self {
            gate,
            hidden,
            emb_dim: d,
            n_layers,
            vocab_hash: encoder.vocabulary.fingerprint(),
            encoder_fingerprint: encoder.fingerprint(),
            params,
            provenance: None,
        }
    }

    pub fn n_predictors(&self) -> usize {
        self.n_layers + 1
    }

    pub fn baseline_index(&self) -> usize {
        4 * self.n_predictors()
    }

    pub fn baseline(&self) -> &[f64] {
        self.params
            .value(self.baseline_index())
            .as_slice()
            .expect("contiguous")
    }

    /// Fails unless `encoder` has this interpreter's width, depth and
    /// vocabulary.
    pub fn check_compatible(&self, encoder: &Checkpoint) -> Result<(), InterpreterError> {
        let mut problems = Vec::new();
        if encoder.encoder.emb_dim != self.emb_dim {
            problems.push(format!(
                "emb_dim {} vs {}",
                encoder.encoder.emb_dim, self.emb_dim
            ));
        }
        if encoder.encoder.n_layers != self.n_layers {
            problems.push(format!(
                "n_layers {} vs {}",
                encoder.encoder.n_layers, self.n_layers
            ));
        }
        if encoder.vocabulary.fingerprint() != self.vocab_hash {
            problems.push("vocabulary hash differs".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(InterpreterError::Incompatible(problems.join("; ")))
        }
    }

    /// Output of predictor `k` for packed layer-`k` token states, on a tape.
    pub fn predictor_var(&self, tape: &mut Tape, vars: &[Var], k: usize, states: Var) -> Var {
        let b = 4 * k;
        let h = tape.linear(states, vars[b], vars[b + 1]);
        let h = tape.tanh(h);
        tape.linear(h, vars[b + 2], vars[b + 3])
    }

    /// Gate locations on a tape for layers `0..states.len()`: location `k` is
    /// the sum of the outputs of predictors `0..=k`.
    pub fn locations_vars(&self, tape: &mut Tape, vars: &[Var], states: &[Var]) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::with_capacity(states.len());
        for (k, &s) in states.iter().enumerate() {
            let o = self.predictor_var(tape, vars, k, s);
            let loc = match out.last() {
                Some(&prev) => tape.add(prev, o),
                None => o,
            };
            out.push(loc);
        }
        out
    }

    fn predictor_output(&self, k: usize, states: &Matrix) -> Vec<f64> {
        let b = 4 * k;
        let p = |i| self.params.value(b + i);
        let h = (states.dot(p(0)) + p(1)).mapv(f64::tanh);
        let out = h.dot(p(2)) + p(3);
        out.column(0).to_vec()
    }

    /// Gate locations of every token at every layer. Predictor `k` reads
    /// only the layer-`k` state of a token; the location at layer `k`
    /// accumulates predictors `0..=k`.
    pub fn predict_locations(&self, h: &HiddenStates) -> Result<GateLocations, InterpreterError> {
        if h.layers.len() != self.n_predictors() {
            return Err(InterpreterError::LayerCount {
                expected: self.n_predictors(),
                found: h.layers.len(),
            });
        }
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(h.layers.len());
        for (k, states) in h.layers.iter().enumerate() {
            let mut loc = self.predictor_output(k, states);
            if let Some(prev) = layers.last() {
                for (l, p) in loc.iter_mut().zip(prev) {
                    *l += p;
                }
            }
            layers.push(loc);
        }
        Ok(GateLocations { layers })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        persist::encode(MAGIC, INTERP_VERSION, self)
    }

    pub fn save(&self, path: &Path) -> Result<(), InterpreterError> {
        Ok(persist::write(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, InterpreterError> {
        let bytes = persist::read(path)?;
        Ok(persist::decode(
            &bytes,
            MAGIC,
            INTERP_VERSION,
            "interpreter checkpoint",
            &path.display().to_string(),
        )?)
    }
}

/// Scores one side of a pair with the last-layer predictor. No sampling.
pub fn attribute(
    encoder: &Checkpoint,
    interp: &Interpreter,
    pair: &SentencePair,
    side: Side,
) -> Result<AttributionRecord, InterpreterError> {
    interp.check_compatible(encoder)?;
    let model = encoder.model();
    score_sequence(&model, interp, &pair.id, side, side.of(pair), false)
}

fn score_sequence(
    model: &crate::encoder::PairClassifier,
    interp: &Interpreter,
    id: &str,
    side: Side,
    seq: &TokenSequence,
    keep_layers: bool,
) -> Result<AttributionRecord, InterpreterError> {
    let h = model.encode(seq)?;
    let locs = interp.predict_locations(&h)?;
    let per_layer: Vec<Vec<f64>> = locs
        .layers
        .iter()
        .map(|l| l.iter().map(|&x| interp.gate.prob_nonzero(x)).collect())
        .collect();
    let raw = per_layer.last().cloned().unwrap_or_default();
    let mut tokens = seq.tokens.clone();
    tokens.truncate(raw.len());
    Ok(AttributionRecord {
        id: id.to_string(),
        side,
        rescaled: rescale_minmax(&raw),
        raw,
        tokens,
        per_layer_raw: keep_layers.then_some(per_layer),
    })
}

/// Scores both sides of every pair, in pair order (first, then second).
pub fn attribute_all(
    encoder: &Checkpoint,
    interp: &Interpreter,
    pairs: &[SentencePair],
    keep_layers: bool,
) -> Result<Vec<AttributionRecord>, InterpreterError> {
    interp.check_compatible(encoder)?;
    let model = encoder.model();
    let jobs: Vec<(&SentencePair, Side)> = pairs
        .iter()
        .flat_map(|p| [(p, Side::First), (p, Side::Second)])
        .collect();
    jobs.par_iter()
        .map(|(p, side)| score_sequence(&model, interp, &p.id, *side, side.of(p), keep_layers))
        .collect()
}
