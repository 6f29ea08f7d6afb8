use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, DropoutRng, EncoderConfig, EncoderError, PairClassifier, TrainConfig};
use crate::autodiff::{Matrix, Tape};
use crate::corpus::{SentencePair, Vocabulary};

/// Inverse square-root schedule: linear warmup to `base` over `warmup`
/// updates, then `base · sqrt(warmup / step)`. Steps count from 1.
pub fn inverse_sqrt_lr(step: usize, base: f64, warmup: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step <= warmup {
        base * step / warmup
    } else {
        base * (warmup / step).sqrt()
    }
}

/// Adaptive-moment optimizer over a list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[Matrix], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            v: shapes.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    /// One update; tensors without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut params[i])
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Shuffles example indices and packs them greedily into batches whose
/// token count stays within `max_tokens` (a batch holds at least one
/// example).
pub fn token_budget_batches(
    token_counts: &[usize],
    max_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..token_counts.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = token_counts[i];
        if !current.is_empty() && used + n > max_tokens {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub n_pairs: usize,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

const EVAL_CHUNK: usize = 256;

/// Argmax accuracy against gold labels, with the per-example outcome.
pub fn evaluate_accuracy(
    model: &PairClassifier,
    data: &[SentencePair],
) -> Result<Accuracy, EncoderError> {
    let chunks: Vec<Vec<bool>> = data
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let pairs: Vec<_> = chunk.iter().map(|p| (&p.first, &p.second)).collect();
            let preds = model.predict(&pairs)?;
            Ok(preds
                .iter()
                .zip(chunk)
                .map(|(d, p)| d.argmax() == p.label.class())
                .collect())
        })
        .collect::<Result<_, EncoderError>>()?;
    let correct: Vec<bool> = chunks.into_iter().flatten().collect();
    let hits = correct.iter().filter(|&&c| c).count();
    let accuracy = if correct.is_empty() {
        0.0
    } else {
        hits as f64 / correct.len() as f64
    };
    Ok(Accuracy { accuracy, correct })
}

/// Trains a pair classifier from scratch with cross-entropy, Adam and the
/// inverse square-root schedule. Deterministic in `cfg.seed`.
pub fn train_model(
    train: &[SentencePair],
    valid: &[SentencePair],
    vocab: &Vocabulary,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EncoderError> {
    enc.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(EncoderError::EmptyData);
    }
    if let Some(p) = train
        .iter()
        .chain(valid)
        .find(|p| p.label.task().n_classes() != enc.n_classes)
    {
        let task = p.label.task();
        return Err(EncoderError::ClassMismatch {
            model: enc.n_classes,
            task,
            task_classes: task.n_classes(),
        });
    }
    let mut model = PairClassifier::new(enc.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.params.values(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let token_counts: Vec<usize> = train.iter().map(|p| p.first.len() + p.second.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = token_budget_batches(&token_counts, cfg.max_batch_tokens, &mut rng);
        for (batch_id, batch) in batches.iter().enumerate() {
            step += 1;
            let lr = inverse_sqrt_lr(step, cfg.lr, cfg.warmup);
            let firsts: Vec<&[usize]> = batch.iter().map(|&i| train[i].first.ids.as_slice()).collect();
            let seconds: Vec<&[usize]> =
                batch.iter().map(|&i| train[i].second.ids.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label.class()).collect();
            for s in firsts.iter().chain(&seconds) {
                model.check_ids(s)?;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut dropout = DropoutRng {
                rate: enc.dropout,
                rng: &mut rng,
            };
            let logits = bound.pair_logits(&mut tape, &firsts, &seconds, Some(&mut dropout));
            let loss = tape.softmax_cross_entropy(logits, &targets);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(EncoderError::NonFiniteLoss {
                    step,
                    lr,
                    batch: batch_id,
                    loss: loss_value,
                });
            }
            let mut grads = tape.backward(loss);
            let grads: Vec<Option<Matrix>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            adam.step(model.params.values_mut(), &grads, lr);
            log.push(StepLog {
                epoch,
                step,
                lr,
                loss: loss_value,
                n_pairs: batch.len(),
            });
        }
        log::info!(
            "epoch {epoch}: mean loss {:.4}",
            mean(log.iter().filter(|l| l.epoch == epoch).map(|l| l.loss))
        );
    }
    let valid_accuracy = if valid.is_empty() {
        None
    } else {
        Some(evaluate_accuracy(&model, valid)?.accuracy)
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, cfg.clone(), vocab.clone(), valid_accuracy),
        log,
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        assert!((inverse_sqrt_lr(1, 3e-4, 500) - 3e-4 / 500.0).abs() < 1e-18);
        assert!((inverse_sqrt_lr(250, 3e-4, 500) - 1.5e-4).abs() < 1e-18);
        assert!((inverse_sqrt_lr(500, 3e-4, 500) - 3e-4).abs() < 1e-18);
        let a = inverse_sqrt_lr(2000, 3e-4, 500);
        let b = inverse_sqrt_lr(8000, 3e-4, 500);
        assert!((a - 1.5e-4).abs() < 1e-15);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batches_respect_budget() {
        let counts = vec![5, 7, 3, 9, 30, 2, 2, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = token_budget_batches(&counts, 12, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..counts.len()).collect::<Vec<_>>());
        for b in &batches {
            let total: usize = b.iter().map(|&i| counts[i]).sum();
            assert!(total <= 12 || b.len() == 1);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = vec![Matrix::from_elem((1, 2), 1.0)];
        let mut adam = Adam::new(&params, 0.9, 0.98, 1e-8);
        let g = Matrix::from_shape_vec((1, 2), vec![2.0, -0.5]).unwrap();
        adam.step(&mut params, &[Some(g)], 0.1);
        // first bias-corrected step has magnitude lr for each coordinate
        assert!((params[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((params[0][[0, 1]] - 1.1).abs() < 1e-6);
    }
}
