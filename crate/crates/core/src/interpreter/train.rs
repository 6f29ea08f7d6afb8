use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Interpreter, InterpreterError, LagrangianState, Side};
use crate::autodiff::{segments_from_lengths, Matrix, Segment, Tape, Var};
use crate::encoder::{pool, Adam, Bound, Checkpoint, EncoderError, PairClassifier};
use crate::corpus::SentencePair;
use crate::gates::HardConcreteParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpreterConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    pub margin: f64,
    pub gate: HardConcreteParams,
    pub seed: u64,
    pub max_examples: usize,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 3e-5,
            batch_size: 64,
            epochs: 4,
            lambda_init: 1.0,
            lambda_lr: 1e-2,
            margin: 0.1,
            gate: HardConcreteParams::default(),
            seed: 1,
            max_examples: 50_000,
        }
    }
}

impl InterpreterConfig {
    /// Settings for the small desk encoder and a few thousand pairs: the
    /// default step size barely moves the predictors in four epochs.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            lambda_init: 0.1,
            lambda_lr: 3e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InterpreterError> {
        let bad = |m: &str| Err(InterpreterError::Config(m.to_string()));
        if self.hidden == 0 || self.batch_size == 0 {
            return bad("hidden and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lambda_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda_init >= 0.0 && self.margin >= 0.0) {
            return bad("lambda_init and margin must be non-negative");
        }
        self.gate
            .validate()
            .map_err(|e| InterpreterError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpStepLog {
    pub epoch: usize,
    pub step: usize,
    /// Length-normalized expected L0 summed over predictors, batch mean.
    pub l0: f64,
    /// Batch-mean divergence of each predictor.
    pub kl: Vec<f64>,
    /// Multiplier of each predictor after this step's update.
    pub lambda: Vec<f64>,
}

pub struct InterpreterOutcome {
    pub interpreter: Interpreter,
    pub log: Vec<InterpStepLog>,
    /// Final multiplier of each predictor.
    pub lagrangians: Vec<LagrangianState>,
    /// Mean batch KL of the last predictor over the final epoch.
    pub running_kl: f64,
}

/// Unmasked-pass quantities for examples that all mask the same side.
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub side: Side,
    /// Packed (truncated) ids of the masked sentences.
    pub ids: Vec<usize>,
    pub segs: Vec<Segment>,
    /// Packed hidden states of the masked sentences, one matrix per layer.
    pub states: Vec<Matrix>,
    /// Pooled vectors of the untouched sentences.
    pub other: Matrix,
    /// Unmasked label distributions, one row per example.
    pub target: Matrix,
}

impl MaskedBatch {
    pub fn prepare(
        model: &PairClassifier,
        pairs: &[&SentencePair],
        side: Side,
    ) -> Result<Self, EncoderError> {
        let other_side = match side {
            Side::First => Side::Second,
            Side::Second => Side::First,
        };
        let masked: Vec<&[usize]> = pairs.iter().map(|p| side.of(p).ids.as_slice()).collect();
        let others: Vec<&[usize]> = pairs
            .iter()
            .map(|p| other_side.of(p).ids.as_slice())
            .collect();
        let hidden = model.encode_batch(&masked)?;
        let other = model.pooled(&others)?;
        let d = model.config.emb_dim;
        let mut own = Matrix::zeros((pairs.len(), d));
        for (i, h) in hidden.iter().enumerate() {
            own.row_mut(i).assign(&pool(h));
        }
        let dists = match side {
            Side::First => model.classify_pooled(&own, &other),
            Side::Second => model.classify_pooled(&other, &own),
        };
        let mut target = Matrix::zeros((pairs.len(), model.config.n_classes));
        for (i, dist) in dists.iter().enumerate() {
            for (j, &p) in dist.probs.iter().enumerate() {
                target[[i, j]] = p;
            }
        }
        let mut ids = Vec::new();
        for s in &masked {
            ids.extend_from_slice(model.truncate(s).0);
        }
        let segs = segments_from_lengths(hidden.iter().map(|h| h.seq_len()));
        let states: Vec<Matrix> = (0..=model.config.n_layers)
            .map(|k| {
                let views: Vec<_> = hidden.iter().map(|h| h.layers[k].view()).collect();
                if views.is_empty() {
                    return Matrix::zeros((0, d));
                }
                ndarray::concatenate(Axis(0), &views).expect("equal widths")
            })
            .collect();
        Ok(Self {
            side,
            ids,
            segs,
            states,
            other,
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.segs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }
}

/// Output of [`build_interpreter_loss`].
pub struct LossParts {
    pub loss: Var,
    pub l0: f64,
    /// Batch-mean divergence of each requested predictor.
    pub kl: Vec<f64>,
}

/// Records the interpreter objective on `tape`:
///
/// `Σ_k [ mean_i E‖z_k,i‖₀ / n_i  +  λ · (KL_k − m) ]`
///
/// over the predictors in `layers`, where `KL_k` is the batch mean of
/// `KL(y ‖ ŷ_k)` and `ŷ_k` comes from re-encoding the masked sentences with
/// gates sampled from predictor `k`. Noise is drawn from `rng`, one uniform
/// value per token and predictor.
#[allow(clippy::too_many_arguments)]
pub fn build_interpreter_loss(
    tape: &mut Tape,
    encoder: &Bound<'_>,
    interp: &Interpreter,
    ivars: &[Var],
    batches: &[MaskedBatch],
    layers: &[usize],
    lags: &[LagrangianState],
    rng: &mut ChaCha8Rng,
) -> LossParts {
    assert_eq!(lags.len(), layers.len(), "one multiplier per predictor");
    let total: usize = batches.iter().map(MaskedBatch::len).sum();
    let b = total.max(1) as f64;
    let gate = interp.gate;
    let baseline = ivars[interp.baseline_index()];
    let mut terms = Vec::new();
    let mut l0 = 0.0;
    let mut kl = vec![0.0; layers.len()];
    let depth = layers.iter().max().map_or(0, |&k| k + 1);
    for batch in batches.iter().filter(|g| !g.is_empty()) {
        let n = batch.ids.len();
        let states: Vec<Var> = batch.states[..depth]
            .iter()
            .map(|s| tape.constant(s.clone()))
            .collect();
        let locs = interp.locations_vars(tape, ivars, &states);
        let mut weights = vec![0.0; n];
        for seg in &batch.segs {
            for w in &mut weights[seg.start..seg.end()] {
                *w = 1.0 / (seg.len as f64 * b);
            }
        }
        let share = batch.len() as f64 / b;
        for (slot, &k) in layers.iter().enumerate() {
            let loc = locs[k];
            let noise = Matrix::from_shape_fn((n, 1), |_| rng.gen_range(1e-6..1.0 - 1e-6));
            let z = tape.hard_concrete(loc, &noise, &gate);
            let p = tape.prob_nonzero(loc, &gate);
            let l0_term = tape.weighted_sum(p, &weights);
            l0 += tape.scalar(l0_term);
            terms.push(l0_term);

            let emb = encoder.embed(tape, &batch.ids);
            let masked = tape.interpolate(emb, z, baseline);
            let hidden = encoder.encode_embedded(tape, masked, &batch.segs, None);
            let own = encoder.pool(tape, &hidden, &batch.segs);
            let other = tape.constant(batch.other.clone());
            let logits = match batch.side {
                Side::First => encoder.head(tape, own, other),
                Side::Second => encoder.head(tape, other, own),
            };
            let div = tape.kl_from_logits(&batch.target, logits);
            kl[slot] += tape.scalar(div) * share;
            terms.push(tape.scale(div, lags[slot].lambda * share));
        }
    }
    let offset = tape.constant(Matrix::from_elem(
        (1, 1),
        -lags.iter().map(|l| l.lambda * l.margin).sum::<f64>(),
    ));
    let loss = terms.into_iter().fold(offset, |acc, t| tape.add(acc, t));
    LossParts { loss, l0, kl }
}

/// Trains fresh predictors and a baseline against the frozen classifier in
/// `encoder`. Uses the first `cfg.max_examples` pairs of `data`.
pub fn train_interpreter(
    encoder: &Checkpoint,
    data: &[SentencePair],
    cfg: &InterpreterConfig,
) -> Result<InterpreterOutcome, InterpreterError> {
    cfg.validate()?;
    let data = &data[..data.len().min(cfg.max_examples)];
    if data.is_empty() {
        return Err(EncoderError::EmptyData.into());
    }
    check_classes(encoder, data)?;
    let model = encoder.model();
    let mut interp = Interpreter::new(encoder, cfg.hidden, cfg.gate, cfg.seed);
    let mut adam = Adam::new(interp.params.values(), 0.9, 0.999, 1e-8);
    let mut lags = vec![
        LagrangianState {
            lambda: cfg.lambda_init,
            margin: cfg.margin,
            lr: cfg.lambda_lr,
        };
        interp.n_predictors()
    ];
    let all_layers: Vec<usize> = (0..interp.n_predictors()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1e7e));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut firsts = Vec::new();
            let mut seconds = Vec::new();
            for &i in chunk {
                if rng.gen_bool(0.5) {
                    firsts.push(&data[i]);
                } else {
                    seconds.push(&data[i]);
                }
            }
            let batches = [
                MaskedBatch::prepare(&model, &firsts, Side::First)?,
                MaskedBatch::prepare(&model, &seconds, Side::Second)?,
            ];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let ivars = interp.params.bind(&mut tape, true);
            let parts = build_interpreter_loss(
                &mut tape,
                &bound,
                &interp,
                &ivars,
                &batches,
                &all_layers,
                &lags,
                &mut rng,
            );
            let mut grads = tape.backward(parts.loss);
            let grads: Vec<Option<Matrix>> = ivars.iter().map(|&v| grads.take(v)).collect();
            adam.step(interp.params.values_mut(), &grads, cfg.lr);
            for (lag, &kl) in lags.iter_mut().zip(&parts.kl) {
                lag.update(kl);
            }
            log.push(InterpStepLog {
                epoch,
                step,
                l0: parts.l0,
                kl: parts.kl,
                lambda: lags.iter().map(|l| l.lambda).collect(),
            });
        }
        let last: Vec<&InterpStepLog> = log.iter().filter(|l| l.epoch == epoch).collect();
        log::info!(
            "epoch {epoch}: mean KL {:.4}, mean L0 {:.3}, lambda {:?}",
            last.iter().map(|l| l.kl.last().unwrap_or(&0.0)).sum::<f64>() / last.len() as f64,
            last.iter().map(|l| l.l0).sum::<f64>() / last.len() as f64,
            lags.iter().map(|l| l.lambda).collect::<Vec<_>>()
        );
    }
    let final_epoch: Vec<f64> = log
        .iter()
        .filter(|l| l.epoch + 1 == cfg.epochs)
        .map(|l| l.kl.last().copied().unwrap_or(0.0))
        .collect();
    let running_kl = if final_epoch.is_empty() {
        0.0
    } else {
        final_epoch.iter().sum::<f64>() / final_epoch.len() as f64
    };
    if running_kl > 10.0 * cfg.margin {
        log::warn!(
            "constraint not satisfied: running mean KL {running_kl:.4} exceeds 10 x margin {}",
            cfg.margin
        );
    }
    Ok(InterpreterOutcome {
        interpreter: interp,
        log,
        lagrangians: lags,
        running_kl,
    })
}

fn check_classes(encoder: &Checkpoint, data: &[SentencePair]) -> Result<(), InterpreterError> {
    let n = encoder.encoder.n_classes;
    match data.iter().find(|p| p.label.task().n_classes() != n) {
        Some(p) => {
            let task = p.label.task();
            Err(EncoderError::ClassMismatch {
                model: n,
                task,
                task_classes: task.n_classes(),
            }
            .into())
        }
        None => Ok(()),
    }
}

const KL_CHUNK: usize = 64;

/// Mean `KL(unmasked ‖ masked)` when the last-layer predictor's gates are
/// sampled, averaged over both sides of every pair. Deterministic in `seed`.
pub fn masked_kl(
    encoder: &Checkpoint,
    interp: &Interpreter,
    data: &[SentencePair],
    seed: u64,
) -> Result<f64, InterpreterError> {
    interp.check_compatible(encoder)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let model = encoder.model();
    let last = [interp.n_predictors() - 1];
    let lag = LagrangianState {
        lambda: 0.0,
        margin: 0.0,
        lr: 0.0,
    };
    let sums: Vec<f64> = data
        .par_chunks(KL_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let refs: Vec<&SentencePair> = chunk.iter().collect();
            let mut total = 0.0;
            for (s, side) in [Side::First, Side::Second].into_iter().enumerate() {
                let batch = MaskedBatch::prepare(&model, &refs, side)?;
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ ((c as u64) << 1 | s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, false);
                let ivars = interp.params.bind(&mut tape, false);
                let parts = build_interpreter_loss(
                    &mut tape,
                    &bound,
                    interp,
                    &ivars,
                    std::slice::from_ref(&batch),
                    &last,
                    std::slice::from_ref(&lag),
                    &mut rng,
                );
                total += parts.kl[0] * chunk.len() as f64;
            }
            Ok(total)
        })
        .collect::<Result<_, InterpreterError>>()?;
    Ok(sums.iter().sum::<f64>() / (2 * data.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, PairRecord};
    use crate::interpreter::tests::tiny_checkpoint;

    fn pairs(ck: &Checkpoint) -> Vec<SentencePair> {
        let texts = [
            ("w1 w2 w3", "w4 w5"),
            ("w6 w7", "w1 w8 w9 w2"),
            ("w3", "w3 w4"),
            ("w5 w6 w7 w8 w9", "w2"),
            ("w0 w1", "w1 w0"),
        ];
        texts
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                PairRecord {
                    id: format!("p{i}"),
                    sentence1: a.to_string(),
                    sentence2: b.to_string(),
                    label: if i % 2 == 0 {
                        Label::Paraphrase
                    } else {
                        Label::NonParaphrase
                    },
                }
                .encode(&ck.vocabulary)
            })
            .collect()
    }

    fn cfg() -> InterpreterConfig {
        InterpreterConfig {
            hidden: 6,
            lr: 1e-2,
            batch_size: 2,
            epochs: 3,
            ..InterpreterConfig::default()
        }
    }

    #[test]
    fn encoder_untouched_and_log_complete() {
        let ck = tiny_checkpoint();
        let before = ck.to_bytes();
        let data = pairs(&ck);
        let out = train_interpreter(&ck, &data, &cfg()).unwrap();
        assert_eq!(ck.to_bytes(), before);
        assert_eq!(out.log.len(), 3 * 3);
        for (i, l) in out.log.iter().enumerate() {
            assert_eq!(l.step, i + 1);
            assert!(l.l0.is_finite() && l.kl.iter().all(|k| k.is_finite()));
            assert!(l.lambda.iter().all(|&x| x >= 0.0));
        }
        // the ascent rule, replayed from the log
        let mut lambda = vec![1.0; 3];
        for l in &out.log {
            assert_eq!(l.kl.len(), 3);
            for k in 0..3 {
                let next = (lambda[k] + 1e-2 * (l.kl[k] - 0.1)).max(0.0);
                assert!((l.lambda[k] - next).abs() < 1e-12);
                if l.kl[k] > 0.1 {
                    assert!(l.lambda[k] > lambda[k]);
                } else {
                    assert!(l.lambda[k] <= lambda[k]);
                }
            }
            lambda = l.lambda.clone();
        }
        assert_ne!(
            out.interpreter.params,
            Interpreter::new(&ck, 6, HardConcreteParams::default(), 1).params
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let ck = tiny_checkpoint();
        let data = pairs(&ck);
        let a = train_interpreter(&ck, &data, &cfg()).unwrap();
        let b = train_interpreter(&ck, &data, &cfg()).unwrap();
        assert_eq!(a.interpreter.to_bytes(), b.interpreter.to_bytes());
        assert_eq!(a.log, b.log);
        let c = train_interpreter(&ck, &data, &InterpreterConfig { seed: 2, ..cfg() }).unwrap();
        assert_ne!(a.log, c.log);
        let k1 = masked_kl(&ck, &a.interpreter, &data, 5).unwrap();
        let k2 = masked_kl(&ck, &a.interpreter, &data, 5).unwrap();
        assert_eq!(k1, k2);
        assert!(k1 >= 0.0);
    }

    #[test]
    fn open_gates_leave_prediction_unchanged() {
        // locations far above zero keep every gate at exactly 1
        let ck = tiny_checkpoint();
        let mut interp = Interpreter::new(&ck, 6, HardConcreteParams::default(), 1);
        interp.params.value_mut(3).fill(40.0);
        let kl = masked_kl(&ck, &interp, &pairs(&ck), 3).unwrap();
        assert!(kl.abs() < 1e-12, "{kl}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let ck = tiny_checkpoint();
        let data = pairs(&ck);
        let model = ck.model();
        let mut interp = Interpreter::new(&ck, 6, HardConcreteParams::default(), 4);
        let mut init = ChaCha8Rng::seed_from_u64(9);
        for i in 0..interp.params.len() {
            interp
                .params
                .value_mut(i)
                .mapv_inplace(|x| x + init.gen_range(-0.5..0.5));
        }
        let firsts: Vec<&SentencePair> = data.iter().take(3).collect();
        let seconds: Vec<&SentencePair> = data.iter().skip(3).collect();
        let batches = [
            MaskedBatch::prepare(&model, &firsts, Side::First).unwrap(),
            MaskedBatch::prepare(&model, &seconds, Side::Second).unwrap(),
        ];
        let lag = LagrangianState {
            lambda: 2.0,
            margin: 0.1,
            lr: 0.0,
        };
        let layers = [0, 1, 2];
        let eval = |interp: &Interpreter| -> (f64, Vec<Option<Matrix>>) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let ivars = interp.params.bind(&mut tape, true);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let parts = build_interpreter_loss(
                &mut tape, &bound, interp, &ivars, &batches, &layers, &[lag; 3], &mut rng,
            );
            let mut g = tape.backward(parts.loss);
            (
                tape.scalar(parts.loss),
                ivars.iter().map(|&v| g.take(v)).collect(),
            )
        };
        let (_, grads) = eval(&interp);
        let mut pick = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 10 {
            let t = pick.gen_range(0..interp.params.len());
            let dim = interp.params.value(t).dim();
            let (r, c) = (pick.gen_range(0..dim.0), pick.gen_range(0..dim.1));
            let analytic = grads[t].as_ref().map_or(0.0, |g| g[[r, c]]);
            let mut plus = interp.clone();
            plus.params.value_mut(t)[[r, c]] += h;
            let mut minus = interp.clone();
            minus.params.value_mut(t)[[r, c]] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err <= 1e-2,
                "{}[{r},{c}]: analytic {analytic} numeric {numeric}",
                interp.params.name(t)
            );
            checked += 1;
        }
    }
}
