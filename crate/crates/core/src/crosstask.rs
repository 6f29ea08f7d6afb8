//! Accuracy of one classifier when the tokens another model's interpreter
//! scores lowest are deleted, against deleting the same number of random
//! tokens.

use std::fmt::Write as _;

use ndarray::Axis;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::corpus::{SentencePair, TokenSequence};
use crate::encoder::{EncoderError, PairClassifier};
use crate::interpreter::{ScoreIndex, Side};

#[derive(Debug, Error)]
pub enum CrossTaskError {
    #[error("no score record for pair '{id}' ({side})")]
    MissingScores { id: String, side: &'static str },
    #[error("score record for pair '{id}' ({side}) has tokens {found:?}, data has {expected:?}")]
    TokenMismatch {
        id: String,
        side: &'static str,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("significance inputs differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Number of tokens removed from `n` at `fraction`: `floor(fraction·n + 0.5)`.
pub fn removal_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Deletes the lowest-scored tokens; among equal scores the earlier position
/// goes first.
pub fn remove_fraction(seq: &TokenSequence, scores: &[f64], fraction: f64) -> TokenSequence {
    assert_eq!(scores.len(), seq.len(), "one score per token");
    let k = removal_count(seq.len(), fraction);
    let mut order: Vec<usize> = (0..seq.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; seq.len()];
    for &i in &order[..k] {
        keep[i] = false;
    }
    seq.retain_positions(&keep)
}

/// Deletes the same number of tokens as [`remove_fraction`], chosen
/// uniformly at random.
pub fn random_remove(seq: &TokenSequence, fraction: f64, seed: u64) -> TokenSequence {
    random_remove_with(seq, fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_remove_with(seq: &TokenSequence, fraction: f64, rng: &mut impl Rng) -> TokenSequence {
    let n = seq.len();
    let k = removal_count(n, fraction);
    let mut keep = vec![true; n];
    for i in sample(rng, n, k).iter() {
        keep[i] = false;
    }
    seq.retain_positions(&keep)
}

/// Paired sign-flip test on `mean(sys − base)`, two-sided. Inputs are
/// per-example scores (0/1 correctness or averages of it). Up to 20
/// examples every sign pattern is enumerated; otherwise `n_resamples`
/// random patterns are drawn and `p = (1 + hits) / (1 + n_resamples)`.
pub fn significance(
    sys: &[f64],
    base: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<f64, CrossTaskError> {
    if sys.len() != base.len() {
        return Err(CrossTaskError::Length(sys.len(), base.len()));
    }
    let n = sys.len();
    if n == 0 {
        return Ok(1.0);
    }
    let diffs: Vec<f64> = sys.iter().zip(base).map(|(s, b)| s - b).collect();
    let observed = diffs.iter().sum::<f64>().abs();
    let tol = 1e-9 * (1.0 + observed);
    if n <= 20 {
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            if s.abs() >= observed - tol {
                hits += 1;
            }
        }
        return Ok(hits as f64 / (1u64 << n) as f64);
    }
    let nonzero: Vec<f64> = diffs.into_iter().filter(|d| *d != 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_resamples {
        let s: f64 = nonzero
            .iter()
            .map(|d| if rng.gen::<bool>() { -d } else { *d })
            .sum();
        if s.abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_resamples) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub fractions: Vec<f64>,
    pub baseline_seeds: usize,
    pub n_resamples: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            baseline_seeds: 3,
            n_resamples: 10_000,
            seed: 1,
            alpha: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub fractions: Vec<f64>,
    /// `acc[row][col]`: row fraction removed from the first sentence, column
    /// fraction from the second.
    pub acc: Vec<Vec<f64>>,
    pub baseline_acc: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub p_value: Vec<Vec<f64>>,
    pub n_examples: usize,
    /// Seed of every baseline draw, indexed `[row][col][b]`.
    pub seeds: Vec<Vec<Vec<u64>>>,
    pub alpha: f64,
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows are first-sentence fractions, columns second-sentence
    /// fractions; a cell reads `acc Δdelta` with `*` when `p < alpha`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6}", "s1\\s2");
        for f in &self.fractions {
            let _ = write!(out, " | {:>16}", format!("{:.0}%", f * 100.0));
        }
        out.push('\n');
        for (r, f) in self.fractions.iter().enumerate() {
            let _ = write!(out, "{:>6}", format!("{:.0}%", f * 100.0));
            for c in 0..self.fractions.len() {
                let sig = if self.p_value[r][c] < self.alpha { "*" } else { " " };
                let cell = format!(
                    "{:.1} Δ{:+.1}{sig}",
                    100.0 * self.acc[r][c],
                    100.0 * self.delta[r][c]
                );
                let _ = write!(out, " | {cell:>16}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "n = {}; * marks p < {} (paired sign-flip test)",
            self.n_examples, self.alpha
        );
        out
    }
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of baseline draw `b` in cell (`row`, `col`).
pub fn cell_seed(seed: u64, row: usize, col: usize, b: usize) -> u64 {
    [row as u64, col as u64, b as u64]
        .iter()
        .fold(mix(seed), |h, &v| mix(h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

const CHUNK: usize = 256;

fn pooled_all(model: &PairClassifier, seqs: &[TokenSequence]) -> Result<Matrix, EncoderError> {
    let parts: Vec<Matrix> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let ids: Vec<&[usize]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
            model.pooled(&ids)
        })
        .collect::<Result<_, _>>()?;
    if parts.is_empty() {
        return Ok(Matrix::zeros((0, model.config.emb_dim)));
    }
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

fn correctness(model: &PairClassifier, u: &Matrix, v: &Matrix, gold: &[usize]) -> Vec<f64> {
    model
        .classify_pooled(u, v)
        .iter()
        .zip(gold)
        .map(|(d, &g)| if d.argmax() == g { 1.0 } else { 0.0 })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn lookup<'a>(
    scores: &'a ScoreIndex,
    pair: &SentencePair,
    side: Side,
) -> Result<&'a [f64], CrossTaskError> {
    let rec = scores
        .get(&pair.id, side)
        .ok_or_else(|| CrossTaskError::MissingScores {
            id: pair.id.clone(),
            side: side.as_str(),
        })?;
    let seq = side.of(pair);
    if rec.tokens != seq.tokens {
        return Err(CrossTaskError::TokenMismatch {
            id: pair.id.clone(),
            side: side.as_str(),
            expected: seq.tokens.clone(),
            found: rec.tokens.clone(),
        });
    }
    Ok(&rec.rescaled)
}

/// Evaluates `model` on `data` for every pair of removal fractions, deleting
/// tokens by `scores` and, for the baseline, at random.
pub fn run_grid(
    model: &PairClassifier,
    scores: &ScoreIndex,
    data: &[SentencePair],
    cfg: &GridConfig,
) -> Result<GridReport, CrossTaskError> {
    if let Some(&f) = cfg.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(CrossTaskError::Fraction(f));
    }
    let mut s1 = Vec::with_capacity(data.len());
    let mut s2 = Vec::with_capacity(data.len());
    for p in data {
        s1.push(lookup(scores, p, Side::First)?);
        s2.push(lookup(scores, p, Side::Second)?);
    }
    let gold: Vec<usize> = data.iter().map(|p| p.label.class()).collect();
    let nf = cfg.fractions.len();

    // importance-based removal depends on one side's fraction only
    let reduced = |side: Side, scores: &[&[f64]]| -> Result<Vec<Matrix>, EncoderError> {
        cfg.fractions
            .iter()
            .map(|&f| {
                let seqs: Vec<TokenSequence> = data
                    .iter()
                    .zip(scores)
                    .map(|(p, s)| remove_fraction(side.of(p), s, f))
                    .collect();
                pooled_all(model, &seqs)
            })
            .collect()
    };
    let u = reduced(Side::First, &s1)?;
    let v = reduced(Side::Second, &s2)?;

    let cells: Vec<(usize, usize)> = (0..nf).flat_map(|r| (0..nf).map(move |c| (r, c))).collect();
    let results: Vec<(f64, f64, f64, Vec<u64>)> = cells
        .par_iter()
        .map(|&(r, c)| {
            let sys = correctness(model, &u[r], &v[c], &gold);
            let mut base = vec![0.0; data.len()];
            let mut seeds = Vec::with_capacity(cfg.baseline_seeds);
            for b in 0..cfg.baseline_seeds {
                let seed = cell_seed(cfg.seed, r, c, b);
                seeds.push(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut firsts = Vec::with_capacity(data.len());
                let mut seconds = Vec::with_capacity(data.len());
                for p in data {
                    firsts.push(random_remove_with(&p.first, cfg.fractions[r], &mut rng));
                    seconds.push(random_remove_with(&p.second, cfg.fractions[c], &mut rng));
                }
                let bu = pooled_all(model, &firsts)?;
                let bv = pooled_all(model, &seconds)?;
                for (acc, x) in base.iter_mut().zip(correctness(model, &bu, &bv, &gold)) {
                    *acc += x;
                }
            }
            let k = cfg.baseline_seeds.max(1) as f64;
            base.iter_mut().for_each(|x| *x /= k);
            let p = significance(&sys, &base, cfg.n_resamples, cell_seed(cfg.seed, r, c, usize::MAX))?;
            Ok((mean(&sys), mean(&base), p, seeds))
        })
        .collect::<Result<_, CrossTaskError>>()?;

    let mut report = GridReport {
        fractions: cfg.fractions.clone(),
        acc: vec![vec![0.0; nf]; nf],
        baseline_acc: vec![vec![0.0; nf]; nf],
        delta: vec![vec![0.0; nf]; nf],
        p_value: vec![vec![0.0; nf]; nf],
        n_examples: data.len(),
        seeds: vec![vec![Vec::new(); nf]; nf],
        alpha: cfg.alpha,
    };
    for ((r, c), (acc, base, p, seeds)) in cells.into_iter().zip(results) {
        report.acc[r][c] = acc;
        report.baseline_acc[r][c] = base;
        report.delta[r][c] = acc - base;
        report.p_value[r][c] = p;
        report.seeds[r][c] = seeds;
    }
    for (i, &f) in cfg.fractions.iter().enumerate() {
        if f == 0.0 || f == 1.0 {
            assert_eq!(
                report.acc[i][i], report.baseline_acc[i][i],
                "removal at {f} on both sides must match its baseline"
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            ids: (0..tokens.len()).collect(),
        }
    }

    #[test]
    fn removal_examples() {
        let s = seq(&["a", "b", "c", "d", "e"]);
        let out = remove_fraction(&s, &[0.9, 0.1, 0.5, 0.2, 0.8], 0.4);
        assert_eq!(out.tokens, vec!["a", "c", "e"]);
        assert_eq!(remove_fraction(&s, &[0.5; 5], 0.0), s);
        assert!(remove_fraction(&s, &[0.5; 5], 1.0).is_empty());
        let s4 = seq(&["w", "x", "y", "z"]);
        assert_eq!(remove_fraction(&s4, &[0.3; 4], 0.5).tokens, vec!["y", "z"]);
        assert_eq!(removal_count(5, 0.1), 1);
        assert_eq!(removal_count(4, 0.125), 1);
    }

    #[test]
    fn random_removal_endpoints_and_frequency() {
        let s = seq(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        for seed in 0..20 {
            assert_eq!(random_remove(&s, 0.0, seed), s);
            assert!(random_remove(&s, 1.0, seed).is_empty());
        }
        let trials = 10_000;
        let mut removed = [0usize; 10];
        for seed in 0..trials {
            let out = random_remove(&s, 0.3, seed as u64);
            assert_eq!(out.len(), 7);
            for (i, t) in s.tokens.iter().enumerate() {
                if !out.tokens.contains(t) {
                    removed[i] += 1;
                }
            }
        }
        for r in removed {
            let f = r as f64 / trials as f64;
            assert!((f - 0.3).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn significance_examples() {
        let ones = vec![1.0; 10];
        let zeros = vec![0.0; 10];
        assert_eq!(significance(&ones, &zeros, 0, 0).unwrap(), 2.0 / 1024.0);
        assert_eq!(significance(&ones, &ones, 0, 0).unwrap(), 1.0);
        let big: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        assert_eq!(significance(&big, &big, 999, 1).unwrap(), 1.0);
        let p = significance(&vec![1.0; 100], &vec![0.0; 100], 999, 1).unwrap();
        assert_eq!(p, 1.0 / 1000.0);
        assert!(significance(&ones, &[0.0], 10, 1).is_err());
    }

    #[test]
    fn exact_enumeration_by_brute_force() {
        // one positive difference among three: flips give sums ±1, all ties
        let p = significance(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 0, 0).unwrap();
        assert_eq!(p, 1.0);
        // differences (1, 1, -1): |sum| = 1; patterns with |sum| ≥ 1 are all 8
        let p = significance(&[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0], 0, 0).unwrap();
        assert_eq!(p, 1.0);
        // differences (1, 1, 1, 1): only the two uniform patterns reach 4
        let p = significance(&[1.0; 4], &[0.0; 4], 0, 0).unwrap();
        assert_eq!(p, 2.0 / 16.0);
    }

    #[test]
    fn null_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 500;
        let mut rejected = 0;
        for t in 0..trials {
            let sys: Vec<f64> = (0..60).map(|_| f64::from(rng.gen_bool(0.7) as u8)).collect();
            let base: Vec<f64> = (0..60).map(|_| f64::from(rng.gen_bool(0.7) as u8)).collect();
            if significance(&sys, &base, 999, t).unwrap() < 0.01 {
                rejected += 1;
            }
        }
        assert!(rejected as f64 / trials as f64 <= 0.02, "{rejected}");
    }

    #[test]
    fn cell_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for r in 0..11 {
            for c in 0..11 {
                for b in 0..3 {
                    assert!(seen.insert(cell_seed(7, r, c, b)));
                }
            }
        }
        assert_eq!(cell_seed(7, 1, 2, 0), cell_seed(7, 1, 2, 0));
    }

    proptest! {
        #[test]
        fn removal_is_order_preserving_subsequence(
            scores in prop::collection::vec(0.0f64..1.0, 0..30),
            fraction in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let names: Vec<String> = (0..scores.len()).map(|i| format!("t{i}")).collect();
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let s = seq(&refs);
            let k = removal_count(s.len(), fraction);
            for out in [remove_fraction(&s, &scores, fraction), random_remove(&s, fraction, seed)] {
                prop_assert_eq!(out.len(), s.len() - k);
                let mut last = None;
                for id in &out.ids {
                    prop_assert!(last.map_or(true, |l| *id > l));
                    last = Some(*id);
                }
            }
            let kept = remove_fraction(&s, &scores, fraction);
            let min_kept = kept.ids.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in 0..s.len() {
                if !kept.ids.contains(&i) {
                    prop_assert!(scores[i] <= min_kept);
                }
            }
        }

        #[test]
        fn rounding_monotone(n in 0usize..200, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(removal_count(n, lo) <= removal_count(n, hi));
            prop_assert_eq!(removal_count(n, 0.0), 0);
            prop_assert_eq!(removal_count(n, 1.0), n);
        }
    }
}
