//! Aggregations of rescaled attribution scores over dependency trees.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{aligns, DepTree};
use crate::interpreter::{AttributionRecord, Side};

#[derive(Debug, Error, PartialEq)]
pub enum SyntaxError {
    #[error("inputs differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: constant input")]
    Constant,
    #[error("need at least 3 shared relations, found {0}")]
    SharedKeys(usize),
}

/// Sentence id used to match a score record to its parse.
pub fn sentence_key(id: &str, side: Side) -> String {
    format!("{id}/{}", side.as_str())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSentence {
    pub record: AttributionRecord,
    pub tree: DepTree,
    /// Root has depth 1.
    pub depths: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Alignment {
    pub sentences: Vec<AlignedSentence>,
    /// Records whose parse has different tokens.
    pub misaligned: usize,
    /// Records with no parse at all.
    pub unmatched: usize,
}

/// Pairs each record with the tree whose `sent_id` is
/// [`sentence_key`] of the record.
pub fn align(records: &[AttributionRecord], trees: &[DepTree]) -> Alignment {
    let by_id: HashMap<&str, &DepTree> = trees.iter().map(|t| (t.sent_id.as_str(), t)).collect();
    let mut out = Alignment::default();
    for r in records {
        match by_id.get(sentence_key(&r.id, r.side).as_str()) {
            None => out.unmatched += 1,
            Some(t) if !aligns(&r.tokens, t) => out.misaligned += 1,
            Some(t) => out.sentences.push(AlignedSentence {
                record: r.clone(),
                tree: (*t).clone(),
                depths: t.depths(),
            }),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub avg: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let avg = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / n;
        Some(Stat {
            avg,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregateStats<K: Ord> {
    pub entries: BTreeMap<K, Stat>,
}

impl<K: Ord> AggregateStats<K> {
    fn from_groups(groups: BTreeMap<K, Vec<f64>>) -> Self {
        Self {
            entries: groups
                .into_iter()
                .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
                .collect(),
        }
    }

    pub fn get(&self, key: &K) -> Option<&Stat> {
        self.entries.get(key)
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|s| s.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<K: Ord + std::fmt::Display> AggregateStats<K> {
    pub fn to_table(&self, key_header: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{key_header:<10} {:>7} {:>7} {:>8}", "Avg", "Std", "Count");
        for (k, s) in &self.entries {
            let _ = writeln!(
                out,
                "{:<10} {:>7.2} {:>7.2} {:>8}",
                k.to_string(),
                s.avg,
                s.std,
                s.count
            );
        }
        out
    }
}

pub fn pos_averages(sentences: &[AlignedSentence]) -> AggregateStats<String> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in sentences {
        for (tag, &score) in s.tree.upos.iter().zip(&s.record.rescaled) {
            groups.entry(tag.clone()).or_default().push(score);
        }
    }
    AggregateStats::from_groups(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub stats: AggregateStats<usize>,
    /// Tokens deeper than the reported levels.
    pub deeper: Option<Stat>,
    pub spearman: Option<f64>,
    pub n_tokens: usize,
}

/// Per-depth statistics for levels `1..=max_depth`, punctuation excluded.
/// The correlation covers every depth.
pub fn depth_stats(sentences: &[AlignedSentence], max_depth: usize) -> DepthReport {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut deeper = Vec::new();
    let mut scores = Vec::new();
    let mut depths = Vec::new();
    for s in sentences {
        for i in 0..s.tree.len() {
            if s.tree.upos[i] == "PUNCT" {
                continue;
            }
            let (d, score) = (s.depths[i], s.record.rescaled[i]);
            if d <= max_depth {
                groups.entry(d).or_default().push(score);
            } else {
                deeper.push(score);
            }
            scores.push(score);
            depths.push(d as f64);
        }
    }
    DepthReport {
        stats: AggregateStats::from_groups(groups),
        deeper: Stat::of(&deeper),
        spearman: spearman(&scores, &depths).ok(),
        n_tokens: scores.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeprelReport {
    pub stats: AggregateStats<String>,
    pub min_count: usize,
    /// Child-parent pairs before relations under `min_count` were dropped.
    pub n_pairs: usize,
}

/// Child score minus parent score, grouped by the child's relation.
pub fn deprel_deltas(sentences: &[AlignedSentence], min_count: usize) -> DeprelReport {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut n_pairs = 0;
    for s in sentences {
        let sc = &s.record.rescaled;
        for (i, head) in s.tree.head.iter().enumerate() {
            if let Some(p) = *head {
                groups
                    .entry(s.tree.deprel[i].clone())
                    .or_default()
                    .push(sc[i] - sc[p]);
                n_pairs += 1;
            }
        }
    }
    groups.retain(|_, v| v.len() >= min_count);
    DeprelReport {
        stats: AggregateStats::from_groups(groups),
        min_count,
        n_pairs,
    }
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMinReport {
    /// (word, max − min) sorted by word.
    pub differences: Vec<(String, f64)>,
    /// Counts over 20 equal bins on [0, 1]; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
    pub min_train: usize,
    pub min_valid: usize,
}

/// Letters only: no digits, punctuation or symbols.
pub fn is_plain_word(token: &str) -> bool {
    !token.is_empty() && token.chars().all(char::is_alphabetic)
}

/// Spread of each frequent word's scores across its occurrences.
pub fn maxmin_differences(
    records: &[AttributionRecord],
    train_counts: &HashMap<String, usize>,
    valid_counts: &HashMap<String, usize>,
    min_train: usize,
    min_valid: usize,
) -> MaxMinReport {
    let mut range: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in records {
        for (t, &s) in r.tokens.iter().zip(&r.rescaled) {
            let e = range.entry(t.as_str()).or_insert((s, s));
            e.0 = e.0.min(s);
            e.1 = e.1.max(s);
        }
    }
    let qualifies = |w: &str| {
        is_plain_word(w)
            && train_counts.get(w).copied().unwrap_or(0) >= min_train
            && valid_counts.get(w).copied().unwrap_or(0) >= min_valid
    };
    let differences: Vec<(String, f64)> = range
        .into_iter()
        .filter(|(w, _)| qualifies(w))
        .map(|(w, (lo, hi))| (w.to_string(), hi - lo))
        .collect();
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for (_, d) in &differences {
        let bin = ((d * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    MaxMinReport {
        differences,
        histogram,
        min_train,
        min_valid,
    }
}

/// Token frequencies of a corpus.
pub fn token_counts<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, SyntaxError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SyntaxError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, SyntaxError> {
    if x.len() != y.len() {
        return Err(SyntaxError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(SyntaxError::TooShort(x.len()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Rank agreement of two models' per-relation average deltas.
pub fn cross_model_relation_correlation(
    a: &AggregateStats<String>,
    b: &AggregateStats<String>,
) -> Result<f64, SyntaxError> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .entries
        .iter()
        .filter_map(|(k, sa)| b.entries.get(k).map(|sb| (sa.avg, sb.avg)))
        .unzip();
    if xs.len() < 3 {
        return Err(SyntaxError::SharedKeys(xs.len()));
    }
    spearman(&xs, &ys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntaxReport {
    pub n_records: usize,
    pub n_aligned: usize,
    pub n_misaligned: usize,
    pub n_unmatched: usize,
    pub aligned_tokens: usize,
    pub non_punct_tokens: usize,
    pub pos: AggregateStats<String>,
    pub depth: DepthReport,
    pub deprel: DeprelReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maxmin: Option<MaxMinReport>,
}

impl SyntaxReport {
    pub fn build(
        records: &[AttributionRecord],
        trees: &[DepTree],
        max_depth: usize,
        min_count: usize,
    ) -> Self {
        let al = align(records, trees);
        let aligned_tokens = al.sentences.iter().map(|s| s.tree.len()).sum();
        let non_punct_tokens = al
            .sentences
            .iter()
            .flat_map(|s| &s.tree.upos)
            .filter(|u| *u != "PUNCT")
            .count();
        SyntaxReport {
            n_records: records.len(),
            n_aligned: al.sentences.len(),
            n_misaligned: al.misaligned,
            n_unmatched: al.unmatched,
            aligned_tokens,
            non_punct_tokens,
            pos: pos_averages(&al.sentences),
            depth: depth_stats(&al.sentences, max_depth),
            deprel: deprel_deltas(&al.sentences, min_count),
            maxmin: None,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "sentences: {} aligned, {} misaligned, {} without parse; {} tokens ({} non-punctuation)\n",
            self.n_aligned, self.n_misaligned, self.n_unmatched, self.aligned_tokens, self.non_punct_tokens
        );
        out.push_str("POS averages\n");
        out.push_str(&self.pos.to_table("UPOS"));
        out.push_str("\nDepth\n");
        out.push_str(&self.depth.stats.to_table("Depth"));
        if let Some(s) = self.depth.deeper {
            let _ = writeln!(out, "{:<10} {:>7.2} {:>7.2} {:>8}", "deeper", s.avg, s.std, s.count);
        }
        match self.depth.spearman {
            Some(r) => {
                let _ = writeln!(out, "Spearman(score, depth) = {r:.3}");
            }
            None => out.push_str("Spearman(score, depth) undefined\n"),
        }
        let _ = writeln!(out, "\nChild - parent by relation (count >= {})", self.deprel.min_count);
        out.push_str(&self.deprel.stats.to_table("Relation"));
        if let Some(m) = &self.maxmin {
            let _ = writeln!(out, "\nMax - min per word ({} words)", m.differences.len());
            for (i, c) in m.histogram.iter().enumerate() {
                let lo = i as f64 / HISTOGRAM_BINS as f64;
                let _ = writeln!(out, "[{lo:.2}, {:.2}) {c}", lo + 1.0 / HISTOGRAM_BINS as f64);
            }
        }
        out
    }
}
