//! Synthetic sentence-pair tasks with known important tokens.
//!
//! Every sentence holds one or two keywords among filler words. Labels are
//! functions of the keywords only, so fillers are irrelevant by
//! construction:
//!
//! * PI: paraphrase iff both sentences carry the same keyword multiset.
//! * NLI: contradiction iff the antonym keywords (the first two) are split
//!   across the sentences; otherwise entailment iff the second sentence's
//!   keyword set is a subset of the first's; otherwise neutral.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pairs::{Label, PairRecord, Task};
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_pairs: usize,
    pub n_keywords: usize,
    pub n_fillers: usize,
    pub sentence_len: usize,
    pub task: Task,
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidToySpec(m.to_string()));
        if self.sentence_len < 2 {
            return bad("sentence_len must be at least 2");
        }
        if self.n_keywords < 2 {
            return bad("n_keywords must be at least 2");
        }
        if self.n_fillers < 10 {
            return bad("n_fillers must be at least 10");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: ToySpec,
    pub records: Vec<PairRecord>,
    pub keywords: Vec<String>,
    pub fillers: Vec<String>,
}

impl ToyDataset {
    pub fn is_keyword(&self, token: &str) -> bool {
        self.keywords.iter().any(|k| k == token)
    }

    /// Keyword alphabet for `n` keywords; shared by every toy task.
    pub fn keyword_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("key{}", alpha(i))).collect()
    }

    pub fn filler_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("fil{}", alpha(i))).collect()
    }
}

/// Letters-only name for an index: a, b, …, z, ba, bb, …
fn alpha(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

pub(crate) fn keyword_multiset<'a>(tokens: &[&'a str], keywords: &[String]) -> Vec<&'a str> {
    let mut ks: Vec<&str> = tokens
        .iter()
        .copied()
        .filter(|t| keywords.iter().any(|k| k == t))
        .collect();
    ks.sort_unstable();
    ks
}

/// Applies the toy label rule to two tokenized sentences.
pub fn toy_label(task: Task, first: &[&str], second: &[&str], keywords: &[String]) -> Label {
    let a = keyword_multiset(first, keywords);
    let b = keyword_multiset(second, keywords);
    match task {
        Task::Pi => {
            if a == b {
                Label::Paraphrase
            } else {
                Label::NonParaphrase
            }
        }
        Task::Nli => {
            let (k0, k1) = (keywords[0].as_str(), keywords[1].as_str());
            let split = (a.contains(&k0) && b.contains(&k1)) || (a.contains(&k1) && b.contains(&k0));
            if split {
                return Label::Contradiction;
            }
            let sa: BTreeSet<&str> = a.into_iter().collect();
            if b.iter().all(|k| sa.contains(k)) {
                Label::Entailment
            } else {
                Label::Neutral
            }
        }
    }
}

const MAX_ATTEMPTS_PER_PAIR: usize = 1000;

struct Generator<'a> {
    spec: &'a ToySpec,
    keywords: &'a [String],
    fillers: &'a [String],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn random_keywords(&mut self) -> Vec<usize> {
        let n = self.rng.gen_range(1..=2usize.min(self.spec.sentence_len - 1));
        (0..n)
            .map(|_| self.rng.gen_range(0..self.keywords.len()))
            .collect()
    }

    fn sentence(&mut self, kws: &[usize]) -> Vec<String> {
        let mut toks: Vec<String> = kws.iter().map(|&k| self.keywords[k].clone()).collect();
        while toks.len() < self.spec.sentence_len {
            let f = self.rng.gen_range(0..self.fillers.len());
            toks.push(self.fillers[f].clone());
        }
        toks.shuffle(&mut self.rng);
        toks
    }

    /// Keyword choices for a candidate pair, mixing strategies so every
    /// label is reachable with reasonable probability.
    fn candidate(&mut self) -> (Vec<usize>, Vec<usize>) {
        let first = self.random_keywords();
        let strategy = self.rng.gen_range(0..3);
        let second = match (self.spec.task, strategy) {
            (Task::Pi, 0) => {
                let mut s = first.clone();
                s.shuffle(&mut self.rng);
                s
            }
            (Task::Nli, 0) => vec![first[self.rng.gen_range(0..first.len())]],
            (Task::Nli, 1) => {
                let mut first = first.clone();
                first[0] = 0;
                return (first, vec![1]);
            }
            _ => self.random_keywords(),
        };
        (first, second)
    }
}

/// Generates a label-balanced toy dataset, deterministic in `(spec, seed)`.
pub fn gen_toy_dataset(spec: &ToySpec, seed: u64) -> Result<ToyDataset, CorpusError> {
    spec.validate()?;
    let keywords = ToyDataset::keyword_names(spec.n_keywords);
    let fillers = ToyDataset::filler_names(spec.n_fillers);
    let labels = spec.task.labels();
    let quota = spec.n_pairs.div_ceil(labels.len());
    let mut counts = vec![0usize; labels.len()];
    let mut records = Vec::with_capacity(spec.n_pairs);
    let mut gen = Generator {
        spec,
        keywords: &keywords,
        fillers: &fillers,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let max_attempts = MAX_ATTEMPTS_PER_PAIR * spec.n_pairs.max(1);
    let mut attempts = 0;
    while records.len() < spec.n_pairs {
        if attempts == max_attempts {
            return Err(CorpusError::Infeasible { attempts, counts });
        }
        attempts += 1;
        let (k1, k2) = gen.candidate();
        let s1 = gen.sentence(&k1);
        let s2 = gen.sentence(&k2);
        let r1: Vec<&str> = s1.iter().map(String::as_str).collect();
        let r2: Vec<&str> = s2.iter().map(String::as_str).collect();
        let label = toy_label(spec.task, &r1, &r2, &keywords);
        let class = label.class();
        if counts[class] >= quota {
            continue;
        }
        counts[class] += 1;
        records.push((s1.join(" "), s2.join(" "), label));
    }
    records.shuffle(&mut gen.rng);
    let records = records
        .into_iter()
        .enumerate()
        .map(|(i, (s1, s2, label))| PairRecord {
            id: format!("toy-{}-{i:05}", spec.task),
            sentence1: s1,
            sentence2: s2,
            label,
        })
        .collect();
    Ok(ToyDataset {
        spec: *spec,
        records,
        keywords,
        fillers,
    })
}

/// Renders toy sentences as CoNLL-U. Keywords are `NOUN`, fillers `DET`;
/// the first keyword heads the sentence, a second keyword attaches to it as
/// `conj` and fillers attach to the nearest keyword as `det`.
pub fn toy_conllu(sentences: &[(String, String)], keywords: &[String]) -> String {
    let mut out = String::new();
    for (sent_id, text) in sentences {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let kw_pos: Vec<usize> = (0..toks.len())
            .filter(|&i| keywords.iter().any(|k| k == toks[i]))
            .collect();
        let root = kw_pos.first().copied().unwrap_or(0);
        let _ = writeln!(out, "# sent_id = {sent_id}");
        let _ = writeln!(out, "# text = {text}");
        for (i, tok) in toks.iter().enumerate() {
            let is_kw = kw_pos.contains(&i);
            let (head, rel) = if i == root {
                (0, "root")
            } else if is_kw {
                (root + 1, "conj")
            } else {
                let nearest = kw_pos
                    .iter()
                    .copied()
                    .min_by_key(|&k| (k as isize - i as isize).unsigned_abs())
                    .unwrap_or(root);
                (nearest + 1, "det")
            };
            let upos = if is_kw { "NOUN" } else { "DET" };
            let _ = writeln!(
                out,
                "{}\t{tok}\t{tok}\t{upos}\t_\t_\t{head}\t{rel}\t_\t_",
                i + 1
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, n: usize) -> ToySpec {
        ToySpec {
            n_pairs: n,
            n_keywords: 6,
            n_fillers: 30,
            sentence_len: 6,
            task,
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_toy_dataset(&spec(Task::Pi, 200), 3).unwrap();
        let b = gen_toy_dataset(&spec(Task::Pi, 200), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_dataset(&spec(Task::Pi, 200), 4).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn reordered_keywords_are_paraphrases() {
        let kws = ToyDataset::keyword_names(4);
        let l = toy_label(
            Task::Pi,
            &["keya", "fila", "keyb"],
            &["keyb", "filc", "keya"],
            &kws,
        );
        assert_eq!(l, Label::Paraphrase);
        let l = toy_label(Task::Pi, &["keya", "fila"], &["keya", "keya"], &kws);
        assert_eq!(l, Label::NonParaphrase);
    }

    #[test]
    fn nli_rule() {
        let kws = ToyDataset::keyword_names(4);
        assert_eq!(
            toy_label(Task::Nli, &["keyc", "keyd"], &["keyd"], &kws),
            Label::Entailment
        );
        assert_eq!(
            toy_label(Task::Nli, &["keyc"], &["keyd"], &kws),
            Label::Neutral
        );
        assert_eq!(
            toy_label(Task::Nli, &["keyb", "keyc"], &["keya"], &kws),
            Label::Contradiction
        );
    }

    #[test]
    fn balanced_pi_counts() {
        let d = gen_toy_dataset(&spec(Task::Pi, 2000), 11).unwrap();
        assert_eq!(d.records.len(), 2000);
        for label in Task::Pi.labels() {
            let n = d.records.iter().filter(|r| r.label == *label).count();
            assert!((950..=1050).contains(&n), "{label}: {n}");
        }
    }

    #[test]
    fn labels_match_independent_rederivation() {
        for task in [Task::Pi, Task::Nli] {
            let d = gen_toy_dataset(&spec(task, 600), 5).unwrap();
            for r in &d.records {
                let a: Vec<&str> = r.sentence1.split(' ').collect();
                let b: Vec<&str> = r.sentence2.split(' ').collect();
                let ka: Vec<&str> = a.iter().copied().filter(|t| t.starts_with("key")).collect();
                let kb: Vec<&str> = b.iter().copied().filter(|t| t.starts_with("key")).collect();
                let expected = match task {
                    Task::Pi => {
                        let (mut x, mut y) = (ka.clone(), kb.clone());
                        x.sort();
                        y.sort();
                        if x == y {
                            Label::Paraphrase
                        } else {
                            Label::NonParaphrase
                        }
                    }
                    Task::Nli => {
                        let has = |v: &[&str], k: &str| v.contains(&k);
                        if (has(&ka, "keya") && has(&kb, "keyb"))
                            || (has(&ka, "keyb") && has(&kb, "keya"))
                        {
                            Label::Contradiction
                        } else if kb.iter().all(|k| ka.contains(k)) {
                            Label::Entailment
                        } else {
                            Label::Neutral
                        }
                    }
                };
                assert_eq!(r.label, expected, "{r:?}");
                assert_eq!(a.len(), 6);
                assert!((1..=2).contains(&ka.len()));
            }
        }
    }

    #[test]
    fn infeasible_nli_with_two_keywords() {
        let s = ToySpec {
            n_keywords: 2,
            ..spec(Task::Nli, 30)
        };
        assert!(matches!(
            gen_toy_dataset(&s, 1),
            Err(CorpusError::Infeasible { .. })
        ));
    }

    #[test]
    fn rejects_invalid_spec() {
        let s = ToySpec {
            n_fillers: 5,
            ..spec(Task::Pi, 10)
        };
        assert!(matches!(
            gen_toy_dataset(&s, 1),
            Err(CorpusError::InvalidToySpec(_))
        ));
    }

    #[test]
    fn alpha_names() {
        assert_eq!(alpha(0), "a");
        assert_eq!(alpha(25), "z");
        assert_eq!(alpha(26), "ba");
    }
}
