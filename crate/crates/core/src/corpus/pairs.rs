use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::{tokenize, TokenSequence, Vocabulary};
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nli,
    Pi,
}

impl Task {
    pub fn labels(self) -> &'static [Label] {
        match self {
            Task::Nli => &[Label::Entailment, Label::Neutral, Label::Contradiction],
            Task::Pi => &[Label::Paraphrase, Label::NonParaphrase],
        }
    }

    pub fn n_classes(self) -> usize {
        self.labels().len()
    }

    pub fn label(self, class: usize) -> Option<Label> {
        self.labels().get(class).copied()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Nli => "nli",
            Task::Pi => "pi",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nli" => Ok(Task::Nli),
            "pi" => Ok(Task::Pi),
            other => Err(format!("unknown task '{other}' (expected nli or pi)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
    Paraphrase,
    NonParaphrase,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
            Label::Paraphrase => "paraphrase",
            Label::NonParaphrase => "non_paraphrase",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Label::Entailment | Label::Neutral | Label::Contradiction => Task::Nli,
            Label::Paraphrase | Label::NonParaphrase => Task::Pi,
        }
    }

    /// Class index within the label's task.
    pub fn class(self) -> usize {
        self.task()
            .labels()
            .iter()
            .position(|&l| l == self)
            .expect("label belongs to its task")
    }

    pub fn parse_for(task: Task, s: &str) -> Option<Label> {
        task.labels().iter().copied().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A sentence pair as stored on disk, before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub id: String,
    pub sentence1: String,
    pub sentence2: String,
    pub label: Label,
}

impl PairRecord {
    pub fn encode(&self, vocab: &Vocabulary) -> SentencePair {
        SentencePair {
            id: self.id.clone(),
            first: tokenize(&self.sentence1, vocab),
            second: tokenize(&self.sentence2, vocab),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub first: TokenSequence,
    pub second: TokenSequence,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairFormat {
    Jsonl,
    Tsv,
}

impl PairFormat {
    pub fn from_path(path: &Path) -> PairFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => PairFormat::Tsv,
            _ => PairFormat::Jsonl,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    sentence1: String,
    sentence2: String,
    label: String,
}

/// Reads raw pair records, validating labels against `task`.
pub fn read_pair_records(
    path: &Path,
    format: PairFormat,
    task: Task,
) -> Result<Vec<PairRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pair_records(&text, format, task)
}

pub(crate) fn parse_pair_records(
    text: &str,
    format: PairFormat,
    task: Task,
) -> Result<Vec<PairRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw = match format {
            PairFormat::Jsonl => serde_json::from_str::<JsonRecord>(line).map_err(|e| {
                CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                }
            })?,
            PairFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 4 {
                    return Err(CorpusError::Malformed {
                        line: line_no,
                        message: format!("expected 4 tab-separated columns, found {}", cols.len()),
                    });
                }
                JsonRecord {
                    id: cols[0].to_string(),
                    sentence1: cols[1].to_string(),
                    sentence2: cols[2].to_string(),
                    label: cols[3].trim_end_matches('\r').to_string(),
                }
            }
        };
        let label = Label::parse_for(task, &raw.label).ok_or_else(|| CorpusError::UnknownLabel {
            label: raw.label.clone(),
            line: line_no,
        })?;
        if raw.sentence1.trim().is_empty() || raw.sentence2.trim().is_empty() {
            return Err(CorpusError::EmptySentence {
                id: raw.id,
                line: line_no,
            });
        }
        out.push(PairRecord {
            id: raw.id,
            sentence1: raw.sentence1,
            sentence2: raw.sentence2,
            label,
        });
    }
    Ok(out)
}

/// Reads a pair file and tokenizes it against `vocab`.
pub fn load_pairs(
    path: &Path,
    format: PairFormat,
    task: Task,
    vocab: &Vocabulary,
) -> Result<Vec<SentencePair>, CorpusError> {
    Ok(read_pair_records(path, format, task)?
        .iter()
        .map(|r| r.encode(vocab))
        .collect())
}

pub fn write_pair_records(
    path: &Path,
    format: PairFormat,
    records: &[PairRecord],
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        match format {
            PairFormat::Jsonl => {
                let rec = JsonRecord {
                    id: r.id.clone(),
                    sentence1: r.sentence1.clone(),
                    sentence2: r.sentence2.clone(),
                    label: r.label.as_str().to_string(),
                };
                serde_json::to_writer(&mut buf, &rec)?;
                buf.push(b'\n');
            }
            PairFormat::Tsv => writeln!(
                buf,
                "{}\t{}\t{}\t{}",
                r.id, r.sentence1, r.sentence2, r.label
            )?,
        }
    }
    fs::write(path, buf)
}

/// Swaps the two sentences of a random half of the records.
pub fn swap_half(records: &mut [PairRecord], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = records.len();
    for i in sample(&mut rng, n, n / 2) {
        let r = &mut records[i];
        std::mem::swap(&mut r.sentence1, &mut r.sentence2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const JSONL: &str = r#"{"id": "a", "sentence1": "A man runs.", "sentence2": "Someone moves.", "label": "entailment"}
{"id": "b", "sentence1": "A dog.", "sentence2": "A cat.", "label": "contradiction"}
{"id": "c", "sentence1": "It rains", "sentence2": "It is wet", "label": "neutral"}
"#;

    #[test]
    fn jsonl_in_file_order() {
        let recs = parse_pair_records(JSONL, PairFormat::Jsonl, Task::Nli).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(recs[1].label, Label::Contradiction);
    }

    #[test]
    fn unknown_label_names_line() {
        let text = "{\"id\":\"a\",\"sentence1\":\"x\",\"sentence2\":\"y\",\"label\":\"neutral\"}\n\
                    {\"id\":\"b\",\"sentence1\":\"x\",\"sentence2\":\"y\",\"label\":\"maybe\"}\n";
        let err = parse_pair_records(text, PairFormat::Jsonl, Task::Nli).unwrap_err();
        assert_eq!(err.to_string(), "unknown label 'maybe' at line 2");
    }

    #[test]
    fn pi_labels_rejected_for_nli() {
        let text = "q1\tx\ty\tparaphrase\n";
        assert!(parse_pair_records(text, PairFormat::Tsv, Task::Nli).is_err());
        assert!(parse_pair_records(text, PairFormat::Tsv, Task::Pi).is_ok());
    }

    #[test]
    fn malformed_line_reported() {
        let err = parse_pair_records("a\tb\tparaphrase\n", PairFormat::Tsv, Task::Pi).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }), "{err}");
        let err = parse_pair_records("ok\n{not json", PairFormat::Jsonl, Task::Pi).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }), "{err}");
    }

    #[test]
    fn tsv_equals_jsonl() {
        let tsv = "a\tA man runs.\tSomeone moves.\tentailment\n\
                   b\tA dog.\tA cat.\tcontradiction\n\
                   c\tIt rains\tIt is wet\tneutral\n";
        let from_tsv = parse_pair_records(tsv, PairFormat::Tsv, Task::Nli).unwrap();
        let from_json = parse_pair_records(JSONL, PairFormat::Jsonl, Task::Nli).unwrap();
        assert_eq!(from_tsv, from_json);
    }

    #[test]
    fn swap_half_is_seeded() {
        let mut recs = parse_pair_records(JSONL, PairFormat::Jsonl, Task::Nli).unwrap();
        recs.extend(recs.clone());
        let mut a = recs.clone();
        let mut b = recs.clone();
        swap_half(&mut a, 7);
        swap_half(&mut b, 7);
        assert_eq!(a, b);
        let swapped = a
            .iter()
            .zip(&recs)
            .filter(|(x, y)| x.sentence1 != y.sentence1)
            .count();
        assert_eq!(swapped, 3);
    }

    #[test]
    fn class_indices() {
        assert_eq!(Label::Contradiction.class(), 2);
        assert_eq!(Label::NonParaphrase.class(), 1);
        assert_eq!(Task::Pi.label(0), Some(Label::Paraphrase));
    }
}
