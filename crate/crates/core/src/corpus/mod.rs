//! Dataset ingestion: tokenization, vocabularies, sentence-pair files,
//! synthetic toy tasks, and dependency parses.

mod conllu;
mod fetch;
mod pairs;
mod tokenize;
mod toy;

use std::path::PathBuf;

use thiserror::Error;

pub use conllu::{parse_conllu, parse_conllu_str, DepTree};
pub use fetch::{fetch_parses, FetchError, ParseClient};
pub use pairs::{
    load_pairs, read_pair_records, swap_half, write_pair_records, Label, PairFormat, PairRecord,
    SentencePair, Task,
};
pub use tokenize::{tokenize, tokenize_surface, TokenSequence, Vocabulary, PAD_ID, UNK_ID};
pub use toy::{gen_toy_dataset, toy_conllu, ToyDataset, ToySpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown label '{label}' at line {line}")]
    UnknownLabel { label: String, line: usize },
    #[error("empty sentence in record '{id}' at line {line}")]
    EmptySentence { id: String, line: usize },
    #[error("invalid toy spec: {0}")]
    InvalidToySpec(String),
    #[error("cannot balance labels after {attempts} attempts (counts so far: {counts:?})")]
    Infeasible { attempts: usize, counts: Vec<usize> },
    #[error("CoNLL-U line {line}: {message}")]
    ConlluFormat { line: usize, message: String },
    #[error("invalid tree in sentence {sentence}: {message}")]
    InvalidTree { sentence: String, message: String },
}

/// Compares a tokenized sentence with a parse, token by token.
pub fn aligns(tokens: &[String], tree: &DepTree) -> bool {
    tokens.len() == tree.len()
        && tokens
            .iter()
            .zip(&tree.tokens)
            .all(|(a, b)| *a == b.to_lowercase())
}
