//! Word-importance scores for sentence-pair classifiers.
//!
//! A siamese transformer classifier is trained on a sentence-pair task
//! (natural language inference or paraphrase identification). A second
//! model, the interpreter, learns per-token Hard Concrete gates that mask
//! as many input words as possible while keeping the classifier's
//! prediction close to its unmasked output. The probability that a gate
//! stays open is the token's importance score.
//!
//! Modules:
//! - [`corpus`]: tokenization, pair files, toy tasks, CoNLL-U parses
//! - [`encoder`]: the classifier and its training loop
//! - [`gates`]: Hard Concrete gate primitives
//! - [`interpreter`]: mask predictors, their training, score extraction
//! - [`crosstask`]: token-removal accuracy grids with random baselines
//! - [`syntax`]: aggregations of scores over parse trees
//! - [`cli`]: the `wordimp` command-line tool

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod crosstask;
pub mod encoder;
pub mod gates;
pub mod interpreter;
pub mod persist;
pub mod syntax;
