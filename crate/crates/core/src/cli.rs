//! The `wordimp` command-line tool. Stages talk to each other through
//! files only; every artifact records the tool version, a hash of the
//! resolved configuration and the seed.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    gen_toy_dataset, load_pairs, parse_conllu, read_pair_records, tokenize_surface, toy_conllu,
    write_pair_records, CorpusError, PairFormat, PairRecord, SentencePair, Task, ToySpec,
    Vocabulary,
};
use crate::crosstask::{run_grid, CrossTaskError, GridConfig, GridReport};
use crate::encoder::{
    evaluate_accuracy, train_model, Checkpoint, EncoderConfig, EncoderError, TrainConfig,
};
use crate::interpreter::{
    attribute_all, masked_kl, read_scores, train_interpreter, write_scores, Interpreter,
    InterpreterConfig, InterpreterError, ScoreIndex, ScoreRecord, Side,
};
use crate::persist::{sha256_hex, Provenance};
use crate::syntax::{maxmin_differences, sentence_key, token_counts, SyntaxReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("{0} is not set (use --set {0}=PATH or the config file)")]
    MissingSetting(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Corpus {
        path: PathBuf,
        #[source]
        source: CorpusError,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Interpreter(#[from] InterpreterError),
    #[error(transparent)]
    CrossTask(#[from] CrossTaskError),
}

#[derive(Debug, Parser)]
#[command(name = "wordimp", version, about = "Word-importance scores for sentence-pair classifiers")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a config key by its dotted name, e.g. `train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a toy dataset with known important tokens, plus parses.
    GenToy,
    /// Train a pair classifier.
    TrainModel,
    /// Train an interpreter for a trained classifier.
    TrainInterpreter,
    /// Score every token of every pair with a trained interpreter.
    Score,
    /// Accuracy grid under removal of low-scored tokens vs random removal.
    EvalCrosstask,
    /// POS, depth and dependency-relation statistics of scores.
    AnalyzeSyntax,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Pairs to score or evaluate; falls back to `valid`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub interpreter: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub conllu: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_keywords: usize,
    pub n_fillers: usize,
    pub sentence_len: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_valid: 400,
            n_keywords: 6,
            n_fillers: 30,
            sentence_len: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub preset: Preset,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub emb_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub min_freq: Option<usize>,
}

impl EncoderSection {
    pub fn resolve(&self, vocab_size: usize, n_classes: usize) -> EncoderConfig {
        let mut c = match self.preset {
            Preset::Desk => EncoderConfig::desk(vocab_size, n_classes),
            Preset::Full => EncoderConfig::full(vocab_size, n_classes),
        };
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.emb_dim = self.emb_dim.unwrap_or(c.emb_dim);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.max_len = self.max_len.unwrap_or(c.max_len);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntaxSection {
    pub max_depth: usize,
    pub min_count: usize,
    pub min_train: usize,
    pub min_valid: usize,
}

impl Default for SyntaxSection {
    fn default() -> Self {
        Self {
            max_depth: 5,
            min_count: 100,
            min_train: 100,
            min_valid: 10,
        }
    }
}

/// Resolved configuration of one command run. Module seeds are always
/// taken from the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub paths: Paths,
    pub toy: ToySection,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub interpreter: InterpreterConfig,
    pub grid: GridConfig,
    pub syntax: SyntaxSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Pi,
            seed: 1,
            paths: Paths::default(),
            toy: ToySection::default(),
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
            interpreter: InterpreterConfig::default(),
            grid: GridConfig::default(),
            syntax: SyntaxSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key inside a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|_| CliError::NotFound(p.to_path_buf()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_override(&mut table, s)?;
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.interpreter.seed = cfg.seed;
        cfg.grid.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    fn require(&self, key: &'static str) -> Result<&Path, CliError> {
        let p = match key {
            "paths.train" => &self.paths.train,
            "paths.valid" => &self.paths.valid,
            "paths.checkpoint" => &self.paths.checkpoint,
            "paths.interpreter" => &self.paths.interpreter,
            "paths.scores" => &self.paths.scores,
            "paths.conllu" => &self.paths.conllu,
            "paths.data" => {
                if self.paths.data.is_some() {
                    &self.paths.data
                } else {
                    &self.paths.valid
                }
            }
            _ => unreachable!("unknown path key {key}"),
        };
        let p = p.as_deref().ok_or(CliError::MissingSetting(key))?;
        if !p.exists() {
            return Err(CliError::NotFound(p.to_path_buf()));
        }
        Ok(p)
    }
}

/// A JSON artifact: provenance plus a payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: T) -> Result<(), CliError> {
    let art = Artifact {
        provenance: prov.clone(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&art).expect("artifact serializes");
    text.push('\n');
    write_file(path, text)
}

fn read_records(path: &Path, task: Task) -> Result<Vec<PairRecord>, CliError> {
    read_pair_records(path, PairFormat::from_path(path), task).map_err(|source| CliError::Corpus {
        path: path.to_path_buf(),
        source,
    })
}

fn read_pairs(path: &Path, task: Task, vocab: &Vocabulary) -> Result<Vec<SentencePair>, CliError> {
    load_pairs(path, PairFormat::from_path(path), task, vocab).map_err(|source| CliError::Corpus {
        path: path.to_path_buf(),
        source,
    })
}

fn surface_sentences(records: &[PairRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .flat_map(|r| [tokenize_surface(&r.sentence1), tokenize_surface(&r.sentence2)])
        .collect()
}

#[derive(Serialize)]
struct ToyMeta<'a> {
    task: Task,
    keywords: &'a [String],
    fillers: &'a [String],
    n_train: usize,
    n_valid: usize,
}

fn cmd_gen_toy(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let t = &cfg.toy;
    let spec = ToySpec {
        n_pairs: t.n_train + t.n_valid,
        n_keywords: t.n_keywords,
        n_fillers: t.n_fillers,
        sentence_len: t.sentence_len,
        task: cfg.task,
    };
    let data = gen_toy_dataset(&spec, cfg.seed).map_err(|source| CliError::Corpus {
        path: out.to_path_buf(),
        source,
    })?;
    let (train, valid) = data.records.split_at(t.n_train);
    for (name, part) in [("train", train), ("valid", valid)] {
        let path = out.join(format!("{name}.jsonl"));
        write_pair_records(&path, PairFormat::Jsonl, part)
            .map_err(|source| CliError::Write { path: path.clone(), source })?;
        let sentences: Vec<(String, String)> = part
            .iter()
            .flat_map(|r| {
                [
                    (sentence_key(&r.id, Side::First), r.sentence1.clone()),
                    (sentence_key(&r.id, Side::Second), r.sentence2.clone()),
                ]
            })
            .collect();
        write_file(
            &out.join(format!("{name}.conllu")),
            toy_conllu(&sentences, &data.keywords),
        )?;
    }
    let meta = ToyMeta {
        task: cfg.task,
        keywords: &data.keywords,
        fillers: &data.fillers,
        n_train: train.len(),
        n_valid: valid.len(),
    };
    write_json(&out.join("toy.json"), &cfg.provenance(), meta)
}

#[derive(Serialize)]
struct TrainMetrics {
    accuracy: f64,
    epochs: usize,
    seed: u64,
    steps: usize,
    final_loss: Option<f64>,
    n_train: usize,
    n_valid: usize,
    vocab_size: usize,
    checkpoint_sha256: String,
}

fn cmd_train_model(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let train_path = cfg.require("paths.train")?;
    let valid_path = cfg.require("paths.valid")?;
    let train_records = read_records(train_path, cfg.task)?;
    let min_freq = cfg.encoder.min_freq.unwrap_or(Vocabulary::DEFAULT_MIN_FREQ);
    let vocab = Vocabulary::build(&surface_sentences(&train_records), min_freq);
    let train: Vec<SentencePair> = train_records.iter().map(|r| r.encode(&vocab)).collect();
    let valid = read_pairs(valid_path, cfg.task, &vocab)?;
    let enc = cfg.encoder.resolve(vocab.len(), cfg.task.n_classes());
    log::info!("training on {} pairs, vocabulary {}", train.len(), vocab.len());
    let outcome = train_model(&train, &valid, &vocab, &enc, &cfg.train)?;
    let mut ck = outcome.checkpoint;
    let accuracy = match ck.valid_accuracy {
        Some(a) => a,
        None => evaluate_accuracy(&ck.model(), &valid)?.accuracy,
    };
    ck.valid_accuracy = Some(accuracy);
    ck.provenance = Some(cfg.provenance());
    ck.save(&out.join("model.ckpt"))?;
    let metrics = TrainMetrics {
        accuracy,
        epochs: cfg.train.epochs,
        seed: cfg.seed,
        steps: outcome.log.len(),
        final_loss: outcome.log.last().map(|l| l.loss),
        n_train: train.len(),
        n_valid: valid.len(),
        vocab_size: vocab.len(),
        checkpoint_sha256: ck.fingerprint(),
    };
    log::info!("validation accuracy {accuracy:.4}");
    write_json(&out.join("train_metrics.json"), &cfg.provenance(), metrics)
}

#[derive(Serialize)]
struct InterpreterMetrics {
    valid_kl: Option<f64>,
    running_kl: f64,
    margin: f64,
    lambdas: Vec<f64>,
    steps: usize,
    n_train: usize,
}

fn cmd_train_interpreter(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(cfg.require("paths.checkpoint")?)?;
    let train = read_pairs(cfg.require("paths.train")?, cfg.task, &ck.vocabulary)?;
    let valid = match &cfg.paths.valid {
        Some(_) => Some(read_pairs(cfg.require("paths.valid")?, cfg.task, &ck.vocabulary)?),
        None => None,
    };
    let outcome = train_interpreter(&ck, &train, &cfg.interpreter)?;
    let mut interp = outcome.interpreter;
    interp.provenance = Some(cfg.provenance());
    interp.save(&out.join("interpreter.bin"))?;
    let valid_kl = match &valid {
        Some(v) => Some(masked_kl(&ck, &interp, v, cfg.seed)?),
        None => None,
    };
    let metrics = InterpreterMetrics {
        valid_kl,
        running_kl: outcome.running_kl,
        margin: cfg.interpreter.margin,
        lambdas: outcome.lagrangians.iter().map(|l| l.lambda).collect(),
        steps: outcome.log.len(),
        n_train: train.len().min(cfg.interpreter.max_examples),
    };
    write_json(&out.join("interpreter_metrics.json"), &cfg.provenance(), metrics)
}

fn cmd_score(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(cfg.require("paths.checkpoint")?)?;
    let interp = Interpreter::load(cfg.require("paths.interpreter")?)?;
    let data = read_pairs(cfg.require("paths.data")?, cfg.task, &ck.vocabulary)?;
    let prov = cfg.provenance();
    let records: Vec<ScoreRecord> = attribute_all(&ck, &interp, &data, false)?
        .into_iter()
        .map(|record| ScoreRecord {
            record,
            tool_version: prov.tool_version.clone(),
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
        })
        .collect();
    write_scores(&out.join("scores.jsonl"), &records)?;
    log::info!("wrote {} score records", records.len());
    Ok(())
}

fn cmd_eval_crosstask(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(cfg.require("paths.checkpoint")?)?;
    let scores = read_scores(cfg.require("paths.scores")?)?;
    let data = read_pairs(cfg.require("paths.data")?, cfg.task, &ck.vocabulary)?;
    let index = ScoreIndex::new(scores.into_iter().map(|s| s.record));
    let report: GridReport = run_grid(&ck.model(), &index, &data, &cfg.grid)?;
    write_json(&out.join("grid.json"), &cfg.provenance(), &report)?;
    write_file(&out.join("grid.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn counts_of(path: &Path, task: Task) -> Result<HashMap<String, usize>, CliError> {
    let sentences = surface_sentences(&read_records(path, task)?);
    Ok(token_counts(sentences.iter().map(Vec::as_slice)))
}

fn cmd_analyze_syntax(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scores = read_scores(cfg.require("paths.scores")?)?;
    let conllu = cfg.require("paths.conllu")?;
    let trees = parse_conllu(conllu).map_err(|source| CliError::Corpus {
        path: conllu.to_path_buf(),
        source,
    })?;
    let records: Vec<_> = scores.into_iter().map(|s| s.record).collect();
    let s = &cfg.syntax;
    let mut report = SyntaxReport::build(&records, &trees, s.max_depth, s.min_count);
    if cfg.paths.train.is_some() && cfg.paths.valid.is_some() {
        let train = counts_of(cfg.require("paths.train")?, cfg.task)?;
        let valid = counts_of(cfg.require("paths.valid")?, cfg.task)?;
        report.maxmin = Some(maxmin_differences(&records, &train, &valid, s.min_train, s.min_valid));
    }
    if report.n_misaligned + report.n_unmatched > 0 {
        log::warn!(
            "{} records misaligned with their parse, {} without a parse; skipped",
            report.n_misaligned,
            report.n_unmatched
        );
    }
    write_json(&out.join("syntax.json"), &cfg.provenance(), &report)?;
    write_file(&out.join("syntax.txt"), report.to_table())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed, &cli.set)?;
    fs::create_dir_all(&cli.out).map_err(|source| CliError::Write {
        path: cli.out.clone(),
        source,
    })?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenToy => cmd_gen_toy(&cfg, out),
        Command::TrainModel => cmd_train_model(&cfg, out),
        Command::TrainInterpreter => cmd_train_interpreter(&cfg, out),
        Command::Score => cmd_score(&cfg, out),
        Command::EvalCrosstask => cmd_eval_crosstask(&cfg, out),
        Command::AnalyzeSyntax => cmd_analyze_syntax(&cfg, out),
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> std::process::ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return std::process::ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
