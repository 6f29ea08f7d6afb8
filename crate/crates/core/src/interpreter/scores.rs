use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionRecord, InterpreterError, Side};

/// One line of a score file: an attribution record plus the run that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub record: AttributionRecord,
    #[serde(default)]
    pub tool_version: String,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

fn file_error(path: &Path, message: impl ToString) -> InterpreterError {
    InterpreterError::ScoreFile {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<(), InterpreterError> {
    let file = File::create(path).map_err(|e| file_error(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| file_error(path, e))?;
        out.write_all(b"\n").map_err(|e| file_error(path, e))?;
    }
    out.flush().map_err(|e| file_error(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, InterpreterError> {
    let file = File::open(path).map_err(|e| file_error(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| file_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| file_error(path, format!("line {}: {e}", i + 1)))?;
        if r.record.raw.len() != r.record.tokens.len()
            || r.record.rescaled.len() != r.record.tokens.len()
        {
            return Err(file_error(
                path,
                format!("line {}: score and token counts differ", i + 1),
            ));
        }
        records.push(r);
    }
    Ok(records)
}

/// Score lookup by pair id and side.
#[derive(Clone, Debug, Default)]
pub struct ScoreIndex {
    map: HashMap<(String, Side), AttributionRecord>,
}

impl ScoreIndex {
    pub fn new(records: impl IntoIterator<Item = AttributionRecord>) -> Self {
        Self {
            map: records
                .into_iter()
                .map(|r| ((r.id.clone(), r.side), r))
                .collect(),
        }
    }

    pub fn get(&self, id: &str, side: Side) -> Option<&AttributionRecord> {
        self.map.get(&(id.to_string(), side))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
