use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// One sentence's dependency parse. `head[i]` is the 0-based parent of
/// token `i`, `None` for the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepTree {
    pub sent_id: String,
    pub tokens: Vec<String>,
    pub upos: Vec<String>,
    pub head: Vec<Option<usize>>,
    pub deprel: Vec<String>,
}

impl DepTree {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> Option<usize> {
        self.head.iter().position(Option::is_none)
    }

    /// Head as a signed index with the root marked `-1`.
    pub fn head_signed(&self, i: usize) -> i64 {
        self.head[i].map_or(-1, |h| h as i64)
    }

    /// Depth of every token; the root has depth 1.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.len()];
        for i in 0..self.len() {
            if depth[i] > 0 {
                continue;
            }
            let mut chain = vec![i];
            let mut cur = i;
            let base = loop {
                match self.head[cur] {
                    None => break 0,
                    Some(p) if depth[p] > 0 => break depth[p],
                    Some(p) => {
                        chain.push(p);
                        cur = p;
                    }
                }
            };
            for (k, &node) in chain.iter().rev().enumerate() {
                depth[node] = base + k + 1;
            }
        }
        depth
    }

    fn validate(&self) -> Result<(), String> {
        let n = self.len();
        let roots = self.head.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(format!("expected exactly one root, found {roots}"));
        }
        for (i, h) in self.head.iter().enumerate() {
            if let Some(p) = h {
                if *p >= n {
                    return Err(format!("token {} has head {} outside the sentence", i + 1, p + 1));
                }
            }
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.head[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(format!("cycle through token {}", start + 1));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_conllu(path: &Path) -> Result<Vec<DepTree>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_conllu_str(&text)
}

#[derive(Default)]
struct Block {
    sent_id: Option<String>,
    rows: Vec<(usize, String, String, Option<usize>, String)>,
}

/// Parses CoNLL-U text. Multiword-token ranges and empty nodes are skipped.
pub fn parse_conllu_str(text: &str) -> Result<Vec<DepTree>, CorpusError> {
    let mut trees = Vec::new();
    let mut block = Block::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !block.rows.is_empty() {
                trees.push(finish(std::mem::take(&mut block), trees.len())?);
            }
            block = Block::default();
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("sent_id") {
                block.sent_id = Some(id.trim_start_matches([' ', '=']).trim().to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(CorpusError::ConlluFormat {
                line: line_no,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let bad = |what: &str| CorpusError::ConlluFormat {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let id: usize = cols[0].parse().map_err(|_| bad("ID"))?;
        let head: usize = cols[6].parse().map_err(|_| bad("HEAD"))?;
        if id != block.rows.len() + 1 {
            return Err(bad("ID sequence"));
        }
        let head = head.checked_sub(1);
        block
            .rows
            .push((id, cols[1].to_string(), cols[3].to_string(), head, cols[7].to_string()));
    }
    if !block.rows.is_empty() {
        trees.push(finish(block, trees.len())?);
    }
    Ok(trees)
}

fn finish(block: Block, ordinal: usize) -> Result<DepTree, CorpusError> {
    let sent_id = block
        .sent_id
        .unwrap_or_else(|| format!("#{}", ordinal + 1));
    let mut tree = DepTree {
        sent_id,
        tokens: Vec::with_capacity(block.rows.len()),
        upos: Vec::with_capacity(block.rows.len()),
        head: Vec::with_capacity(block.rows.len()),
        deprel: Vec::with_capacity(block.rows.len()),
    };
    for (_, form, upos, head, rel) in block.rows {
        tree.tokens.push(form);
        tree.upos.push(upos);
        tree.head.push(head);
        tree.deprel.push(rel);
    }
    tree.validate().map_err(|message| CorpusError::InvalidTree {
        sentence: tree.sent_id.clone(),
        message,
    })?;
    Ok(tree)
}
