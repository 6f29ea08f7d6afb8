//! Client for a UDPipe-style parsing service: plain text in, CoNLL-U out.

use std::time::Duration;

use thiserror::Error;

use super::conllu::{parse_conllu_str, DepTree};

#[derive(Debug, Error)]
pub enum FetchError {
    /// Transport failure or HTTP error status; the request may be retried.
    #[error("parse request failed after {attempts} attempt(s): {message}")]
    Retriable { attempts: usize, message: String },
    #[error("parse service returned an invalid response: {0}")]
    Format(String),
}

impl FetchError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, FetchError::Retriable { .. })
    }
}

#[derive(Clone, Debug)]
pub struct ParseClient {
    pub endpoint: String,
    pub model: Option<String>,
    pub max_attempts: usize,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl ParseClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            max_attempts: 3,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(250),
        }
    }

    /// Parses pre-split sentences, one tree per input sentence.
    pub fn parse(&self, sentences: &[String]) -> Result<Vec<DepTree>, FetchError> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let body = sentences
            .iter()
            .map(|s| s.replace('\n', " "))
            .collect::<Vec<_>>()
            .join("\n");
        let text = self.post_with_retry(&body)?;
        let conllu = extract_conllu(&text)?;
        let trees = parse_conllu_str(&conllu).map_err(|e| FetchError::Format(e.to_string()))?;
        if trees.len() != sentences.len() {
            return Err(FetchError::Format(format!(
                "expected {} sentences, got {}",
                sentences.len(),
                trees.len()
            )));
        }
        Ok(trees)
    }

    fn post_with_retry(&self, body: &str) -> Result<String, FetchError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let attempts = self.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let mut req = agent
                .post(&self.endpoint)
                .query("tokenizer", "presegmented")
                .query("tagger", "")
                .query("parser", "")
                .set("Content-Type", "text/plain; charset=utf-8");
            if let Some(model) = &self.model {
                req = req.query("model", model);
            }
            match req.send_string(body) {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| FetchError::Format(e.to_string()))
                }
                Err(ureq::Error::Status(code, _)) => last = format!("HTTP status {code}"),
                Err(e) => last = e.to_string(),
            }
            log::warn!("parse request attempt {attempt}/{attempts} failed: {last}");
            if attempt < attempts {
                std::thread::sleep(self.backoff * attempt as u32);
            }
        }
        Err(FetchError::Retriable {
            attempts,
            message: last,
        })
    }
}

/// Accepts either a raw CoNLL-U body or UDPipe's JSON envelope.
fn extract_conllu(body: &str) -> Result<String, FetchError> {
    let trimmed = body.trim_start();
    if trimmed.starts_with('{') {
        let v: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| FetchError::Format(e.to_string()))?;
        return v
            .get("result")
            .and_then(|r| r.as_str())
            .map(str::to_string)
            .ok_or_else(|| FetchError::Format("JSON response without a 'result' string".into()));
    }
    if !trimmed.is_empty()
        && !trimmed.starts_with('#')
        && !trimmed.starts_with(|c: char| c.is_ascii_digit())
    {
        return Err(FetchError::Format("body is not CoNLL-U".into()));
    }
    Ok(body.to_string())
}

pub fn fetch_parses(endpoint: &str, sentences: &[String]) -> Result<Vec<DepTree>, FetchError> {
    ParseClient::new(endpoint).parse(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_sends_nothing() {
        // An unroutable endpoint would fail if contacted.
        let trees = fetch_parses("http://127.0.0.1:1/process", &[]).unwrap();
        assert!(trees.is_empty());
    }

    #[test]
    fn json_envelope() {
        let body = r#"{"model": "english", "result": "1\tHi\thi\tINTJ\t_\t_\t0\troot\t_\t_\n\n"}"#;
        let c = extract_conllu(body).unwrap();
        assert_eq!(parse_conllu_str(&c).unwrap().len(), 1);
        assert!(extract_conllu("<html>oops</html>").is_err());
    }
}
