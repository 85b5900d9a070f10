//! File formats owned by the front end and small read/write helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use postocr_core::corpus::{align_tokens, parse_aligned, SentencePair};
use postocr_core::correct::Candidate;
use postocr_core::detect::Lexicon;
use serde::{Deserialize, Serialize};

use crate::error::{data, CliResult, Classify};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).or_data(format!("cannot read {}", path.display()))
}

pub fn read_corpus(path: &Path) -> CliResult<Vec<SentencePair>> {
    let text = read_text(path)?;
    let records = parse_aligned(&text).or_data(format!("malformed corpus {}", path.display()))?;
    Ok(records.iter().map(align_tokens).collect())
}

pub fn read_lexicon(path: &Path) -> CliResult<Lexicon> {
    Lexicon::from_tsv(&read_text(path)?).or_data(format!("malformed lexicon {}", path.display()))
}

/// Writes to `path`, or to standard output when there is none.
pub fn emit(path: Option<&Path>, contents: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, contents).or_data(format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .and_then(|_| out.flush())
                .or_data("cannot write to standard output")
        }
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).or_data(format!("cannot write {}", path.display()))
}

/// One token of `correct` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub source_id: String,
    pub token_index: usize,
    pub original: String,
    pub corrected: String,
    /// Whether the detector flagged the token.
    pub flagged: bool,
    pub candidates: Vec<Candidate>,
    /// Log-probability of `corrected` under the model, when one was used.
    pub log_prob: Option<f64>,
}

/// One token of `detect` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub source_id: String,
    pub token_index: usize,
    pub token: String,
    pub label: u8,
    pub probability: Option<f64>,
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &Path) -> CliResult<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| data(format!("{}:{}: {e}", what.display(), i + 1)))
        })
        .collect()
}
