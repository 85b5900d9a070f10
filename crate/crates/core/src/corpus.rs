//! Character-aligned OCR/gold corpora: parsing, token alignment, noise
//! filtering and corpus statistics.
//!
//! The on-disk layout is a sequence of three-line records separated by a
//! blank line:
//!
//! ```text
//! [OCR_toInput] ктка спи
//! [OCR_aligned] к@тка спи
//! [GS_aligned] котка спи
//! ```

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{cer, levenshtein, normalized_levenshtein};

/// Alignment padding symbol.
pub const PADDING: char = '@';
/// Uncertainty symbol, treated exactly like [`PADDING`].
pub const UNCERTAIN: char = '#';

pub const TAG_RAW: &str = "[OCR_toInput]";
pub const TAG_OCR: &str = "[OCR_aligned]";
pub const TAG_GS: &str = "[GS_aligned]";

pub const DEFAULT_NOISE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

pub fn is_marker(c: char) -> bool {
    c == PADDING || c == UNCERTAIN
}

/// Removes alignment and uncertainty markers.
pub fn strip_markers(s: &str) -> String {
    s.chars().filter(|&c| !is_marker(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedRecord {
    pub ocr_raw: String,
    pub ocr_aligned: String,
    pub gs_aligned: String,
    pub source_id: String,
}

impl AlignedRecord {
    /// Builds a record from aligned streams, deriving the raw OCR text.
    pub fn from_aligned(
        source_id: impl Into<String>,
        ocr_aligned: impl Into<String>,
        gs_aligned: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let ocr_aligned = ocr_aligned.into();
        let gs_aligned = gs_aligned.into();
        let record = Self {
            ocr_raw: ocr_aligned.chars().filter(|&c| c != PADDING).collect(),
            ocr_aligned,
            gs_aligned,
            source_id: source_id.into(),
        };
        record.validate(0)?;
        Ok(record)
    }

    fn validate(&self, line: usize) -> Result<(), CorpusError> {
        let lo = self.ocr_aligned.chars().count();
        let lg = self.gs_aligned.chars().count();
        if lo != lg {
            return Err(malformed(
                line,
                format!("aligned stream lengths differ ({lo} vs {lg})"),
            ));
        }
        let derived: String = self.ocr_aligned.chars().filter(|&c| c != PADDING).collect();
        if derived != self.ocr_raw {
            return Err(malformed(line, "raw OCR does not match the aligned OCR stream"));
        }
        Ok(())
    }

    pub fn ocr_stripped(&self) -> String {
        strip_markers(&self.ocr_aligned)
    }

    pub fn gs_stripped(&self) -> String {
        strip_markers(&self.gs_aligned)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub ocr_token: String,
    pub gs_token: String,
    /// 0 = correct, 1 = erroneous.
    pub label: u8,
    /// Half-open char range into the aligned streams.
    pub char_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub record: AlignedRecord,
    pub tokens: Vec<TokenPair>,
    pub norm_lev: f64,
}

impl SentencePair {
    pub fn ocr_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.ocr_token.as_str())
    }

    pub fn gs_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.gs_token.as_str())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| t.label).collect()
    }
}

fn strip_tag<'a>(line: &'a str, tag: &str, lineno: usize) -> Result<&'a str, CorpusError> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| malformed(lineno, format!("expected {tag}")))?;
    // one separating space; an empty stream may omit it
    Ok(rest.strip_prefix(' ').unwrap_or(rest))
}

/// Parses the tagged triplet format. Record ids are 1-based ordinals.
pub fn parse_aligned(text: &str) -> Result<Vec<AlignedRecord>, CorpusError> {
    parse_aligned_with_prefix(text, "")
}

/// Like [`parse_aligned`], with `prefix` prepended to every source id.
pub fn parse_aligned_with_prefix(text: &str, prefix: &str) -> Result<Vec<AlignedRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .peekable();
    loop {
        while matches!(lines.peek(), Some((_, l)) if l.trim().is_empty()) {
            lines.next();
        }
        let Some((start, raw_line)) = lines.next() else {
            break;
        };
        let ocr_raw = strip_tag(raw_line, TAG_RAW, start)?;
        let (l2, ocr_line) = lines
            .next()
            .ok_or_else(|| malformed(start + 1, format!("missing {TAG_OCR}")))?;
        let ocr_aligned = strip_tag(ocr_line, TAG_OCR, l2)?;
        let (l3, gs_line) = lines
            .next()
            .ok_or_else(|| malformed(l2 + 1, format!("missing {TAG_GS}")))?;
        let gs_aligned = strip_tag(gs_line, TAG_GS, l3)?;
        let record = AlignedRecord {
            ocr_raw: ocr_raw.to_string(),
            ocr_aligned: ocr_aligned.to_string(),
            gs_aligned: gs_aligned.to_string(),
            source_id: format!("{prefix}{}", records.len() + 1),
        };
        record.validate(start)?;
        records.push(record);
    }
    Ok(records)
}

/// Serializes records back into the triplet format.
pub fn write_aligned(records: &[AlignedRecord]) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{TAG_RAW} {}", r.ocr_raw);
        let _ = writeln!(out, "{TAG_OCR} {}", r.ocr_aligned);
        let _ = writeln!(out, "{TAG_GS} {}", r.gs_aligned);
    }
    out
}

/// Splits the gold stream on whitespace and slices the same char range
/// out of the OCR stream; markers are removed after slicing.
pub fn align_tokens(record: &AlignedRecord) -> SentencePair {
    let gs: Vec<char> = record.gs_aligned.chars().collect();
    let ocr: Vec<char> = record.ocr_aligned.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < gs.len() {
        if gs[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < gs.len() && !gs[i].is_whitespace() {
            i += 1;
        }
        let gs_token: String = gs[start..i].iter().filter(|&&c| !is_marker(c)).collect();
        let ocr_token: String = ocr[start..i].iter().filter(|&&c| !is_marker(c)).collect();
        let label = u8::from(ocr_token != gs_token);
        tokens.push(TokenPair {
            ocr_token,
            gs_token,
            label,
            char_span: start..i,
        });
    }
    SentencePair {
        norm_lev: normalized_levenshtein(&record.ocr_stripped(), &record.gs_stripped()),
        record: record.clone(),
        tokens,
    }
}

/// Keeps sentences with `norm_lev < threshold`, preserving order.
pub fn filter_by_noise(sentences: Vec<SentencePair>, threshold: f64) -> Vec<SentencePair> {
    sentences
        .into_iter()
        .filter(|s| s.norm_lev < threshold)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: u64,
    pub n_words: u64,
    pub n_errors: u64,
    /// Mean per-sentence CER in percent; `None` when no sentence has a
    /// nonempty gold side.
    pub mean_cer: Option<f64>,
    /// Population standard deviation of per-sentence CER.
    pub std_cer: Option<f64>,
}

pub fn corpus_stats(sentences: &[SentencePair]) -> CorpusStats {
    let n_words = sentences.iter().map(|s| s.tokens.len() as u64).sum();
    let n_errors = sentences
        .iter()
        .flat_map(|s| &s.tokens)
        .filter(|t| t.label == 1)
        .count() as u64;
    let cers: Vec<f64> = sentences
        .iter()
        .filter_map(|s| cer(&s.record.ocr_stripped(), &s.record.gs_stripped()).ok())
        .collect();
    let (mean_cer, std_cer) = if cers.is_empty() {
        (None, None)
    } else {
        let n = cers.len() as f64;
        let mean = cers.iter().sum::<f64>() / n;
        let var = cers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    CorpusStats {
        n_sentences: sentences.len() as u64,
        n_words,
        n_errors,
        mean_cer,
        std_cer,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPairRecord {
    pub source_id: String,
    pub index: usize,
    pub ocr_token: String,
    pub gs_token: String,
    pub label: u8,
}

/// Line-delimited JSON export of all token pairs.
pub fn export_token_pairs(sentences: &[SentencePair]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (index, t) in s.tokens.iter().enumerate() {
            let rec = TokenPairRecord {
                source_id: s.record.source_id.clone(),
                index,
                ocr_token: t.ocr_token.clone(),
                gs_token: t.gs_token.clone(),
                label: t.label,
            };
            out.push_str(&serde_json::to_string(&rec).expect("token record serializes"));
            out.push('\n');
        }
    }
    out
}

/// Sentence-level distance on the stripped streams, used for CER.
pub fn sentence_distance(s: &SentencePair) -> usize {
    levenshtein(&s.record.ocr_stripped(), &s.record.gs_stripped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triplet(ocr: &str, gs: &str) -> String {
        format!(
            "{TAG_RAW} {}\n{TAG_OCR} {ocr}\n{TAG_GS} {gs}\n",
            ocr.replace(PADDING, "")
        )
    }

    #[test]
    fn parses_triplets() {
        let text = format!("{}\n{}", triplet("к@тка", "котка"), triplet("a b", "a c"));
        let recs = parse_aligned(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].ocr_raw, "ктка");
        assert_eq!(recs[0].ocr_aligned.chars().count(), 5);
        assert_eq!(recs[0].gs_aligned.chars().count(), 5);
        assert_eq!(recs[1].source_id, "2");
        assert_eq!(parse_aligned(&write_aligned(&recs)).unwrap(), recs);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_aligned("").unwrap().is_empty());
        assert!(parse_aligned("\n\n").unwrap().is_empty());
    }

    #[test]
    fn malformed_records_carry_line() {
        let text = triplet("котка", "котка@");
        assert_eq!(
            parse_aligned(&text),
            Err(malformed(1, "aligned stream lengths differ (5 vs 6)"))
        );
        let text = format!("{TAG_RAW} a\n{TAG_GS} a\n");
        assert!(matches!(
            parse_aligned(&text),
            Err(CorpusError::MalformedRecord { line: 2, .. })
        ));
        let text = format!("{TAG_RAW} a\n{TAG_OCR} a\n");
        assert!(matches!(
            parse_aligned(&text),
            Err(CorpusError::MalformedRecord { line: 3, .. })
        ));
    }

    #[test]
    fn aligns_tokens() {
        let r = AlignedRecord::from_aligned("s", "котка сnи", "котка спи").unwrap();
        let s = align_tokens(&r);
        let got: Vec<_> = s
            .tokens
            .iter()
            .map(|t| (t.ocr_token.as_str(), t.gs_token.as_str(), t.label))
            .collect();
        assert_eq!(got, vec![("котка", "котка", 0), ("сnи", "спи", 1)]);
        assert_eq!(s.tokens[1].char_span, 6..9);

        let r = AlignedRecord::from_aligned("s", "к@тка", "котка").unwrap();
        let s = align_tokens(&r);
        assert_eq!(s.tokens.len(), 1);
        assert_eq!(s.tokens[0].ocr_token, "ктка");
        assert_eq!(s.tokens[0].label, 1);
    }

    #[test]
    fn identical_streams_are_clean() {
        let r = AlignedRecord::from_aligned("s", "едно две три", "едно две три").unwrap();
        let s = align_tokens(&r);
        assert!(s.tokens.iter().all(|t| t.label == 0));
        assert_eq!(s.norm_lev, 0.0);
    }

    #[test]
    fn noise_filter_is_strict() {
        let clean = align_tokens(&AlignedRecord::from_aligned("a", "ab", "ab").unwrap());
        let half = align_tokens(&AlignedRecord::from_aligned("b", "ax", "ab").unwrap());
        assert_eq!(half.norm_lev, 0.5);
        let kept = filter_by_noise(vec![clean.clone(), half.clone()], 0.5);
        assert_eq!(kept, vec![clean]);
        assert_eq!(filter_by_noise(vec![half.clone()], 1.0).len(), 1);
    }

    #[test]
    fn stats_single_clean_sentence() {
        let s = align_tokens(&AlignedRecord::from_aligned("a", "ab cd", "ab cd").unwrap());
        let st = corpus_stats(&[s]);
        assert_eq!((st.n_sentences, st.n_words, st.n_errors), (1, 2, 0));
        assert_eq!(st.mean_cer, Some(0.0));
        assert_eq!(st.std_cer, Some(0.0));
        assert_eq!(corpus_stats(&[]).mean_cer, None);
    }

    #[test]
    fn export_is_line_delimited() {
        let s = align_tokens(&AlignedRecord::from_aligned("7", "ab c", "ab d").unwrap());
        let out = export_token_pairs(&[s]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: TokenPairRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec.index, 1);
        assert_eq!(rec.label, 1);
        assert_eq!(rec.source_id, "7");
    }

    fn aligned_pair() -> impl Strategy<Value = (String, String)> {
        let gs_char = proptest::sample::select(vec!['а', 'б', 'ѣ', ' ', '@']);
        let ocr_char = proptest::sample::select(vec!['а', 'б', 'в', ' ', '@', '#']);
        proptest::collection::vec((ocr_char, gs_char), 0..24).prop_map(|v| {
            let (o, g): (String, String) = v.into_iter().unzip();
            (o, g)
        })
    }

    proptest! {
        #[test]
        fn labels_match_token_comparison((ocr, gs) in aligned_pair()) {
            let r = AlignedRecord::from_aligned("p", ocr.clone(), gs).unwrap();
            let s = align_tokens(&r);
            let mut prev_end = 0;
            let ocr_chars: Vec<char> = ocr.chars().collect();
            let mut rebuilt = String::new();
            for t in &s.tokens {
                prop_assert_eq!(t.label == 1, t.ocr_token != t.gs_token);
                prop_assert!(t.char_span.start >= prev_end);
                prev_end = t.char_span.end;
                rebuilt.extend(&ocr_chars[t.char_span.clone()]);
            }
            // the slices cover every non-gold-whitespace position
            let gs_chars: Vec<char> = r.gs_aligned.chars().collect();
            let expect: String = ocr_chars.iter().zip(&gs_chars)
                .filter(|(_, g)| !g.is_whitespace())
                .map(|(o, _)| *o)
                .collect();
            prop_assert_eq!(rebuilt, expect);
            prop_assert_eq!(s.norm_lev, normalized_levenshtein(&r.ocr_stripped(), &r.gs_stripped()));
        }

        #[test]
        fn noise_filter_idempotent_and_monotone(
            pairs in proptest::collection::vec(aligned_pair(), 0..10),
            t1 in 0.05f64..1.0,
            t2 in 0.05f64..1.0,
        ) {
            let sents: Vec<SentencePair> = pairs.into_iter()
                .map(|(o, g)| align_tokens(&AlignedRecord::from_aligned("p", o, g).unwrap()))
                .collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let once = filter_by_noise(sents.clone(), lo);
            prop_assert_eq!(filter_by_noise(once.clone(), lo), once.clone());
            prop_assert!(once.len() <= filter_by_noise(sents, hi).len());
        }
    }
}
