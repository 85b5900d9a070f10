//! Edit distances, character error rate, detection scores, the weighted
//! improvement metric and the OCR error-type classifier.
//!
//! All string measures operate on Unicode scalar values with no
//! normalization-form folding, so historical glyphs such as `ѣ` and `ѫ`
//! count as one unit each.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SentencePair, PADDING, UNCERTAIN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("reference text is empty")]
    EmptyReference,
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("tokens are identical, not an error")]
    NotAnError,
    #[error("unsupported mismatch site: {ocr} OCR tokens vs {gold} gold tokens")]
    UnsupportedSite { ocr: usize, gold: usize },
}

/// Unit-cost Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

/// Levenshtein distance over pre-split character slices.
pub fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    // keep the row over the shorter string
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, &lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &sc) in short.iter().enumerate() {
            let up = row[j + 1];
            let sub = diag + usize::from(lc != sc);
            row[j + 1] = sub.min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[short.len()]
}

/// `levenshtein(a, b) / max(|a|, |b|)`, with 0 when both are empty.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let denom = la.max(lb);
    if denom == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / denom as f64
}

/// Character error rate in percent.
pub fn cer(ocr: &str, gs: &str) -> Result<f64, MetricsError> {
    let n = gs.chars().count();
    if n == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(levenshtein(ocr, gs) as f64 / n as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub lev_ocr_sum: u64,
    pub lev_corrected_sum: u64,
    pub gs_len_sum: u64,
    /// Fraction of the gold length; positive means the corrector helped.
    pub improvement_pct: f64,
}

impl ImprovementReport {
    pub fn from_sums(lev_ocr_sum: u64, lev_corrected_sum: u64, gs_len_sum: u64) -> Self {
        let improvement_pct = if gs_len_sum == 0 {
            0.0
        } else {
            (lev_ocr_sum as f64 - lev_corrected_sum as f64) / gs_len_sum as f64
        };
        Self {
            lev_ocr_sum,
            lev_corrected_sum,
            gs_len_sum,
            improvement_pct,
        }
    }

    /// Combines two partial reports by summing their counts.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_sums(
            self.lev_ocr_sum + other.lev_ocr_sum,
            self.lev_corrected_sum + other.lev_corrected_sum,
            self.gs_len_sum + other.gs_len_sum,
        )
    }
}

/// Corpus-level (micro-aggregated) improvement over `(ocr, corrected, gs)` triples.
pub fn improvement_pct<S: AsRef<str>>(
    triples: &[(S, S, S)],
) -> Result<ImprovementReport, MetricsError> {
    let (mut lo, mut lc, mut n) = (0u64, 0u64, 0u64);
    for (ocr, corrected, gs) in triples {
        let gs = gs.as_ref();
        let len = gs.chars().count() as u64;
        if len == 0 {
            return Err(MetricsError::EmptyReference);
        }
        lo += levenshtein(ocr.as_ref(), gs) as u64;
        lc += levenshtein(corrected.as_ref(), gs) as u64;
        n += len;
    }
    Ok(ImprovementReport::from_sums(lo, lc, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl DetectionReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            degenerate,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Precision/recall/F1 with label 1 (erroneous) as the positive class.
pub fn detection_scores(predictions: &[u8], labels: &[u8]) -> Result<DetectionReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(DetectionReport::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    MisrecognizedCharacter,
    MissingCharacter,
    Hallucination,
    RunOn,
    IncorrectSplit,
}

/// Classifies one mismatch site: 1-to-1, 1-to-2 (run-on) or 2-to-1 (split).
pub fn classify_error_type<S: AsRef<str>>(
    ocr_tokens: &[S],
    gs_tokens: &[S],
) -> Result<ErrorType, MetricsError> {
    match (ocr_tokens.len(), gs_tokens.len()) {
        (1, 2) => Ok(ErrorType::RunOn),
        (2, 1) => Ok(ErrorType::IncorrectSplit),
        (1, 1) => {
            let ocr = ocr_tokens[0].as_ref();
            let gs = gs_tokens[0].as_ref();
            if ocr == gs {
                return Err(MetricsError::NotAnError);
            }
            let lo = ocr.chars().count();
            let lg = gs.chars().count();
            let dist = levenshtein(ocr, gs);
            // a pure-deletion (or pure-insertion) alignment exists iff the
            // distance equals the length difference
            if lo < lg && dist == lg - lo {
                Ok(ErrorType::MissingCharacter)
            } else if lo > lg && dist == lo - lg {
                Ok(ErrorType::Hallucination)
            } else {
                Ok(ErrorType::MisrecognizedCharacter)
            }
        }
        (ocr, gold) => Err(MetricsError::UnsupportedSite { ocr, gold }),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationCensus {
    /// Erroneous tokens (label 1).
    pub total: u64,
    pub word_segmentation: u64,
    pub run_on: u64,
    pub incorrect_split: u64,
    pub misrecognized_character: u64,
    pub missing_character: u64,
    pub hallucination: u64,
}

/// Counts word-segmentation errors and classifies the remaining token errors.
///
/// A run-on is a gold inter-token gap whose aligned OCR position is not
/// whitespace (the OCR glued two words). An incorrect split is an erroneous
/// token whose OCR slice contains whitespace.
pub fn segmentation_error_census(corpus: &[SentencePair]) -> SegmentationCensus {
    let mut census = SegmentationCensus::default();
    for sentence in corpus {
        let ocr: Vec<char> = sentence.record.ocr_aligned.chars().collect();
        for pair in sentence.tokens.windows(2) {
            let gap = pair[0].char_span.end..pair[1].char_span.start;
            if ocr[gap].iter().any(|c| !c.is_whitespace()) {
                census.run_on += 1;
            }
        }
        for token in sentence.tokens.iter().filter(|t| t.label == 1) {
            census.total += 1;
            let split = ocr[token.char_span.clone()]
                .iter()
                .filter(|&&c| c != PADDING && c != UNCERTAIN)
                .collect::<String>();
            let pieces: Vec<&str> = split.split_whitespace().collect();
            if pieces.len() >= 2 {
                census.incorrect_split += 1;
                continue;
            }
            let kind = classify_error_type(&[token.ocr_token.as_str()], &[token.gs_token.as_str()]);
            match kind {
                Ok(ErrorType::MissingCharacter) => census.missing_character += 1,
                Ok(ErrorType::Hallucination) => census.hallucination += 1,
                _ => census.misrecognized_character += 1,
            }
        }
    }
    census.word_segmentation = census.run_on + census.incorrect_split;
    census
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight recursive definition, exponential; only for short strings.
    fn lev_oracle(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ca, ra)), Some((cb, rb))) => {
                if ca == cb {
                    lev_oracle(ra, rb)
                } else {
                    1 + lev_oracle(ra, b).min(lev_oracle(a, rb)).min(lev_oracle(ra, rb))
                }
            }
        }
    }

    #[test]
    fn levenshtein_examples() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(lev_oracle(&k, &s), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("пѣѫ", "пѣѫ"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("ѣ", "е"), 1);
    }

    #[test]
    fn normalized_examples() {
        assert_eq!(normalized_levenshtein("abc", "abc"), 0.0);
        assert_eq!(normalized_levenshtein("ab", ""), 1.0);
        assert_eq!(normalized_levenshtein("", ""), 0.0);
        assert_eq!(normalized_levenshtein("kitten", "sitting"), 3.0 / 7.0);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abcd", "abcd").unwrap(), 0.0);
        assert_eq!(cer("abce", "abcd").unwrap(), 25.0);
        assert_eq!(cer("", "ab").unwrap(), 100.0);
        assert_eq!(cer("a", ""), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn improvement_examples() {
        let r = improvement_pct(&[("abxdefghiy", "abcdefghij", "abcdefghij")]).unwrap();
        assert_eq!(r.lev_ocr_sum, 2);
        assert_eq!(r.improvement_pct, 0.2);
        let r = improvement_pct(&[("ab", "ab", "ac"), ("x", "x", "y")]).unwrap();
        assert_eq!(r.improvement_pct, 0.0);
        assert_eq!(
            improvement_pct(&[("a", "a", "")]),
            Err(MetricsError::EmptyReference)
        );
    }

    #[test]
    fn detection_examples() {
        let r = detection_scores(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = detection_scores(&[0, 0], &[1, 0]).unwrap();
        assert_eq!(r.recall, 0.0);
        assert!(r.degenerate);
        let r = detection_scores(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 1, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert!(!r.degenerate);
        assert!(matches!(
            detection_scores(&[1], &[]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn error_types_from_table() {
        assert_eq!(classify_error_type(&["heran"], &["he", "ran"]), Ok(ErrorType::RunOn));
        assert_eq!(
            classify_error_type(&["loco", "motive"], &["locomotive"]),
            Ok(ErrorType::IncorrectSplit)
        );
        assert_eq!(classify_error_type(&["moro"], &["more"]), Ok(ErrorType::MisrecognizedCharacter));
        assert_eq!(classify_error_type(&["here"], &["there"]), Ok(ErrorType::MissingCharacter));
        assert_eq!(classify_error_type(&["wherever"], &["where"]), Ok(ErrorType::Hallucination));
        assert_eq!(classify_error_type(&["same"], &["same"]), Err(MetricsError::NotAnError));
        // mixed insert + delete falls back to a misrecognition
        assert_eq!(classify_error_type(&["bca"], &["ab"]), Ok(ErrorType::MisrecognizedCharacter));
    }

    fn short(alphabet: &'static str) -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(alphabet.chars().collect::<Vec<_>>()), 0..7)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn levenshtein_matches_oracle(a in short("abѣ"), b in short("abѣ")) {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            prop_assert_eq!(levenshtein(&a, &b), lev_oracle(&ac, &bc));
        }

        #[test]
        fn levenshtein_is_a_metric(a in short("xyz"), b in short("xyz"), c in short("xyz")) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn detection_counts_partition(pairs in proptest::collection::vec((0u8..2, 0u8..2), 0..50)) {
            let (p, l): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let r = detection_scores(&p, &l).unwrap();
            prop_assert_eq!(r.total() as usize, p.len());
            prop_assert!((0.0..=1.0).contains(&r.f1));
        }

        #[test]
        fn perfect_corrector_recovers_weighted_cer(
            pairs in proptest::collection::vec((short("abc"), short("abc")), 1..8)
        ) {
            let triples: Vec<(String, String, String)> = pairs
                .into_iter()
                .map(|(o, g)| (o, g.clone() + "q", g + "q"))
                .collect();
            let r = improvement_pct(&triples).unwrap();
            let weighted: f64 = triples.iter()
                .map(|(o, _, g)| cer(o, g).unwrap() * g.chars().count() as f64)
                .sum::<f64>() / r.gs_len_sum as f64;
            prop_assert!((r.improvement_pct - weighted / 100.0).abs() < 1e-12);
            let identity: Vec<_> = triples.iter().map(|(o, _, g)| (o.clone(), o.clone(), g.clone())).collect();
            prop_assert_eq!(improvement_pct(&identity).unwrap().improvement_pct, 0.0);
        }
    }
}
