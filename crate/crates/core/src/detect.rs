//! Token-level error detection.
//!
//! Two detectors share the same contract (token stream in, binary labels
//! out): an exact-match dictionary lookup and a hashed character n-gram
//! logistic classifier trained with SGD.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MODEL_MAGIC: &[u8; 8] = b"PONGRAM\0";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("training data contains a single class")]
    DegenerateData,
    #[error("token {0} has no subtoken group")]
    GapInGroups(usize),
    #[error("subtoken group for token {0} is empty")]
    EmptyGroup(usize),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid model blob: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Word list with frequencies. Lookups are case-folded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: HashMap<String, u64>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn normalize(word: &str) -> String {
        word.to_lowercase()
    }

    pub fn insert(&mut self, word: &str, frequency: u64) {
        *self.entries.entry(Self::normalize(word)).or_default() += frequency.max(1);
    }

    pub fn contains(&self, word: &str) -> bool {
        !word.is_empty() && self.entries.contains_key(&Self::normalize(word))
    }

    pub fn frequency(&self, word: &str) -> Option<u64> {
        self.entries.get(&Self::normalize(word)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(w, &f)| (w.as_str(), f))
    }

    /// Builds a lexicon counting each word once per occurrence.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut lex = Self::new();
        for w in words {
            if !w.is_empty() {
                lex.insert(w, 1);
            }
        }
        lex
    }

    /// Reads `word[<TAB>frequency[<TAB>...]]` lines; `#` starts a comment line.
    /// When three or more columns are present the last one is the frequency.
    pub fn from_tsv(text: &str) -> Result<Self, DetectError> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let freq = match fields.len() {
                1 => 1,
                _ => fields[fields.len() - 1].trim().parse().map_err(|_| DetectError::Parse {
                    line: i + 1,
                    reason: "bad frequency".into(),
                })?,
            };
            lex.insert(fields[0].trim(), freq);
        }
        Ok(lex)
    }
}

/// 0 if the token is in the lexicon, else 1.
pub fn dict_detect(token: &str, lexicon: &Lexicon) -> u8 {
    u8::from(!lexicon.contains(token))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramShape {
    pub min_n: usize,
    pub max_n: usize,
    pub hash_bits: u32,
    pub use_context: bool,
}

impl Default for NgramShape {
    fn default() -> Self {
        Self {
            min_n: 1,
            max_n: 5,
            hash_bits: 20,
            use_context: true,
        }
    }
}

impl NgramShape {
    pub fn dimension(&self) -> usize {
        1usize << self.hash_bits
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.min_n == 0 || self.min_n > self.max_n {
            return Err(DetectError::InvalidConfig(format!(
                "bad n-gram range ({}, {})",
                self.min_n, self.max_n
            )));
        }
        if !(1..=30).contains(&self.hash_bits) {
            return Err(DetectError::InvalidConfig(format!("hash bits {} out of range", self.hash_bits)));
        }
        Ok(())
    }
}

/// Character n-grams of `<token>` for `n` in `min_n..=max_n`.
pub fn char_ngrams(token: &str, min_n: usize, max_n: usize) -> BTreeSet<String> {
    let marked: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut grams = BTreeSet::new();
    for n in min_n..=max_n.min(marked.len()) {
        for w in marked.windows(n) {
            grams.insert(w.iter().collect());
        }
    }
    grams
}

fn fnv1a(namespace: u8, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in std::iter::once(namespace).chain(s.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sorted, deduplicated active bucket indices (binary features).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseFeatures(pub Vec<u32>);

pub fn featurize(token: &str, context: (Option<&str>, Option<&str>), shape: &NgramShape) -> SparseFeatures {
    let mask = (shape.dimension() - 1) as u64;
    let mut idx: Vec<u32> = char_ngrams(token, shape.min_n, shape.max_n)
        .iter()
        .map(|g| (fnv1a(b't', g) & mask) as u32)
        .collect();
    if shape.use_context {
        for (ns, ctx) in [(b'p', context.0), (b'n', context.1)] {
            // a missing neighbour is the sentence boundary
            let grams = match ctx {
                Some(c) => char_ngrams(c, shape.min_n, shape.max_n),
                None => BTreeSet::from(["<s>".to_string()]),
            };
            idx.extend(grams.iter().map(|g| (fnv1a(ns, g) & mask) as u32));
        }
    }
    idx.sort_unstable();
    idx.dedup();
    SparseFeatures(idx)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub shape: NgramShape,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            shape: NgramShape::default(),
            epochs: 10,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// One labeled token with its neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledToken {
    pub token: String,
    pub prev: Option<String>,
    pub next: Option<String>,
    pub label: u8,
}

impl LabeledToken {
    pub fn isolated(token: impl Into<String>, label: u8) -> Self {
        Self {
            token: token.into(),
            prev: None,
            next: None,
            label,
        }
    }

    fn context(&self) -> (Option<&str>, Option<&str>) {
        (self.prev.as_deref(), self.next.as_deref())
    }
}

/// Turns a token sequence into detector inputs with neighbours attached.
pub fn with_context<S: AsRef<str>>(tokens: &[S], labels: &[u8]) -> Vec<LabeledToken> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledToken {
            token: t.as_ref().to_string(),
            prev: i.checked_sub(1).map(|j| tokens[j].as_ref().to_string()),
            next: tokens.get(i + 1).map(|n| n.as_ref().to_string()),
            label: labels.get(i).copied().unwrap_or(0),
        })
        .collect()
}

/// Parses `__label__<0|1> <word>` lines.
pub fn parse_labeled_lines(text: &str) -> Result<Vec<LabeledToken>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| DetectError::Parse {
            line: i + 1,
            reason: reason.into(),
        };
        let (label, word) = line.split_once(' ').ok_or_else(|| err("expected `__label__<0|1> <word>`"))?;
        let label = match label {
            "__label__0" => 0,
            "__label__1" => 1,
            _ => return Err(err("unknown label")),
        };
        out.push(LabeledToken::isolated(word.trim(), label));
    }
    Ok(out)
}

pub fn format_labeled_lines(tokens: &[LabeledToken]) -> String {
    tokens
        .iter()
        .map(|t| format!("__label__{} {}\n", t.label, t.token))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramDetectorModel {
    pub shape: NgramShape,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NgramDetectorModel {
    pub fn new(shape: NgramShape) -> Self {
        Self {
            shape,
            weights: vec![0.0; shape.dimension()],
            bias: 0.0,
        }
    }

    fn score(&self, features: &SparseFeatures) -> f64 {
        self.bias + features.0.iter().map(|&i| self.weights[i as usize]).sum::<f64>()
    }

    /// Probability that the token is erroneous.
    pub fn probability(&self, token: &str, context: (Option<&str>, Option<&str>)) -> f64 {
        sigmoid(self.score(&featurize(token, context, &self.shape)))
    }

    fn log_loss(&self, data: &[(SparseFeatures, u8)]) -> f64 {
        data.iter()
            .map(|(f, y)| {
                let z = self.score(f);
                // log(1 + e^z) - y z, stable form
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                softplus - f64::from(*y) * z
            })
            .sum::<f64>()
            / data.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.weights.len() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(0); // little endian
        out.extend_from_slice(&(self.shape.min_n as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.max_n as u32).to_le_bytes());
        out.extend_from_slice(&self.shape.hash_bits.to_le_bytes());
        out.push(u8::from(self.shape.use_context));
        out.extend_from_slice(&self.bias.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectError> {
        let bad = |m: &str| DetectError::InvalidModel(m.into());
        let header = 8 + 4 + 1 + 12 + 1 + 8;
        if bytes.len() < header || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(8) != MODEL_VERSION {
            return Err(bad("unsupported version"));
        }
        if bytes[12] != 0 {
            return Err(bad("big-endian blobs are not supported"));
        }
        let shape = NgramShape {
            min_n: u32_at(13) as usize,
            max_n: u32_at(17) as usize,
            hash_bits: u32_at(21),
            use_context: bytes[25] != 0,
        };
        shape.validate()?;
        let bias = f64::from_le_bytes(bytes[26..34].try_into().unwrap());
        let body = &bytes[header..];
        if body.len() != shape.dimension() * 8 {
            return Err(bad("weight count does not match shape"));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, weights, bias })
    }
}

/// Result of training, with the mean log loss after every epoch.
#[derive(Debug, Clone)]
pub struct DetectorTraining {
    pub model: NgramDetectorModel,
    pub epoch_losses: Vec<f64>,
}

/// Logistic regression over hashed n-grams, plain SGD, shuffled each epoch.
pub fn train_ngram_detector(data: &[LabeledToken], config: &DetectorConfig) -> Result<DetectorTraining, DetectError> {
    config.shape.validate()?;
    let positives = data.iter().filter(|t| t.label == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(DetectError::DegenerateData);
    }
    let feats: Vec<(SparseFeatures, u8)> = data
        .iter()
        .map(|t| (featurize(&t.token, t.context(), &config.shape), t.label))
        .collect();
    let mut model = NgramDetectorModel::new(config.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (f, y) = &feats[i];
            let g = sigmoid(model.score(f)) - f64::from(*y);
            let step = config.learning_rate * g;
            for &j in &f.0 {
                model.weights[j as usize] -= step;
            }
            model.bias -= step;
        }
        epoch_losses.push(model.log_loss(&feats));
    }
    Ok(DetectorTraining { model, epoch_losses })
}

/// 1 iff `P(erroneous) >= threshold`.
pub fn ngram_detect(
    token: &str,
    context: (Option<&str>, Option<&str>),
    model: &NgramDetectorModel,
    threshold: f64,
) -> u8 {
    u8::from(model.probability(token, context) >= threshold)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtokenGroup {
    pub token_index: usize,
    pub subtoken_predictions: Vec<u8>,
}

/// A token is erroneous if any of its subtokens is predicted erroneous.
pub fn merge_subtoken_labels(groups: &[SubtokenGroup]) -> Result<Vec<u8>, DetectError> {
    let mut sorted: Vec<&SubtokenGroup> = groups.iter().collect();
    sorted.sort_by_key(|g| g.token_index);
    let mut out = Vec::with_capacity(sorted.len());
    for (expected, g) in sorted.into_iter().enumerate() {
        if g.token_index != expected {
            return Err(DetectError::GapInGroups(expected));
        }
        if g.subtoken_predictions.is_empty() {
            return Err(DetectError::EmptyGroup(g.token_index));
        }
        out.push(u8::from(g.subtoken_predictions.iter().any(|&p| p != 0)));
    }
    Ok(out)
}

/// Which detector labels tokens in the pipeline.
#[derive(Debug, Clone)]
pub enum Detector {
    Dictionary(Lexicon),
    Ngram { model: NgramDetectorModel, threshold: f64 },
    /// Flags exactly the given labels; useful for oracle-detector evaluation.
    Oracle,
}

impl Detector {
    /// Labels a token sequence; `gold_labels` is only consulted by `Oracle`.
    pub fn label<S: AsRef<str>>(&self, tokens: &[S], gold_labels: &[u8]) -> Vec<u8> {
        match self {
            Detector::Dictionary(lex) => tokens.iter().map(|t| dict_detect(t.as_ref(), lex)).collect(),
            Detector::Ngram { model, threshold } => (0..tokens.len())
                .map(|i| {
                    let prev = i.checked_sub(1).map(|j| tokens[j].as_ref());
                    let next = tokens.get(i + 1).map(AsRef::as_ref);
                    ngram_detect(tokens[i].as_ref(), (prev, next), model, *threshold)
                })
                .collect(),
            Detector::Oracle => gold_labels.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(words: &[&str]) -> Lexicon {
        Lexicon::from_words(words.iter().copied())
    }

    #[test]
    fn dictionary_lookup() {
        let l = lex(&["котка"]);
        assert_eq!(dict_detect("котка", &l), 0);
        assert_eq!(dict_detect("Котка", &l), 0);
        assert_eq!(dict_detect("коткa", &l), 1); // Latin a
        assert_eq!(dict_detect("", &l), 1);
    }

    #[test]
    fn lexicon_tsv() {
        let l = Lexicon::from_tsv("# c\nкотка\t5\nток\n пея\tV\t3\n").unwrap();
        assert_eq!(l.frequency("котка"), Some(5));
        assert_eq!(l.frequency("ток"), Some(1));
        assert_eq!(l.frequency("пея"), Some(3));
        assert!(Lexicon::from_tsv("a\tx\n").is_err());
    }

    #[test]
    fn ngram_enumeration() {
        let g: Vec<String> = char_ngrams("ab", 1, 2).into_iter().collect();
        let mut want = vec!["<", "a", "b", ">", "<a", "ab", "b>"];
        want.sort();
        assert_eq!(g, want);
        let e: Vec<String> = char_ngrams("", 1, 2).into_iter().collect();
        assert_eq!(e, vec!["<", "<>", ">"]);
        let shape = NgramShape::default();
        assert_eq!(
            featurize("котка", (Some("а"), None), &shape),
            featurize("котка", (Some("а"), None), &shape)
        );
        let no_ctx = NgramShape { use_context: false, ..shape };
        assert_eq!(featurize("x", (Some("a"), None), &no_ctx), featurize("x", (Some("b"), None), &no_ctx));
    }

    fn separable() -> Vec<LabeledToken> {
        let clean = ["котка", "куче", "хлѣбъ", "вода", "село", "градъ", "рѫка", "небе", "поле", "море"];
        let noisy = ["кoтка", "кyче", "xлѣбъ", "вoда", "ceло", "гpадъ", "pѫка", "нeбе", "пoле", "мope"];
        clean
            .iter()
            .map(|w| LabeledToken::isolated(*w, 0))
            .chain(noisy.iter().map(|w| LabeledToken::isolated(*w, 1)))
            .collect()
    }

    #[test]
    fn learns_separable_set() {
        let data = separable();
        let config = DetectorConfig {
            shape: NgramShape { hash_bits: 16, use_context: false, ..Default::default() },
            ..Default::default()
        };
        let trained = train_ngram_detector(&data, &config).unwrap();
        for t in &data {
            assert_eq!(ngram_detect(&t.token, (None, None), &trained.model, 0.5), t.label, "{}", t.token);
        }
        let p1 = trained.model.probability("кoтка", (None, None));
        assert_eq!(p1, trained.model.probability("кoтка", (None, None)));
        for t in &data {
            assert_eq!(ngram_detect(&t.token, (None, None), &trained.model, 1.0 + 1e-9), 0);
            assert_eq!(ngram_detect(&t.token, (None, None), &trained.model, 0.0), 1);
        }
        // fixed seed, single thread
        let again = train_ngram_detector(&data, &config).unwrap();
        assert_eq!(again.model, trained.model);
    }

    #[test]
    fn loss_decreases_each_epoch() {
        let config = DetectorConfig {
            shape: NgramShape { hash_bits: 16, use_context: false, ..Default::default() },
            epochs: 25,
            learning_rate: 0.01,
            seed: 4,
        };
        let losses = train_ngram_detector(&separable(), &config).unwrap().epoch_losses;
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = vec![LabeledToken::isolated("a", 0), LabeledToken::isolated("b", 0)];
        assert!(matches!(
            train_ngram_detector(&data, &DetectorConfig::default()),
            Err(DetectError::DegenerateData)
        ));
    }

    #[test]
    fn model_blob_round_trip() {
        let config = DetectorConfig {
            shape: NgramShape { hash_bits: 10, ..Default::default() },
            ..Default::default()
        };
        let m = train_ngram_detector(&separable(), &config).unwrap().model;
        let back = NgramDetectorModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(NgramDetectorModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn labeled_lines() {
        let parsed = parse_labeled_lines("__label__0 котка\n__label__1 кoтка\n").unwrap();
        assert_eq!(parsed[1], LabeledToken::isolated("кoтка", 1));
        assert_eq!(format_labeled_lines(&parsed), "__label__0 котка\n__label__1 кoтка\n");
        assert!(parse_labeled_lines("__label__2 x").is_err());
    }

    #[test]
    fn subtoken_merge() {
        let g = |i, p: &[u8]| SubtokenGroup { token_index: i, subtoken_predictions: p.to_vec() };
        assert_eq!(merge_subtoken_labels(&[g(0, &[0, 1, 0])]).unwrap(), vec![1]);
        assert_eq!(merge_subtoken_labels(&[g(0, &[0, 0])]).unwrap(), vec![0]);
        assert_eq!(
            merge_subtoken_labels(&[g(0, &[1]), g(1, &[0, 0]), g(2, &[0, 1, 1])]).unwrap(),
            vec![1, 0, 1]
        );
        assert!(matches!(merge_subtoken_labels(&[g(0, &[1]), g(2, &[0])]), Err(DetectError::GapInGroups(1))));
        assert!(matches!(merge_subtoken_labels(&[g(0, &[])]), Err(DetectError::EmptyGroup(0))));
    }

    #[test]
    fn merge_exhaustive_small() {
        for len in 1..=4 {
            for bits in 0u32..(1 << len) {
                let preds: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
                let merged = merge_subtoken_labels(&[SubtokenGroup { token_index: 0, subtoken_predictions: preds }]).unwrap();
                assert_eq!(merged[0] == 1, bits != 0);
            }
        }
    }

    proptest! {
        #[test]
        fn flag_sets_are_monotone_in_threshold(t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let config = DetectorConfig {
                shape: NgramShape { hash_bits: 12, ..Default::default() },
                epochs: 3,
                ..Default::default()
            };
            let model = train_ngram_detector(&separable(), &config).unwrap().model;
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            for t in separable() {
                let at_hi = ngram_detect(&t.token, (None, None), &model, hi);
                let at_lo = ngram_detect(&t.token, (None, None), &model, lo);
                prop_assert!(at_hi <= at_lo);
            }
        }

        #[test]
        fn dictionary_never_accepts_absent(word in "[а-я]{0,6}") {
            let l = lex(&["котка", "куче"]);
            if !l.contains(&word) {
                prop_assert_eq!(dict_detect(&word, &l), 1);
            }
        }
    }
}
