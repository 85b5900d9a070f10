//! Detect, then correct, then evaluate.
//!
//! Everything here works on in-memory corpora; file handling lives in the
//! command-line front end. Reports keep wall-clock timings in their own
//! field so that the rest serializes identically across runs with equal
//! inputs and seeds.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{corpus_stats, CorpusStats, SentencePair};
use crate::correct::{self, CorrectError, CorrectionPair, Corrector, CorrectorConfig, InferenceConfig, TrainReport};
use crate::detect::{self, DetectError, Detector, DetectorConfig, Lexicon};
use crate::metrics::{
    detection_scores, improvement_pct, segmentation_error_census, DetectionReport, ImprovementReport, MetricsError,
    SegmentationCensus,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorChoice {
    Dict,
    Ngram,
    /// Gold labels; isolates the corrector.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorChoice {
    Identity,
    Knn,
    Seq2seq,
}

/// File locations used by the command-line front end.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub exceptions: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub detector_model: Option<PathBuf>,
    pub corrector_model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub detector: DetectorChoice,
    pub corrector: CorrectorChoice,
    /// Decision threshold of the n-gram detector.
    pub threshold: f64,
    /// Share of the corpus used for training when no test corpus is given.
    pub train_fraction: f64,
    /// Drop sentences noisier than this before training.
    pub noise_threshold: Option<f64>,
    pub detect: DetectorConfig,
    pub correct: CorrectorConfig,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            detector: DetectorChoice::Ngram,
            corrector: CorrectorChoice::Seq2seq,
            threshold: 0.5,
            train_fraction: 0.9,
            noise_threshold: None,
            detect: DetectorConfig::default(),
            correct: CorrectorConfig::default(),
            seed: 0,
            threads: None,
        }
    }
}

impl PipelineConfig {
    /// Copies the global seed into every stochastic component.
    pub fn propagate_seed(&mut self) {
        self.detect.seed = self.seed;
        self.correct.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::Config("threshold must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PipelineError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.threads == Some(0) {
            return Err(PipelineError::Config("threads must be positive".into()));
        }
        self.correct.validate()?;
        self.detect.shape.validate()?;
        Ok(())
    }
}

/// Training diagnostics kept in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub detector_epoch_losses: Vec<f64>,
    pub corrector: Option<TrainReport>,
    pub corrector_train_pairs: usize,
    pub corrector_dev_pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_detector_s: f64,
    pub train_corrector_s: f64,
    pub evaluate_s: f64,
}

/// Everything measured in one run. `timings` is the only non-reproducible part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub train_stats: Option<CorpusStats>,
    pub test_stats: CorpusStats,
    pub detection: DetectionReport,
    pub improvement: ImprovementReport,
    pub census: SegmentationCensus,
    pub training: Option<TrainingSummary>,
    pub timings: Timings,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with timings zeroed, for byte comparison between runs.
    pub fn reproducible_json(&self) -> String {
        let mut copy = self.clone();
        copy.timings = Timings::default();
        copy.to_json()
    }

    /// Fixed-width summary for terminals.
    pub fn table(&self) -> String {
        let d = &self.detection;
        let i = &self.improvement;
        let fmt = |v: f64| if d.degenerate && v == 0.0 { "n/a".to_string() } else { format!("{v:.4}") };
        let mut s = String::new();
        s.push_str(&format!("{:<24}{:>12}\n", "sentences", self.test_stats.n_sentences));
        s.push_str(&format!("{:<24}{:>12}\n", "tokens", self.test_stats.n_words));
        s.push_str(&format!("{:<24}{:>12}\n", "erroneous tokens", self.test_stats.n_errors));
        s.push_str(&format!("{:<24}{:>12}\n", "precision", fmt(d.precision)));
        s.push_str(&format!("{:<24}{:>12}\n", "recall", fmt(d.recall)));
        s.push_str(&format!("{:<24}{:>12}\n", "f1", fmt(d.f1)));
        s.push_str(&format!("{:<24}{:>12.4}\n", "improvement", i.improvement_pct));
        s.push_str(&format!("{:<24}{:>12}\n", "lev ocr", i.lev_ocr_sum));
        s.push_str(&format!("{:<24}{:>12}\n", "lev corrected", i.lev_corrected_sum));
        s
    }
}

/// Per-sentence output of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedSentence {
    pub source_id: String,
    pub labels: Vec<u8>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub detection: DetectionReport,
    pub improvement: ImprovementReport,
    pub sentences: Vec<CorrectedSentence>,
}

/// OCR/gold token sequences joined by single spaces, so that a corrector that
/// echoes its input scores exactly zero.
pub fn joined_triple(sentence: &SentencePair, corrected: &[String]) -> (String, String, String) {
    let ocr = sentence.ocr_tokens().collect::<Vec<_>>().join(" ");
    let gold = sentence.gs_tokens().collect::<Vec<_>>().join(" ");
    (ocr, corrected.join(" "), gold)
}

/// Labels and corrects every sentence.
pub fn correct_corpus(corpus: &[SentencePair], detector: &Detector, corrector: &Corrector) -> Vec<CorrectedSentence> {
    corpus
        .par_iter()
        .map(|s| {
            let tokens: Vec<&str> = s.ocr_tokens().collect();
            let labels = detector.label(&tokens, &s.labels());
            let corrected = correct::pipeline_correct(&tokens, &labels, corrector);
            CorrectedSentence {
                source_id: s.record.source_id.clone(),
                labels,
                tokens: corrected,
            }
        })
        .collect()
}

/// Scores detector labels and corrections against the gold side. Sentences
/// with an empty gold side carry no characters and are skipped for the
/// improvement measure.
pub fn score(corpus: &[SentencePair], corrected: &[CorrectedSentence]) -> Result<(DetectionReport, ImprovementReport), PipelineError> {
    let mut predictions = Vec::new();
    let mut gold = Vec::new();
    let mut triples = Vec::new();
    for (s, c) in corpus.iter().zip(corrected) {
        predictions.extend_from_slice(&c.labels);
        gold.extend(s.labels());
        let t = joined_triple(s, &c.tokens);
        if !t.2.is_empty() {
            triples.push(t);
        }
    }
    let detection = detection_scores(&predictions, &gold)?;
    let improvement = if triples.is_empty() {
        ImprovementReport::from_sums(0, 0, 0)
    } else {
        improvement_pct(&triples)?
    };
    Ok((detection, improvement))
}

pub fn evaluate(corpus: &[SentencePair], detector: &Detector, corrector: &Corrector) -> Result<Evaluation, PipelineError> {
    let sentences = correct_corpus(corpus, detector, corrector);
    let (detection, improvement) = score(corpus, &sentences)?;
    Ok(Evaluation {
        detection,
        improvement,
        sentences,
    })
}

/// Labeled tokens for detector training.
pub fn detector_examples(corpus: &[SentencePair]) -> Vec<detect::LabeledToken> {
    corpus
        .iter()
        .flat_map(|s| {
            let tokens: Vec<&str> = s.ocr_tokens().collect();
            detect::with_context(&tokens, &s.labels())
        })
        .collect()
}

/// `(ocr, gold)` pairs of the erroneous tokens, with neighbours.
pub fn correction_pairs(corpus: &[SentencePair]) -> Vec<CorrectionPair> {
    let mut out = Vec::new();
    for s in corpus {
        let tokens: Vec<&str> = s.ocr_tokens().collect();
        for (i, t) in s.tokens.iter().enumerate() {
            if t.label != 1 || t.ocr_token.is_empty() {
                continue;
            }
            out.push(CorrectionPair {
                source: t.ocr_token.clone(),
                target: t.gs_token.clone(),
                prev: i.checked_sub(1).map(|j| tokens[j].to_string()),
                next: tokens.get(i + 1).map(|n| n.to_string()),
            });
        }
    }
    out
}

/// Trained components plus their diagnostics.
pub struct Trained {
    pub detector: Detector,
    pub corrector: Corrector,
    pub summary: TrainingSummary,
    pub timings: Timings,
}

/// Fits the configured detector and corrector on `train`. The lexicon backs
/// the dictionary detector and the nearest-neighbour corrector.
pub fn train_components(
    train: &[SentencePair],
    config: &PipelineConfig,
    lexicon: Option<&Lexicon>,
) -> Result<Trained, PipelineError> {
    let need_lexicon = |what: &str| PipelineError::Config(format!("{what} needs a lexicon"));
    let mut timings = Timings::default();
    let mut summary = TrainingSummary {
        detector_epoch_losses: Vec::new(),
        corrector: None,
        corrector_train_pairs: 0,
        corrector_dev_pairs: 0,
    };

    let clock = Instant::now();
    let detector = match config.detector {
        DetectorChoice::Dict => Detector::Dictionary(lexicon.ok_or_else(|| need_lexicon("dict detector"))?.clone()),
        DetectorChoice::Oracle => Detector::Oracle,
        DetectorChoice::Ngram => {
            let trained = detect::train_ngram_detector(&detector_examples(train), &config.detect)?;
            summary.detector_epoch_losses = trained.epoch_losses;
            Detector::Ngram {
                model: trained.model,
                threshold: config.threshold,
            }
        }
    };
    timings.train_detector_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let corrector = match config.corrector {
        CorrectorChoice::Identity => Corrector::Identity,
        CorrectorChoice::Knn => Corrector::Knn(lexicon.ok_or_else(|| need_lexicon("knn corrector"))?.clone()),
        CorrectorChoice::Seq2seq => {
            let pairs = correction_pairs(train);
            let (tr, dev) = correct::split_train_dev(&pairs, config.train_fraction, config.correct.seed);
            summary.corrector_train_pairs = tr.len();
            summary.corrector_dev_pairs = dev.len();
            let (params, report) = correct::train(&tr, &dev, &config.correct)?;
            summary.corrector = Some(report);
            Corrector::Seq2Seq {
                params: Box::new(params),
                inference: InferenceConfig::from(&config.correct),
            }
        }
    };
    timings.train_corrector_s = clock.elapsed().as_secs_f64();
    Ok(Trained {
        detector,
        corrector,
        summary,
        timings,
    })
}

/// Trains on `train`, evaluates on `test`, and reports.
pub fn run(
    train: &[SentencePair],
    test: &[SentencePair],
    config: &PipelineConfig,
    lexicon: Option<&Lexicon>,
) -> Result<RunReport, PipelineError> {
    run_keeping_components(train, test, config, lexicon).map(|(report, _)| report)
}

/// Like [`run`], also handing back the trained components.
pub fn run_keeping_components(
    train: &[SentencePair],
    test: &[SentencePair],
    config: &PipelineConfig,
    lexicon: Option<&Lexicon>,
) -> Result<(RunReport, Trained), PipelineError> {
    config.validate()?;
    let work = || -> Result<(RunReport, Trained), PipelineError> {
        let trained = train_components(train, config, lexicon)?;
        let mut report = evaluate_with(test, &trained.detector, &trained.corrector, config)?;
        report.train_stats = Some(corpus_stats(train));
        report.training = Some(trained.summary.clone());
        report.timings.train_detector_s = trained.timings.train_detector_s;
        report.timings.train_corrector_s = trained.timings.train_corrector_s;
        Ok((report, trained))
    };
    in_pool(config.threads, work)
}

/// Evaluates ready components on `test`.
pub fn evaluate_with(
    test: &[SentencePair],
    detector: &Detector,
    corrector: &Corrector,
    config: &PipelineConfig,
) -> Result<RunReport, PipelineError> {
    let clock = Instant::now();
    let eval = in_pool(config.threads, || evaluate(test, detector, corrector))?;
    Ok(RunReport {
        config: config.clone(),
        train_stats: None,
        test_stats: corpus_stats(test),
        detection: eval.detection,
        improvement: eval.improvement,
        census: segmentation_error_census(test),
        training: None,
        timings: Timings {
            evaluate_s: clock.elapsed().as_secs_f64(),
            ..Timings::default()
        },
    })
}

/// Runs `f` on a dedicated pool when a thread count is given.
pub fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}
