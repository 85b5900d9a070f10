use std::collections::HashMap;
use std::fs;
use std::path::Path;

use postocr_core::confusion::{build_confusion, ConfusionMatrix, ConfusionOptions};
use postocr_core::corpus::{corpus_stats, export_token_pairs, write_aligned, AlignedRecord, SentencePair};
use postocr_core::correct::{self, CorrectError, Corrector, CorrectorConfig, InferenceConfig, Seq2SeqParams, Vocab};
use postocr_core::detect::{self, Detector, NgramDetectorModel};
use postocr_core::metrics::segmentation_error_census;
use postocr_core::pipeline::{
    self, CorrectedSentence, CorrectorChoice, DetectorChoice, PipelineConfig, PipelineError, RunReport, Timings,
};
use postocr_core::synthgen::{self, parse_annotated_line, parse_word_list, NoiseOptions, OrthographyProfile};

use crate::error::{usage, CliResult, Classify, Failure, Kind};
use crate::io::{self, CorrectionRecord, DetectionRecord};
use crate::{optional, required, Command, CorrectorArgs, DetectorArgs, SynthArgs};

pub fn dispatch(command: Command, config: PipelineConfig) -> CliResult<()> {
    let paths = config.paths.clone();
    match command {
        Command::Align(a) => {
            let corpus = io::read_corpus(&required(&a.input, &paths.corpus, "input")?)?;
            io::emit(a.output.as_deref(), &export_token_pairs(&corpus))
        }
        Command::Stats(a) => {
            let corpus = io::read_corpus(&required(&a.input, &paths.corpus, "input")?)?;
            let json = serde_json::to_string_pretty(&corpus_stats(&corpus)).expect("stats serialize");
            io::emit(a.output.as_deref(), &(json + "\n"))
        }
        Command::Confusion { io: a, substitutions_only } => {
            let corpus = io::read_corpus(&required(&a.input, &paths.corpus, "input")?)?;
            let records: Vec<AlignedRecord> = corpus.into_iter().map(|s| s.record).collect();
            let matrix = build_confusion(&records, ConfusionOptions { substitutions_only });
            io::emit(optional(&a.output, &paths.matrix), &matrix.to_tsv())
        }
        Command::Synth(a) => synth(a, &config),
        Command::TrainDetect { corpus, labeled, output } => {
            let examples = match (&labeled, &corpus) {
                (Some(path), _) => detect::parse_labeled_lines(&io::read_text(path)?)
                    .or_data(format!("malformed labeled tokens {}", path.display()))?,
                (None, _) => pipeline::detector_examples(&io::read_corpus(&required(&corpus, &paths.corpus, "corpus")?)?),
            };
            let out = required(&output, &paths.detector_model, "output")?;
            let trained = detect::train_ngram_detector(&examples, &config.detect).or_data("detector training failed")?;
            io::write_bytes(&out, &trained.model.to_bytes())?;
            let losses = serde_json::to_string(&trained.epoch_losses).expect("losses serialize");
            io::emit(None, &format!("{{\"epoch_losses\":{losses}}}\n"))
        }
        Command::Detect { io: a, detector } => {
            let corpus = io::read_corpus(&required(&a.input, &paths.corpus, "input")?)?;
            let det = build_detector(&detector, &config)?;
            io::emit(a.output.as_deref(), &io::to_jsonl(&detection_records(&corpus, &det)))
        }
        Command::TrainCorrect {
            corpus,
            output,
            vocab,
            variant,
            epochs,
        } => {
            let corpus = io::read_corpus(&required(&corpus, &paths.corpus, "corpus")?)?;
            let ckpt = required(&output, &paths.corrector_model, "output")?;
            let vocab_path = required(&vocab, &paths.vocab, "vocab")?;
            let mut cc = config.correct.clone();
            if let Some(v) = variant {
                cc = cc.with_variant(v.into());
            }
            if let Some(e) = epochs {
                cc.epochs = e;
            }
            let (params, report) = train_corrector(&corpus, &cc, config.train_fraction)?;
            io::write_bytes(&ckpt, &params.to_checkpoint())?;
            io::emit(Some(&vocab_path), &params.vocab.to_manifest())?;
            io::emit(None, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))
        }
        Command::Correct {
            io: a,
            detector,
            corrector,
            candidates,
        } => {
            let corpus = io::read_corpus(&required(&a.input, &paths.corpus, "input")?)?;
            let det = build_detector(&detector, &config)?;
            let cor = build_corrector(&corrector, &detector, &config)?;
            let records = correction_records(&corpus, &det, &cor, candidates);
            io::emit(optional(&a.output, &paths.output), &io::to_jsonl(&records))
        }
        Command::Evaluate { io: a, corrections } => {
            let corpus = io::read_corpus(&required(&a.input, &paths.test_corpus, "input")?)?;
            let records: Vec<CorrectionRecord> = io::from_jsonl(&io::read_text(&corrections)?, &corrections)?;
            let sentences = regroup(&corpus, records)?;
            let (detection, improvement) = pipeline::score(&corpus, &sentences).map_err(pipeline_failure)?;
            let report = RunReport {
                config: config.clone(),
                train_stats: None,
                test_stats: corpus_stats(&corpus),
                detection,
                improvement,
                census: segmentation_error_census(&corpus),
                training: None,
                timings: Timings::default(),
            };
            write_report(&report, a.output.as_deref())
        }
        Command::Pipeline {
            corpus,
            test_corpus,
            detector,
            corrector,
            lexicon,
            output,
        } => {
            let mut config = config;
            if let Some(d) = detector {
                config.detector = d.into();
            }
            if let Some(c) = corrector {
                config.corrector = c.into();
            }
            let corpus = io::read_corpus(&required(&corpus, &paths.corpus, "corpus")?)?;
            let (train, test) = match optional(&test_corpus, &paths.test_corpus) {
                Some(p) => (corpus, io::read_corpus(p)?),
                None => correct::split_train_dev(&corpus, config.train_fraction, config.seed),
            };
            let lexicon = optional(&lexicon, &paths.lexicon).map(io::read_lexicon).transpose()?;
            let report = pipeline::run(&train, &test, &config, lexicon.as_ref()).map_err(pipeline_failure)?;
            write_report(&report, optional(&output, &paths.output))
        }
    }
}

/// JSON to the report file with the table on standard output, or JSON on
/// standard output with the table on standard error.
fn write_report(report: &RunReport, output: Option<&Path>) -> CliResult<()> {
    let json = report.to_json() + "\n";
    match output {
        Some(p) => {
            io::emit(Some(p), &json)?;
            io::emit(None, &report.table())
        }
        None => {
            eprint!("{}", report.table());
            io::emit(None, &json)
        }
    }
}

fn synth(a: SynthArgs, config: &PipelineConfig) -> CliResult<()> {
    let paths = &config.paths;
    let matrix_path = required(&a.matrix, &paths.matrix, "matrix")?;
    let matrix = ConfusionMatrix::from_tsv(&io::read_text(&matrix_path)?)
        .or_data(format!("malformed confusion matrix {}", matrix_path.display()))?;
    let name = a.orthography.into();
    let profile = match (optional(&a.rules, &paths.rules), optional(&a.exceptions, &paths.exceptions)) {
        (Some(r), Some(e)) => OrthographyProfile::load(name, &io::read_text(r)?, &io::read_text(e)?)
            .or_data("invalid orthography profile")?,
        (None, None) => OrthographyProfile::builtin(name),
        _ => return Err(usage("--rules and --exceptions go together")),
    };
    let sentences = match (&a.words, &a.annotated) {
        (Some(w), _) => {
            let words = parse_word_list(&io::read_text(w)?).or_data(format!("malformed word list {}", w.display()))?;
            synthgen::sample_sentences(&words, a.sentences, a.min_len, a.max_len, config.seed)
        }
        (None, Some(p)) => io::read_text(p)?
            .lines()
            .map(parse_annotated_line)
            .filter(|s| !s.is_empty())
            .collect(),
        (None, None) => return Err(usage("synth needs --words or --annotated")),
    };
    let options = NoiseOptions {
        whitespace_noise: a.whitespace_noise,
    };
    let pairs = synthgen::generate_pairs(&sentences, &profile, &matrix, config.seed.wrapping_add(1), options)
        .or_data("corruption failed")?;
    let records: Vec<AlignedRecord> = pairs.into_iter().map(|s| s.record).collect();
    io::emit(a.output.as_deref(), &write_aligned(&records))
}

fn build_detector(args: &DetectorArgs, config: &PipelineConfig) -> CliResult<Detector> {
    let choice = args.detector.map_or(config.detector, Into::into);
    Ok(match choice {
        DetectorChoice::Oracle => Detector::Oracle,
        DetectorChoice::Dict => {
            let path = required(&args.lexicon, &config.paths.lexicon, "lexicon")?;
            Detector::Dictionary(io::read_lexicon(&path)?)
        }
        DetectorChoice::Ngram => {
            let path = required(&args.detector_model, &config.paths.detector_model, "detector-model")?;
            let bytes = fs::read(&path).or_model(format!("cannot read detector model {}", path.display()))?;
            let model = NgramDetectorModel::from_bytes(&bytes).or_model(format!("incompatible detector model {}", path.display()))?;
            Detector::Ngram {
                model,
                threshold: config.threshold,
            }
        }
    })
}

fn build_corrector(args: &CorrectorArgs, det: &DetectorArgs, config: &PipelineConfig) -> CliResult<Corrector> {
    let choice = args.corrector.map_or(config.corrector, Into::into);
    Ok(match choice {
        CorrectorChoice::Identity => Corrector::Identity,
        CorrectorChoice::Knn => {
            let path = required(&det.lexicon, &config.paths.lexicon, "lexicon")?;
            Corrector::Knn(io::read_lexicon(&path)?)
        }
        CorrectorChoice::Seq2seq => {
            let ckpt = required(&args.checkpoint, &config.paths.corrector_model, "checkpoint")?;
            let vocab_path = required(&args.vocab, &config.paths.vocab, "vocab")?;
            let manifest = fs::read_to_string(&vocab_path).or_model(format!("cannot read vocabulary {}", vocab_path.display()))?;
            let vocab = Vocab::from_manifest(&manifest).or_model(format!("invalid vocabulary {}", vocab_path.display()))?;
            let bytes = fs::read(&ckpt).or_model(format!("cannot read checkpoint {}", ckpt.display()))?;
            let params =
                Seq2SeqParams::from_checkpoint(&bytes, vocab).or_model(format!("incompatible checkpoint {}", ckpt.display()))?;
            Corrector::Seq2Seq {
                params: Box::new(params),
                inference: InferenceConfig::from(&config.correct),
            }
        }
    })
}

/// Same pair extraction and split as the pipeline's training stage.
fn train_corrector(
    corpus: &[SentencePair],
    config: &CorrectorConfig,
    train_fraction: f64,
) -> CliResult<(Seq2SeqParams, correct::TrainReport)> {
    let pairs = pipeline::correction_pairs(corpus);
    let (train, dev) = correct::split_train_dev(&pairs, train_fraction, config.seed);
    correct::train(&train, &dev, config).map_err(correct_failure)
}

fn detection_records(corpus: &[SentencePair], det: &Detector) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for s in corpus {
        let tokens: Vec<&str> = s.ocr_tokens().collect();
        let labels = det.label(&tokens, &s.labels());
        for (i, (&token, label)) in tokens.iter().zip(labels).enumerate() {
            let probability = match det {
                Detector::Ngram { model, .. } => {
                    let prev = i.checked_sub(1).map(|j| tokens[j]);
                    Some(model.probability(token, (prev, tokens.get(i + 1).copied())))
                }
                _ => None,
            };
            out.push(DetectionRecord {
                source_id: s.record.source_id.clone(),
                token_index: i,
                token: token.to_string(),
                label,
                probability,
            });
        }
    }
    out
}

fn correction_records(corpus: &[SentencePair], det: &Detector, cor: &Corrector, k: usize) -> Vec<CorrectionRecord> {
    let mut out = Vec::new();
    for s in corpus {
        let tokens: Vec<&str> = s.ocr_tokens().collect();
        let labels = det.label(&tokens, &s.labels());
        for (i, &token) in tokens.iter().enumerate() {
            let flagged = labels[i] == 1;
            let mut record = CorrectionRecord {
                source_id: s.record.source_id.clone(),
                token_index: i,
                original: token.to_string(),
                corrected: token.to_string(),
                flagged,
                candidates: Vec::new(),
                log_prob: None,
            };
            if flagged {
                let prev = i.checked_sub(1).map(|j| tokens[j]);
                let next = tokens.get(i + 1).copied();
                let ranked = cor.candidates(token, prev, next, k.max(1));
                if let Some(best) = ranked.first() {
                    record.corrected = best.text.clone();
                    if matches!(cor, Corrector::Seq2Seq { .. }) {
                        record.log_prob = Some(best.log_prob);
                    }
                }
                if k > 0 {
                    record.candidates = ranked;
                }
            }
            out.push(record);
        }
    }
    out
}

/// Rebuilds per-sentence corrections in corpus order, checking that every
/// record lines up with the corpus tokens.
fn regroup(corpus: &[SentencePair], records: Vec<CorrectionRecord>) -> CliResult<Vec<CorrectedSentence>> {
    let mut by_source: HashMap<String, Vec<CorrectionRecord>> = HashMap::new();
    for r in records {
        by_source.entry(r.source_id.clone()).or_default().push(r);
    }
    let mismatch = |id: &str, why: &str| Failure {
        kind: Kind::Data,
        error: anyhow::anyhow!("corrections for sentence {id} {why}"),
    };
    corpus
        .iter()
        .map(|s| {
            let id = &s.record.source_id;
            let mut recs = by_source.remove(id).ok_or_else(|| mismatch(id, "are missing"))?;
            recs.sort_by_key(|r| r.token_index);
            let ocr: Vec<&str> = s.ocr_tokens().collect();
            let aligned = recs.len() == ocr.len()
                && recs
                    .iter()
                    .enumerate()
                    .all(|(i, r)| r.token_index == i && r.original == ocr[i]);
            if !aligned {
                return Err(mismatch(id, "do not match its tokens"));
            }
            Ok(CorrectedSentence {
                source_id: id.clone(),
                labels: recs.iter().map(|r| u8::from(r.flagged)).collect(),
                tokens: recs.into_iter().map(|r| r.corrected).collect(),
            })
        })
        .collect()
}

fn correct_failure(e: CorrectError) -> Failure {
    let kind = match e {
        CorrectError::InvalidConfig(_) => Kind::Usage,
        CorrectError::Checkpoint(_) | CorrectError::Manifest { .. } => Kind::Model,
        _ => Kind::Data,
    };
    Failure {
        kind,
        error: e.into(),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure {
            kind: Kind::Usage,
            error: e.into(),
        },
        PipelineError::Correct(c) => correct_failure(c),
        other => Failure {
            kind: Kind::Data,
            error: other.into(),
        },
    }
}
