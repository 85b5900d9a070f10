//! `postocr`: command-line front end for the post-OCR correction toolkit.
//!
//! Settings come from three layers, later ones winning: built-in defaults,
//! the TOML config file (`--config` or `POSTOCR_CONFIG`), and command-line
//! flags.

mod commands;
mod error;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use postocr_core::correct::Variant;
use postocr_core::pipeline::{self, CorrectorChoice, DetectorChoice, PipelineConfig};
use postocr_core::synthgen::OrthographyName;

use crate::error::{usage, CliResult, Classify, Kind};

#[derive(Debug, Parser)]
#[command(name = "postocr", version, about = "Post-OCR error detection and correction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "POSTOCR_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Decision threshold of the n-gram detector.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Beam width used by the seq2seq corrector.
    #[arg(long, global = true)]
    beam_width: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export token pairs of an aligned corpus as JSON lines.
    Align(InOut),
    /// Corpus statistics as JSON.
    Stats(InOut),
    /// Build a character confusion matrix from an aligned corpus.
    Confusion {
        #[command(flatten)]
        io: InOut,
        /// Count substitutions only, dropping insertions and deletions.
        #[arg(long)]
        substitutions_only: bool,
    },
    /// Generate a synthetic aligned corpus.
    Synth(SynthArgs),
    /// Train the n-gram error detector.
    TrainDetect {
        /// Aligned training corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `__label__<0|1> <word>` lines instead of a corpus.
        #[arg(long, conflicts_with = "corpus")]
        labeled: Option<PathBuf>,
        /// Where to write the model.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Label the tokens of a corpus.
    Detect {
        #[command(flatten)]
        io: InOut,
        #[command(flatten)]
        detector: DetectorArgs,
    },
    /// Train the seq2seq corrector.
    TrainCorrect {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Vocabulary manifest to write.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Preset switching copy, coverage and the auxiliary losses.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Detect and correct the tokens of a corpus, writing JSON lines.
    Correct {
        #[command(flatten)]
        io: InOut,
        #[command(flatten)]
        detector: DetectorArgs,
        #[command(flatten)]
        corrector: CorrectorArgs,
        /// Ranked candidates to keep per flagged token.
        #[arg(long, default_value_t = 0)]
        candidates: usize,
    },
    /// Score `correct` output against the gold side of a corpus.
    Evaluate {
        #[command(flatten)]
        io: InOut,
        /// JSON lines written by `correct`.
        #[arg(long)]
        corrections: PathBuf,
    },
    /// Train, correct and evaluate in one go.
    Pipeline {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out corpus; without it the corpus is split.
        #[arg(long)]
        test_corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        detector: Option<DetectorArg>,
        #[arg(long, value_enum)]
        corrector: Option<CorrectorArg>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Report file; the table goes to standard output.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct InOut {
    /// Aligned corpus.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Output file; standard output by default.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Word list (`surface<TAB>tag<TAB>frequency`) to sample sentences from.
    #[arg(long)]
    words: Option<PathBuf>,
    /// Annotated modern sentences (`word/TAG ...`, one per line).
    #[arg(long, conflicts_with = "words")]
    annotated: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, value_enum, default_value_t = OrthographyArg::Ivanchev)]
    orthography: OrthographyArg,
    /// Rewrite rules replacing the bundled profile; needs `--exceptions`.
    #[arg(long, requires = "exceptions")]
    rules: Option<PathBuf>,
    #[arg(long)]
    exceptions: Option<PathBuf>,
    /// Confusion matrix TSV.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Let the noise touch whitespace.
    #[arg(long)]
    whitespace_noise: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectorArgs {
    #[arg(long, value_enum)]
    detector: Option<DetectorArg>,
    /// Trained n-gram detector.
    #[arg(long)]
    detector_model: Option<PathBuf>,
    /// Lexicon for the dictionary detector and the kNN corrector.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrectorArgs {
    #[arg(long, value_enum)]
    corrector: Option<CorrectorArg>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DetectorArg {
    Dict,
    Ngram,
    Oracle,
}

impl From<DetectorArg> for DetectorChoice {
    fn from(d: DetectorArg) -> Self {
        match d {
            DetectorArg::Dict => DetectorChoice::Dict,
            DetectorArg::Ngram => DetectorChoice::Ngram,
            DetectorArg::Oracle => DetectorChoice::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CorrectorArg {
    Identity,
    Knn,
    Seq2seq,
}

impl From<CorrectorArg> for CorrectorChoice {
    fn from(c: CorrectorArg) -> Self {
        match c {
            CorrectorArg::Identity => CorrectorChoice::Identity,
            CorrectorArg::Knn => CorrectorChoice::Knn,
            CorrectorArg::Seq2seq => CorrectorChoice::Seq2seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrthographyArg {
    Drinov,
    Ivanchev,
}

impl From<OrthographyArg> for OrthographyName {
    fn from(o: OrthographyArg) -> Self {
        match o {
            OrthographyArg::Drinov => OrthographyName::Drinov,
            OrthographyArg::Ivanchev => OrthographyName::Ivanchev,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Copy,
    Final,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Copy => Variant::Copy,
            VariantArg::Final => Variant::Final,
        }
    }
}

/// Reads the config file and applies the global flags on top.
fn load_config(global: &GlobalArgs) -> CliResult<PipelineConfig> {
    let mut config = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).or_usage(format!("cannot read config {}", path.display()))?;
            toml::from_str(&text).or_usage(format!("invalid config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(t) = global.threads {
        config.threads = Some(t);
    }
    if let Some(t) = global.threshold {
        config.threshold = t;
    }
    if let Some(b) = global.beam_width {
        config.correct.beam_width = b;
    }
    config.propagate_seed();
    config.validate().or_usage("invalid configuration")?;
    Ok(config)
}

/// A required path: the flag if present, else the config entry.
fn required(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| usage(format!("missing --{name} (or paths.{} in the config)", name.replace('-', "_"))))
}

fn optional<'a>(flag: &'a Option<PathBuf>, fallback: &'a Option<PathBuf>) -> Option<&'a Path> {
    flag.as_deref().or(fallback.as_deref())
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.global)?;
    let threads = config.threads;
    pipeline::in_pool(threads, move || commands::dispatch(cli.command, config))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Kind::Usage.exit_code() } else { ExitCode::SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.kind.exit_code()
        }
    }
}
