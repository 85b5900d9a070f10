//! Post-OCR text correction for historical Bulgarian.
//!
//! The crate covers the whole chain: aligned corpora and token labels
//! ([`corpus`]), edit-distance metrics ([`metrics`]), OCR confusion models
//! ([`confusion`]), synthetic training data in historical orthographies
//! ([`synthgen`]), error detection ([`detect`]), a small autodiff library
//! ([`numkit`]), the attention-based character corrector ([`correct`]) and
//! the end-to-end driver ([`pipeline`]).

pub mod confusion;
pub mod corpus;
pub mod correct;
pub mod detect;
pub mod metrics;
pub mod numkit;
pub mod pipeline;
pub mod synthgen;

pub use confusion::{ConfusionMatrix, Symbol};
pub use corpus::{AlignedRecord, SentencePair, TokenPair};
pub use detect::{Detector, Lexicon, NgramDetectorModel};
pub use metrics::{DetectionReport, ImprovementReport, SegmentationCensus};
pub use synthgen::{OrthographyName, OrthographyProfile};
