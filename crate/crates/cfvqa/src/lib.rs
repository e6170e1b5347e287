//! Counterfactual sample synthesis for robust visual question answering.
//!
//! This crate trains a small attention-based VQA classifier together with a
//! question-only bias branch, synthesizes counterfactual training samples by
//! masking critical image objects (V-CSS) or question words (Q-CSS), and
//! evaluates visual-grounding and question-sensitivity with dedicated
//! metrics, all on a synthetic changing-priors benchmark that fits in CPU
//! minutes.
//!
//! Module map:
//!
//! - [`data`] — sample/vocabulary types and JSONL persistence.
//! - [`model`] — the toy UpDn-style model, question-only branch, fusion
//!   strategies, and per-sample gradient training.
//! - [`saliency`] — gradient contributions of objects and words to the
//!   ground-truth answer mass, plus a finite-difference oracle.
//! - [`css`] — the V-CSS / Q-CSS synthesis pipelines and the combined
//!   training step.
//! - [`databench`] — the synthetic changing-priors dataset generator,
//!   question rephrasings, and the embedding lexicon.
//! - [`metrics`] — accuracy by category and the AI / CI / CS(k) robustness
//!   metrics.

pub mod css;
pub mod data;
pub mod databench;
pub mod metrics;
pub mod model;
pub mod saliency;
pub mod training;

pub use css::{CounterfactualKind, CounterfactualSample, CssConfig, InitialObjectSet};
pub use data::{
    load_dataset, save_dataset, soft_accuracy, AnswerDistribution, AnswerScores, AnswerVocabulary,
    DataError, ImageRecord, ObjectInstance, QuestionRecord, Sample, SplitTag,
};
pub use databench::{EmbeddingLexicon, GeneratorSpec, QuestionKind, RephrasingGroup};
pub use model::{FusionKind, FusionStrategy, Mode, ModelError, ModelParams, TokenVocab, VqaModel};
pub use saliency::{ElementKind, SaliencyScores};
