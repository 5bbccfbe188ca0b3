//! Two-stage instruction-prompt optimization for multiple-choice QA.
//!
//! A reference LLM proposes candidate instruction prompts from a scored
//! history; a scorer LLM answers multiple-choice items under each candidate;
//! a multi-metric evaluator (accuracy, calibration error, ranking quality,
//! instruction-following rate) scalarizes the result into a single composite
//! used to drive the search. Stage one optimizes over source tasks; stage two
//! seeds from the best source prompts and fine-tunes on target tasks.
//!
//! Module map:
//! - [`dataset`]: JSONL task loading, splits, exemplar sampling
//! - [`backend`]: text-generation backends (http chat, deterministic mocks)
//! - [`evaluator`]: query rendering, response parsing, per-dataset evaluation
//! - [`metrics`]: ACC / ECE / AUROC / PR-AUC / IFR and the weighted composite
//! - [`metaprompt`]: reference-prompt templates, candidate extraction, dedupe
//! - [`optimizer`]: the two-stage search loop
//! - [`store`]: append-only run persistence and curve export

pub mod backend;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod exec;
pub mod hash;
pub mod metaprompt;
pub mod metrics;
pub mod optimizer;
pub mod store;

pub use error::{Error, Result};
