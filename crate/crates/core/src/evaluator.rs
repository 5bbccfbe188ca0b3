//! Apply one candidate instruction to a dataset through a scorer backend
//! and reduce the responses to per-item records, metrics, and a composite.
//!
//! The scorer query is a fixed template: the instruction at the `<INS>`
//! slot, optional solved exemplar blocks, the item's question and lettered
//! options, and a mode-specific directive. Two confidence modes exist:
//!
//! - **verbalized** — the scorer answers in free text and must state both an
//!   answer letter and a confidence value; responses missing either field
//!   (or naming a letter the item does not have) count as unfollowed.
//! - **logits** — the scorer returns a probability distribution over the
//!   option letters; the prediction is the argmax and the confidence its
//!   weight, so every item counts as followed by construction.
//!
//! Evaluation is all-or-nothing per dataset: any backend error aborts the
//! whole call, tagged with the item that failed.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{GenParams, TextBackend};
use crate::dataset::{Dataset, TaskItem};
use crate::error::{Error, Result};
use crate::exec::Runner;
use crate::metrics::{
    compute_metrics, normalize_and_compose, CompositeScore, MetricVector, DEFAULT_ECE_BINS,
};

/// Marker in the query template where the instruction lands; instructions
/// themselves must not contain it.
pub const RESERVED_MARKER: &str = "<INS>";

/// Directive appended in verbalized mode (must stay bit-stable).
pub const VERBALIZED_DIRECTIVE: &str =
    "Respond in the format: Answer: <letter>, Confidence: <number between 0 and 1>";

/// Directive appended in logits mode: elicit exactly the answer token.
pub const LOGITS_DIRECTIVE: &str = "Answer:";

/// How the scorer expresses confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    Logits,
    Verbalized,
}

impl std::fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConfidenceMode::Logits => "logits",
            ConfidenceMode::Verbalized => "verbalized",
        })
    }
}

/// Outcome of scoring one item under one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub followed: bool,
    pub predicted: Option<char>,
    pub correct: bool,
    pub confidence: Option<f64>,
}

impl ItemRecord {
    /// A followed record; confidence must be a finite value in [0,1].
    pub fn answered(item_id: &str, predicted: char, confidence: f64, correct: bool) -> Result<Self> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidRecord(format!(
                "item `{item_id}` confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(ItemRecord {
            item_id: item_id.to_string(),
            followed: true,
            predicted: Some(predicted),
            correct,
            confidence: Some(confidence),
        })
    }

    /// An unfollowed record: no prediction, no confidence, counted wrong.
    pub fn unanswered(item_id: &str) -> Self {
        ItemRecord {
            item_id: item_id.to_string(),
            followed: false,
            predicted: None,
            correct: false,
            confidence: None,
        }
    }
}

/// Everything produced by evaluating one prompt on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub prompt_text: String,
    pub dataset_name: String,
    pub confidence_mode: ConfidenceMode,
    pub records: Vec<ItemRecord>,
    pub metrics: MetricVector,
    pub composite: CompositeScore,
}

/// Fields recovered from a free-text scorer response.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParsedAnswer {
    pub letter: Option<char>,
    pub confidence: Option<f64>,
}

fn render_options(item: &TaskItem, out: &mut String) {
    for (letter, text) in &item.options {
        out.push_str(&format!("{letter}. {text}\n"));
    }
}

/// A solved exemplar block: question, options, gold answer.
fn render_solved_block(item: &TaskItem) -> String {
    let mut out = format!("Question: {}\n", item.question);
    render_options(item, &mut out);
    out.push_str(&format!("Answer: {}\n", item.gold));
    out
}

/// The query item block: question and options, answer left open.
fn render_item_block(item: &TaskItem) -> String {
    let mut out = format!("Question: {}\n", item.question);
    render_options(item, &mut out);
    out
}

/// Build the full scorer query for one item.
pub fn render_query(
    instruction: &str,
    item: &TaskItem,
    exemplars: &[TaskItem],
    mode: ConfidenceMode,
) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(Error::InvalidPromptText("instruction is empty".into()));
    }
    if instruction.contains(RESERVED_MARKER) {
        return Err(Error::ReservedMarker);
    }
    // Fixed template: the instruction replaces the marker, the rest is
    // appended verbatim so the rendering is bit-stable per (inputs, mode).
    let mut query = String::from(RESERVED_MARKER).replacen(RESERVED_MARKER, instruction, 1);
    query.push_str("\n\n");
    for exemplar in exemplars {
        query.push_str(&render_solved_block(exemplar));
        query.push('\n');
    }
    query.push_str(&render_item_block(item));
    query.push_str(match mode {
        ConfidenceMode::Verbalized => VERBALIZED_DIRECTIVE,
        ConfidenceMode::Logits => LOGITS_DIRECTIVE,
    });
    Ok(query)
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\banswer\s*:\s*\(?\s*([A-Ea-e])\b\)?").expect("valid regex"))
}

fn confidence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bconfidence\s*:\s*([0-9]+(?:\.[0-9]+)?)\s*(%)?").expect("valid regex")
    })
}

/// Scan a completion for `Answer: <letter>` and `Confidence: <number>`.
///
/// Case-insensitive; the letter must stand alone; confidence is accepted as
/// a decimal in [0,1] or a percentage in (1,100] (with or without a `%`
/// sign), normalized by /100. Out-of-range values parse as absent —
/// unparseable input is an outcome, never an error.
pub fn parse_response(text: &str) -> ParsedAnswer {
    let letter = answer_re()
        .captures(text)
        .map(|c| c[1].chars().next().expect("single char").to_ascii_uppercase());
    let confidence = confidence_re().captures(text).and_then(|c| {
        let v: f64 = c[1].parse().ok()?;
        let v = if c.get(2).is_some() { v / 100.0 } else { v };
        if (0.0..=1.0).contains(&v) {
            Some(v)
        } else if v <= 100.0 {
            Some(v / 100.0)
        } else {
            None
        }
    });
    ParsedAnswer { letter, confidence }
}

/// Evaluate one instruction over a whole dataset.
///
/// `eval_seed` is forwarded as the generation seed so endpoint-side sampling
/// can be pinned per (prompt, dataset); deterministic backends ignore it.
pub fn evaluate_prompt(
    instruction: &str,
    dataset: &Dataset,
    scorer: &dyn TextBackend,
    mode: ConfidenceMode,
    exemplars: &[TaskItem],
    eval_seed: u64,
    runner: &Runner,
) -> Result<EvalResult> {
    if mode == ConfidenceMode::Logits && !scorer.supports_choice_logits() {
        return Err(Error::LogprobsUnsupported { backend: scorer.id() });
    }
    let params = GenParams::scorer().with_seed(eval_seed);
    let records = runner.try_map(dataset.items.clone(), |item| {
        score_item(instruction, &item, scorer, mode, exemplars, &params).map_err(|e| Error::Eval {
            item_id: item.id.clone(),
            source: Box::new(e),
        })
    })?;
    let metrics = compute_metrics(&records, DEFAULT_ECE_BINS)?;
    let composite = normalize_and_compose(&metrics, None)?;
    Ok(EvalResult {
        prompt_text: instruction.to_string(),
        dataset_name: dataset.name.clone(),
        confidence_mode: mode,
        records,
        metrics,
        composite,
    })
}

fn score_item(
    instruction: &str,
    item: &TaskItem,
    scorer: &dyn TextBackend,
    mode: ConfidenceMode,
    exemplars: &[TaskItem],
    params: &GenParams,
) -> Result<ItemRecord> {
    let query = render_query(instruction, item, exemplars, mode)?;
    match mode {
        ConfidenceMode::Logits => {
            let dist = scorer.score_choice_logits(&query, item)?;
            let (letter, weight) = dist.top();
            ItemRecord::answered(&item.id, letter, weight, letter == item.gold)
        }
        ConfidenceMode::Verbalized => {
            let completion = scorer.generate(&query, params)?;
            let parsed = parse_response(&completion);
            match (parsed.letter, parsed.confidence) {
                (Some(letter), Some(confidence)) if item.options.contains_key(&letter) => {
                    ItemRecord::answered(&item.id, letter, confidence, letter == item.gold)
                }
                // Missing either field — or an out-of-range letter — means
                // the instruction's format demands were not met.
                _ => Ok(ItemRecord::unanswered(&item.id)),
            }
        }
    }
}
