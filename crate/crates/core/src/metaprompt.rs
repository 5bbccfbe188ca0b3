//! Build the reference model's prompt from scored history and exemplars,
//! and recover candidate instructions from its completions.
//!
//! A meta-prompt template carries three markers: `{TASK}` for a task
//! description, `{HISTORY}` for the scored-instruction trajectory, and
//! `{EXEMPLARS}` for solved items shown with a `<INS>` placeholder where the
//! instruction would sit. History is rendered in ascending score order so
//! the strongest attempt is the last thing the model reads before the
//! footer, which demands a single bracketed replacement instruction.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Role, TaskItem};
use crate::error::{Error, Result};
use crate::evaluator::RESERVED_MARKER;
use crate::hash::text_id;
use crate::metrics::{normalize_and_compose, MetricVector};

/// Marker replaced by the rendered scored history.
pub const HISTORY_SLOT: &str = "{HISTORY}";

/// Marker replaced by the rendered exemplar blocks.
pub const EXEMPLAR_SLOT: &str = "{EXEMPLARS}";

/// Marker replaced by a task description.
pub const TASK_SLOT: &str = "{TASK}";

/// Hard cap on extracted candidate length, in characters.
pub const DEFAULT_CANDIDATE_MAX_CHARS: usize = 500;

/// Default number of history entries shown to the reference model.
pub const DEFAULT_HISTORY_TOP_K: usize = 20;

/// Tolerance for a stored composite against its recomputation.
const COMPOSITE_TOLERANCE: f64 = 1e-9;

const PALM_STYLE: &str = "\
Your task: {TASK}

Below are instructions that were tried before, each with the score it earned (0-100, higher is better). They are listed from weakest to strongest.

{HISTORY}

Here are example problems, shown with <INS> marking where the instruction is placed:

{EXEMPLARS}

Write one new instruction that is different from all of the above and should earn a higher score. Write it inside square brackets, like [your instruction], and write nothing else.";

const GPT_STYLE: &str = "\
You are improving an instruction for the following task: {TASK}

I ran several instructions already. Each entry below shows the instruction text and the score it achieved on a 0-100 scale, ordered from lowest to highest score:

{HISTORY}

For context, these are solved examples of the problems the instruction must handle; <INS> shows where the instruction appears:

{EXEMPLARS}

Propose exactly one new instruction you expect to score higher than everything listed. Keep it concise, make it different from every listed instruction, and reply with the instruction enclosed in square brackets and nothing more.";

/// A meta-prompt template with `{TASK}`, `{HISTORY}`, and `{EXEMPLARS}`
/// markers and a trailing footer telling the model how to answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPromptTemplate {
    pub template_id: String,
    pub text: String,
}

impl MetaPromptTemplate {
    /// One of the two built-in templates: `palm-style` or `gpt-style`.
    pub fn builtin(template_id: &str) -> Result<Self> {
        let text = match template_id {
            "palm-style" => PALM_STYLE,
            "gpt-style" => GPT_STYLE,
            other => {
                return Err(Error::Template {
                    template_id: other.to_string(),
                    msg: "unknown built-in template (expected `palm-style` or `gpt-style`)"
                        .into(),
                })
            }
        };
        MetaPromptTemplate::from_text(template_id, text)
    }

    /// Validate arbitrary template text: each slot must appear exactly once,
    /// and text must continue after the last slot (the answering footer).
    pub fn from_text(template_id: &str, text: &str) -> Result<Self> {
        let fail = |msg: &str| Error::Template {
            template_id: template_id.to_string(),
            msg: msg.to_string(),
        };
        for slot in [HISTORY_SLOT, EXEMPLAR_SLOT] {
            match text.matches(slot).count() {
                1 => {}
                0 => return Err(fail(&format!("missing required marker {slot}"))),
                n => return Err(fail(&format!("marker {slot} appears {n} times, expected 1"))),
            }
        }
        let last_slot_end = [HISTORY_SLOT, EXEMPLAR_SLOT]
            .iter()
            .map(|s| text.find(s).expect("slot presence checked") + s.len())
            .max()
            .expect("two slots");
        if text[last_slot_end..].trim().is_empty() {
            return Err(fail("no footer after the last marker"));
        }
        Ok(MetaPromptTemplate {
            template_id: template_id.to_string(),
            text: text.to_string(),
        })
    }

    /// Load a template from a file; the id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let template_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        MetaPromptTemplate::from_text(&template_id, &text)
    }

    /// Fill the `{TASK}` marker, leaving the other slots for render time.
    pub fn with_task_description(&self, description: &str) -> MetaPromptTemplate {
        MetaPromptTemplate {
            template_id: self.template_id.clone(),
            text: self.text.replace(TASK_SLOT, description),
        }
    }
}

/// A scored instruction: the unit the optimizer accumulates and ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub composite: f64,
    pub metric_vector: MetricVector,
    pub stage: Role,
    pub step: u64,
    pub parent_ids: Vec<String>,
    pub id: String,
}

impl PromptRecord {
    /// Validate and normalize; the stored composite must agree with a
    /// recomputation from the metric vector under default weights.
    pub fn new(
        text: &str,
        composite: f64,
        metric_vector: MetricVector,
        stage: Role,
        step: u64,
        parent_ids: Vec<String>,
    ) -> Result<Self> {
        let text = validate_text(text)?;
        let recomputed = normalize_and_compose(&metric_vector, None)?.value;
        if (composite - recomputed).abs() > COMPOSITE_TOLERANCE {
            return Err(Error::InvalidPromptText(format!(
                "stored composite {composite} disagrees with metric recomputation {recomputed}"
            )));
        }
        let id = text_id(&text);
        Ok(PromptRecord {
            text,
            composite,
            metric_vector,
            stage,
            step,
            parent_ids,
            id,
        })
    }
}

/// Normalize and validate instruction text. Control whitespace becomes
/// plain spaces (instructions are single-line by construction); the result
/// must be non-empty, free of the `<INS>` marker, and bracket-balanced so
/// it survives a bracketed round-trip through a reference completion.
pub fn validate_text(text: &str) -> Result<String> {
    let normalized: String = text
        .chars()
        .map(|c| if c == '\n' || c == '\r' || c == '\t' { ' ' } else { c })
        .collect();
    let normalized = normalized.trim().to_string();
    if normalized.is_empty() {
        return Err(Error::InvalidPromptText("empty instruction".into()));
    }
    if normalized.contains(RESERVED_MARKER) {
        return Err(Error::ReservedMarker);
    }
    let mut depth: i64 = 0;
    for c in normalized.chars() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::InvalidPromptText(
                        "unbalanced `]` in instruction".into(),
                    ));
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::InvalidPromptText(
            "unbalanced `[` in instruction".into(),
        ));
    }
    Ok(normalized)
}

/// Integer display score on a 0-100 scale: `floor(100 * composite)` with a
/// tiny guard so exact hundredths do not round down.
pub fn score_percent(composite: f64) -> u32 {
    (100.0 * composite + 1e-9).floor() as u32
}

/// Render the scored history: the `top_k` best records, displayed in
/// ascending score order (strongest last), ties broken by id.
pub fn render_history(records: &[PromptRecord], top_k: usize) -> String {
    let mut selected: Vec<&PromptRecord> = records.iter().collect();
    selected.sort_by(|a, b| {
        b.composite
            .partial_cmp(&a.composite)
            .expect("finite composites")
            .then_with(|| a.id.cmp(&b.id))
    });
    selected.truncate(top_k);
    selected.sort_by(|a, b| {
        a.composite
            .partial_cmp(&b.composite)
            .expect("finite composites")
            .then_with(|| a.id.cmp(&b.id))
    });
    selected
        .iter()
        .map(|r| format!("text: {}\nscore: {}", r.text, score_percent(r.composite)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Render exemplar blocks for the meta-prompt: each shows the `<INS>`
/// placeholder above a solved item.
pub fn render_exemplars(items: &[TaskItem]) -> String {
    items
        .iter()
        .map(|item| {
            let mut block = format!("{RESERVED_MARKER}\nQuestion: {}\n", item.question);
            for (letter, text) in &item.options {
                block.push_str(&format!("{letter}. {text}\n"));
            }
            block.push_str(&format!("Answer: {}", item.gold));
            block
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Assemble the full reference prompt from a task-filled template.
pub fn build_reference_prompt(
    template: &MetaPromptTemplate,
    history: &[PromptRecord],
    exemplars: &[TaskItem],
    top_k: usize,
) -> Result<String> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if top_k == 0 {
        return Err(Error::Config("history top_k must be at least 1".into()));
    }
    let prompt = template
        .text
        .replacen(HISTORY_SLOT, &render_history(history, top_k), 1)
        .replacen(EXEMPLAR_SLOT, &render_exemplars(exemplars), 1);
    Ok(prompt)
}

/// Recover `(text, score)` pairs from a rendered history: a `text: ` line
/// immediately followed by a `score: ` line with an integer value.
pub fn parse_history_pairs(prompt: &str) -> Vec<(String, u32)> {
    let lines: Vec<&str> = prompt.lines().collect();
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if let Some(text) = lines[i].strip_prefix("text: ") {
            if let Some(score) = lines
                .get(i + 1)
                .and_then(|l| l.strip_prefix("score: "))
                .and_then(|s| s.trim().parse::<u32>().ok())
            {
                pairs.push((text.to_string(), score));
                i += 2;
                continue;
            }
        }
        i += 1;
    }
    pairs
}

/// Find the first balanced, non-empty `[...]` span in `completion`.
/// Returns the byte range of the inner text.
fn first_bracket_span(completion: &str) -> Option<(usize, usize)> {
    let bytes = completion.as_bytes();
    let mut start = 0;
    while let Some(open_rel) = completion[start..].find('[') {
        let open = start + open_rel;
        let mut depth = 0usize;
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            match b {
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match close {
            Some(end) => {
                if !completion[open + 1..end].trim().is_empty() {
                    return Some((open + 1, end));
                }
                // An empty `[]` is noise; keep scanning past it.
                start = end + 1;
            }
            // No matching close anywhere right of this point.
            None => return None,
        }
    }
    None
}

/// Pull the candidate instruction out of a reference completion.
///
/// The first balanced non-empty `[...]` span wins; absent any, the whole
/// trimmed completion is the candidate. One surrounding quote pair is
/// stripped. Empty candidates and candidates over `max_chars` characters
/// are errors the caller is expected to discard, not abort on.
pub fn extract_candidate(completion: &str, max_chars: usize) -> Result<String> {
    let raw = match first_bracket_span(completion) {
        Some((from, to)) => &completion[from..to],
        None => completion,
    };
    let mut candidate = raw.trim();
    for quote in ['"', '\''] {
        if candidate.len() >= 2 && candidate.starts_with(quote) && candidate.ends_with(quote) {
            candidate = candidate[1..candidate.len() - 1].trim();
            break;
        }
    }
    if candidate.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    let len = candidate.chars().count();
    if len > max_chars {
        return Err(Error::CandidateTooLong { len, cap: max_chars });
    }
    Ok(candidate.to_string())
}

/// Key under which two instruction texts count as the same attempt:
/// case-insensitive, whitespace runs collapsed.
pub fn dedupe_key(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Collapse textual duplicates, keeping each key's highest composite at its
/// first-seen position.
pub fn dedupe(records: Vec<PromptRecord>) -> Vec<PromptRecord> {
    let mut out: Vec<PromptRecord> = Vec::with_capacity(records.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for record in records {
        let key = dedupe_key(&record.text);
        match seen.get(&key) {
            Some(&idx) => {
                if record.composite > out[idx].composite {
                    out[idx] = record;
                }
            }
            None => {
                seen.insert(key, out.len());
                out.push(record);
            }
        }
    }
    out
}
