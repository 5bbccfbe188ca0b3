//! Multiple-choice QA dataset ingestion and task-set grouping.
//!
//! Datasets arrive as JSONL, one record per line:
//!
//! ```text
//! {"id": "q1", "question": "2+2?", "options": {"A": "3", "B": "4"}, "answer": "B"}
//! ```
//!
//! An optional sidecar `<stem>.meta.json` (`{"name": "...", "domain": "..."}`)
//! names the dataset and assigns its domain; without one the file stem and
//! the `synthetic` domain are used. Option letters must be contiguous from
//! `A` (2–5 options); other key schemes are rejected rather than remapped so
//! downstream answer parsing stays unambiguous.
//!
//! Datasets are grouped into a [`TaskSet`] per role: `source` sets drive the
//! first optimization stage, `target` sets the second. Splitting and
//! exemplar sampling are pure functions of their inputs and a seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed option-count range (letters `A` through at most `E`).
pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;

/// Broad subject area of a dataset; carried through to reports only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Commonsense,
    Medical,
    Legal,
    Financial,
    #[default]
    Synthetic,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Domain::Commonsense => "commonsense",
            Domain::Medical => "medical",
            Domain::Legal => "legal",
            Domain::Financial => "financial",
            Domain::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// Which optimization stage a task set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

/// One multiple-choice question with lettered options and a gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<char, String>,
    #[serde(rename = "answer")]
    pub gold: char,
}

impl TaskItem {
    /// Validating constructor; enforces every invariant the loader relies on.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        options: BTreeMap<char, String>,
        gold: char,
    ) -> Result<Self> {
        let id = id.into();
        let question = question.into();
        if id.trim().is_empty() {
            return Err(Error::DatasetInvalid {
                name: String::new(),
                msg: "item id is empty".into(),
            });
        }
        let fail = |msg: String| Error::DatasetInvalid {
            name: id.clone(),
            msg,
        };
        if question.trim().is_empty() {
            return Err(fail("question is empty".into()));
        }
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&options.len()) {
            return Err(fail(format!(
                "expected {MIN_OPTIONS}–{MAX_OPTIONS} options, found {}",
                options.len()
            )));
        }
        for (expect, (&letter, text)) in ('A'..).zip(options.iter()) {
            if letter != expect {
                return Err(fail(format!(
                    "option letters must run contiguously from 'A'; found `{letter}` where `{expect}` was expected"
                )));
            }
            if text.trim().is_empty() {
                return Err(fail(format!("option {letter} text is empty")));
            }
        }
        if !options.contains_key(&gold) {
            return Err(fail(format!("gold answer `{gold}` is not an option letter")));
        }
        Ok(TaskItem {
            id,
            question,
            options,
            gold,
        })
    }

    /// The item's option letters in order.
    pub fn letters(&self) -> Vec<char> {
        self.options.keys().copied().collect()
    }
}

/// A named, domain-tagged list of task items with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub domain: Domain,
    pub items: Vec<TaskItem>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, domain: Domain, items: Vec<TaskItem>) -> Result<Self> {
        let name = name.into();
        if items.is_empty() {
            return Err(Error::DatasetInvalid {
                name,
                msg: "dataset has no items".into(),
            });
        }
        let mut seen = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if let Some(first) = seen.insert(item.id.clone(), i) {
                return Err(Error::DatasetInvalid {
                    name,
                    msg: format!(
                        "duplicate item id `{}` (items {} and {})",
                        item.id,
                        first + 1,
                        i + 1
                    ),
                });
            }
        }
        Ok(Dataset {
            name,
            domain,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// The datasets for one optimization stage plus the operator-written task
/// description injected into the reference prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub role: Role,
    pub description: String,
    pub datasets: Vec<Dataset>,
}

impl TaskSet {
    pub fn new(role: Role, description: impl Into<String>, datasets: Vec<Dataset>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config(format!(
                "{role} task set needs at least one dataset"
            )));
        }
        Ok(TaskSet {
            role,
            description: description.into(),
            datasets,
        })
    }
}

/// Supported ingest formats (JSONL only; convert CSVs upstream).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
}

/// Wire shape of one JSONL record; converted into [`TaskItem`] with
/// friendlier validation than direct deserialization would give.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    question: String,
    options: BTreeMap<String, String>,
    answer: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SidecarMeta {
    name: Option<String>,
    domain: Option<Domain>,
}

fn single_letter(s: &str, what: &str) -> std::result::Result<char, String> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Ok(c),
        _ => Err(format!("{what} must be a single uppercase letter, got `{s}`")),
    }
}

impl RawItem {
    fn into_item(self) -> std::result::Result<TaskItem, String> {
        let mut options = BTreeMap::new();
        for (k, v) in self.options {
            options.insert(single_letter(&k, "option key")?, v);
        }
        let gold = single_letter(&self.answer, "answer")?;
        TaskItem::new(self.id, self.question, options, gold).map_err(|e| e.to_string())
    }
}

/// Load one dataset file, preserving record order. Blank lines are skipped;
/// any other malformed line fails the whole load with its 1-based number.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let sidecar_path = path.with_extension("meta.json");
    let meta: SidecarMeta = if sidecar_path.exists() {
        let raw = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::DatasetParse {
            path: sidecar_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?
    } else {
        SidecarMeta::default()
    };
    let name = meta.name.unwrap_or(stem);
    let domain = meta.domain.unwrap_or_default();

    let mut items = Vec::new();
    let mut first_line_of = BTreeMap::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::DatasetParse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let raw: RawItem = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let item = raw.into_item().map_err(parse_err)?;
        if let Some(first) = first_line_of.insert(item.id.clone(), line_no) {
            return Err(parse_err(format!(
                "duplicate item id `{}` (first seen on line {first})",
                item.id
            )));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::DatasetParse {
            path: path.to_path_buf(),
            line: 1,
            msg: "file contains no records".into(),
        });
    }
    Dataset::new(name, domain, items)
}

/// Deterministically partition a dataset into dev/test halves. The dev side
/// gets `round(dev_fraction * N)` items; both sides keep original item order.
pub fn split(dataset: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.len() < 2 {
        return Err(Error::Config(format!(
            "dataset `{}` needs at least 2 items to split",
            dataset.name
        )));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Config(format!(
            "dev fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let n = dataset.len();
    let n_dev = (dev_fraction * n as f64).round() as usize;
    if n_dev == 0 || n_dev == n {
        return Err(Error::Config(format!(
            "dev fraction {dev_fraction} leaves one side of the {n}-item split empty"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_idx = indices[..n_dev].to_vec();
    let mut test_idx = indices[n_dev..].to_vec();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.items[i].clone()).collect();
    Ok((
        Dataset::new(format!("{}-dev", dataset.name), dataset.domain, pick(&dev_idx))?,
        Dataset::new(format!("{}-test", dataset.name), dataset.domain, pick(&test_idx))?,
    ))
}

/// Draw `n` distinct exemplar items, deterministic under `seed`; the chosen
/// items are returned in dataset order (so `n = len` returns the dataset
/// verbatim).
pub fn sample_exemplars(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<TaskItem>> {
    if n > dataset.len() {
        return Err(Error::Config(format!(
            "requested {n} exemplars from `{}` which has only {}",
            dataset.name,
            dataset.len()
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.iter().map(|&i| dataset.items[i].clone()).collect())
}
