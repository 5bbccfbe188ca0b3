//! Deterministic mock backends for offline runs and tests.
//!
//! Both mocks are pure functions of (seed, inputs): every draw comes from a
//! keyed hash, never from shared RNG state, so outputs are bit-identical
//! across processes, repetitions, and thread schedules.
//!
//! **Scorer.** A prompt's accuracy level is looked up from the profile: the
//! highest `keyword_accuracy` entry whose keyword occurs (case-insensitively)
//! anywhere in the prompt, else `base_accuracy`. Per item, the mock draws
//! format adherence, a confidence value, and correctness. Confidence is
//! *calibrated by construction*: it takes one of two band values around the
//! accuracy level (spread grows with `confidence_noise`), and correctness is
//! then drawn with probability equal to that confidence. This makes planted
//! keywords lift accuracy, calibration, and discrimination together, giving
//! optimization runs a clean landscape to climb.
//!
//! **Reference.** Parses the scored history out of the reference prompt,
//! copies the highest-scoring instruction, and applies one seeded token
//! insertion or substitution from `mutation_vocabulary`, returning the
//! result in square brackets. A call counter indexes the mutation sequence,
//! so a fresh backend replays the same proposals in order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::backend::{BackendConfig, BackendKind, ChoiceDistribution, GenParams, MockProfile, TextBackend};
use crate::dataset::TaskItem;
use crate::error::{Error, Result};
use crate::hash::{stable_hash, stable_unit};
use crate::metaprompt::parse_history_pairs;

/// Fraction of responses assigned to the lower confidence band.
pub const LOW_BAND_WEIGHT: f64 = 0.3;

/// Completion emitted when the mock declines to follow the format; contains
/// neither an `Answer:` nor a `Confidence:` field by construction.
const UNFOLLOWED_COMPLETION: &str =
    "I would rather weigh the options than commit to a single letter with a stated certainty.";

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// The two confidence band values `(c_lo, c_hi)` for an accuracy level `a`
/// and dispersion `g` in [0,1].
///
/// Bands are placed so the band-weighted mean equals `a` exactly before
/// rounding: `c_hi = a + w_lo*s`, `c_lo = a - (1-w_lo)*s` with spread
/// `s = g * s_max`, `s_max = min((1-a)/w_lo, a/(1-w_lo))` keeping both
/// values inside [0,1]. Both are rounded to 4 decimals so the verbalized
/// rendering carries the exact value correctness was drawn against.
pub fn band_confidences(level: f64, dispersion: f64) -> (f64, f64) {
    debug_assert!((0.0..=1.0).contains(&level) && (0.0..=1.0).contains(&dispersion));
    if dispersion == 0.0 {
        let c = round4(level);
        return (c, c);
    }
    let w = LOW_BAND_WEIGHT;
    let s_max = ((1.0 - level) / w).min(level / (1.0 - w));
    let s = dispersion * s_max;
    (round4(level - (1.0 - w) * s), round4(level + w * s))
}

/// Per-item outcome shared by the verbalized and logits paths.
struct Outcome {
    followed: bool,
    confidence: f64,
    letter: char,
}

/// Deterministic stand-in for the scorer LLM.
pub struct MockScorerBackend {
    seed: u64,
    profile: MockProfile,
    model_name: String,
    /// Items the scorer may be asked about; needed to recover item identity
    /// (and gold answers) from rendered verbalized prompts. Bound items'
    /// question texts must not be substrings of one another.
    items: Mutex<Vec<TaskItem>>,
}

impl MockScorerBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        if config.kind != BackendKind::MockScorer {
            return Err(Error::Config(format!(
                "expected mock_scorer config, got {}",
                config.kind
            )));
        }
        Ok(MockScorerBackend {
            seed: config.seed.expect("validated"),
            profile: config.mock_profile.clone().expect("validated"),
            model_name: config.model_name.clone(),
            items: Mutex::new(Vec::new()),
        })
    }

    /// Sorted, case-folded keyword set present in the prompt, plus the
    /// accuracy level it implies.
    fn keyword_context(&self, prompt: &str) -> (String, f64) {
        let lower = prompt.to_lowercase();
        let mut present: Vec<&String> = self
            .profile
            .keyword_accuracy
            .keys()
            .filter(|kw| lower.contains(&kw.to_lowercase()))
            .collect();
        present.sort();
        let level = present
            .iter()
            .map(|kw| self.profile.keyword_accuracy[*kw])
            .fold(None::<f64>, |acc, v| Some(acc.map_or(v, |a| a.max(v))))
            .unwrap_or(self.profile.base_accuracy);
        let key = present
            .iter()
            .map(|kw| kw.to_lowercase())
            .collect::<Vec<_>>()
            .join("|");
        (key, level)
    }

    /// The bound item whose question text occurs furthest into the prompt
    /// (the query block follows any exemplar blocks); question length breaks
    /// position ties.
    fn locate_item(&self, prompt: &str) -> Result<TaskItem> {
        let items = self.items.lock().expect("mock item lock");
        let mut best: Option<(usize, usize, &TaskItem)> = None;
        for item in items.iter() {
            if let Some(pos) = prompt.rfind(&item.question) {
                let key = (pos, item.question.len());
                if best.map_or(true, |(p, l, _)| key > (p, l)) {
                    best = Some((pos, item.question.len(), item));
                }
            }
        }
        best.map(|(_, _, item)| item.clone()).ok_or_else(|| {
            Error::MockBackend("prompt does not mention any bound task item".into())
        })
    }

    fn draw(&self, label: &str, kwset: &str, item_id: &str) -> f64 {
        stable_unit(&[label, &self.seed.to_string(), kwset, item_id])
    }

    fn outcome(&self, prompt: &str, item: &TaskItem) -> Outcome {
        let (kwset, level) = self.keyword_context(prompt);
        let followed = self.draw("follow", &kwset, &item.id) < self.profile.follow_rate;
        let (c_lo, c_hi) = band_confidences(level, self.profile.confidence_noise);
        let confidence = if self.draw("band", &kwset, &item.id) < LOW_BAND_WEIGHT {
            c_lo
        } else {
            c_hi
        };
        // Correctness is drawn against the reported confidence itself, so
        // the mock is calibrated by construction.
        let letter = if self.draw("correct", &kwset, &item.id) < confidence {
            item.gold
        } else {
            let wrong: Vec<char> = item.letters().into_iter().filter(|&l| l != item.gold).collect();
            let idx = stable_hash(&["wrong", &self.seed.to_string(), &kwset, &item.id])
                % wrong.len() as u64;
            wrong[idx as usize]
        };
        Outcome {
            followed,
            confidence,
            letter,
        }
    }
}

impl TextBackend for MockScorerBackend {
    fn id(&self) -> String {
        format!("mock_scorer:{}", self.model_name)
    }

    fn generate(&self, prompt: &str, _params: &GenParams) -> Result<String> {
        let item = self.locate_item(prompt)?;
        let o = self.outcome(prompt, &item);
        if !o.followed {
            return Ok(UNFOLLOWED_COMPLETION.to_string());
        }
        Ok(format!("Answer: {}, Confidence: {:.4}", o.letter, o.confidence))
    }

    fn supports_choice_logits(&self) -> bool {
        true
    }

    fn score_choice_logits(&self, prompt: &str, item: &TaskItem) -> Result<ChoiceDistribution> {
        let o = self.outcome(prompt, item);
        let k = item.options.len();
        // Weight the chosen letter with the drawn confidence (floored at
        // uniform so it stays the argmax) and spread the rest evenly.
        let w_top = o.confidence.max(1.0 / k as f64).min(1.0);
        let w_rest = (1.0 - w_top) / (k - 1) as f64;
        ChoiceDistribution::new(
            item.letters()
                .into_iter()
                .map(|l| (l, if l == o.letter { w_top } else { w_rest }))
                .collect(),
        )
    }

    fn bind_items(&self, items: &[TaskItem]) {
        let mut bound = self.items.lock().expect("mock item lock");
        for item in items {
            if let Some(existing) = bound.iter_mut().find(|b| b.id == item.id) {
                *existing = item.clone();
            } else {
                bound.push(item.clone());
            }
        }
    }
}

/// Deterministic stand-in for the reference (candidate-proposing) LLM.
pub struct MockReferenceBackend {
    seed: u64,
    vocabulary: Vec<String>,
    model_name: String,
    calls: AtomicU64,
}

impl MockReferenceBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        if config.kind != BackendKind::MockReference {
            return Err(Error::Config(format!(
                "expected mock_reference config, got {}",
                config.kind
            )));
        }
        let profile = config.mock_profile.as_ref().expect("validated");
        if profile.mutation_vocabulary.is_empty() {
            return Err(Error::Config(
                "mock_reference needs a non-empty mutation_vocabulary".into(),
            ));
        }
        Ok(MockReferenceBackend {
            seed: config.seed.expect("validated"),
            vocabulary: profile.mutation_vocabulary.clone(),
            model_name: config.model_name.clone(),
            calls: AtomicU64::new(0),
        })
    }

    fn pick(&self, label: &str, call: u64, modulus: usize) -> usize {
        (stable_hash(&[label, &self.seed.to_string(), &call.to_string()]) % modulus as u64) as usize
    }
}

impl TextBackend for MockReferenceBackend {
    fn id(&self) -> String {
        format!("mock_reference:{}", self.model_name)
    }

    fn generate(&self, prompt: &str, _params: &GenParams) -> Result<String> {
        let pairs = parse_history_pairs(prompt);
        if pairs.is_empty() {
            return Err(Error::MockBackend(
                "reference prompt carries no scored history".into(),
            ));
        }
        // Highest score wins; the later entry wins ties (history is rendered
        // ascending, so this is the most recent best).
        let mut base: &(String, u32) = &pairs[0];
        for pair in &pairs {
            if pair.1 >= base.1 {
                base = pair;
            }
        }

        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let token = self.vocabulary[self.pick("vocab", call, self.vocabulary.len())].clone();
        let mut tokens: Vec<String> = base.0.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            tokens.push(token);
        } else if self.pick("op", call, 2) == 0 {
            let pos = self.pick("pos", call, tokens.len() + 1);
            tokens.insert(pos, token);
        } else {
            let pos = self.pick("pos", call, tokens.len());
            tokens[pos] = token;
        }
        Ok(format!(
            "Proposed improvement after reviewing the scored attempts:\n[{}]",
            tokens.join(" ")
        ))
    }
}
