//! Text-generation backends: generic trait, shared config, and the
//! per-option confidence distribution used in logits mode.
//!
//! Three backend kinds exist:
//!
//! - [`mock::MockScorerBackend`] / [`mock::MockReferenceBackend`] —
//!   deterministic offline stand-ins for the scorer and reference models,
//!   driven entirely by a seed and a [`MockProfile`].
//! - [`http::HttpChatBackend`] — a wire-level chat-completion client with
//!   retry, budget, and concurrency controls for real models.
//!
//! All are used through the object-safe [`TextBackend`] trait so the
//! optimizer and evaluator never know which one they hold.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::TaskItem;
use crate::error::{Error, Result};

/// Which implementation a [`BackendConfig`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    MockScorer,
    MockReference,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::HttpChat => "http_chat",
            BackendKind::MockScorer => "mock_scorer",
            BackendKind::MockReference => "mock_reference",
        })
    }
}

/// Sampling parameters for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Optional provider-side sampling seed, passed through when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenParams {
    pub fn new(temperature: f64, max_tokens: u32) -> Result<Self> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(Error::Config(format!(
                "temperature must lie in [0, 2], got {temperature}"
            )));
        }
        if max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        Ok(GenParams {
            temperature,
            max_tokens,
            stop_sequences: Vec::new(),
            seed: None,
        })
    }

    /// Default parameters for scoring calls: greedy and short.
    pub fn scorer() -> Self {
        GenParams::new(0.0, 64).expect("constants are valid")
    }

    /// Default parameters for candidate generation: diverse and longer.
    pub fn reference() -> Self {
        GenParams::new(1.0, 512).expect("constants are valid")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// A normalized probability distribution over an item's option letters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDistribution {
    weights: BTreeMap<char, f64>,
}

impl ChoiceDistribution {
    /// Accepts weights that already sum to 1 within `1e-9`.
    pub fn new(weights: BTreeMap<char, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("choice distribution has no options".into()));
        }
        if let Some((l, w)) = weights.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(Error::Config(format!(
                "choice weight for {l} is invalid: {w}"
            )));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "choice weights sum to {sum}, expected 1"
            )));
        }
        Ok(ChoiceDistribution { weights })
    }

    /// Renormalizes arbitrary non-negative scores to a distribution.
    pub fn from_raw(weights: BTreeMap<char, f64>) -> Result<Self> {
        let sum: f64 = weights.values().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::Config(format!(
                "choice scores must have a positive finite sum, got {sum}"
            )));
        }
        ChoiceDistribution::new(weights.into_iter().map(|(l, w)| (l, w / sum)).collect())
    }

    /// Softmax over per-option log-probabilities (max-shifted for stability).
    pub fn from_logprobs(logprobs: BTreeMap<char, f64>) -> Result<Self> {
        if logprobs.is_empty() {
            return Err(Error::Config("no option log-probabilities given".into()));
        }
        let max = logprobs.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        ChoiceDistribution::from_raw(
            logprobs
                .into_iter()
                .map(|(l, lp)| (l, (lp - max).exp()))
                .collect(),
        )
    }

    pub fn weights(&self) -> &BTreeMap<char, f64> {
        &self.weights
    }

    /// The argmax option and its weight; exact ties resolve to the lowest
    /// letter so the choice is deterministic.
    pub fn top(&self) -> (char, f64) {
        let mut best = None;
        for (&letter, &w) in &self.weights {
            match best {
                Some((_, bw)) if w <= bw => {}
                _ => best = Some((letter, w)),
            }
        }
        best.expect("validated non-empty")
    }
}

/// Deterministic behavior profile for the mock backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockProfile {
    /// Accuracy level granted when a keyword appears (case-insensitively)
    /// in the prompt; the highest matching level wins.
    #[serde(default)]
    pub keyword_accuracy: BTreeMap<String, f64>,
    /// Accuracy level when no keyword matches.
    pub base_accuracy: f64,
    /// Confidence dispersion in [0,1]: 0 pins confidence to the accuracy
    /// level; larger values spread confidence into two calibrated bands.
    #[serde(default)]
    pub confidence_noise: f64,
    /// Probability a verbalized response follows the required format.
    #[serde(default = "default_follow_rate")]
    pub follow_rate: f64,
    /// Token pool the mock reference mutates candidates with.
    #[serde(default)]
    pub mutation_vocabulary: Vec<String>,
}

fn default_follow_rate() -> f64 {
    1.0
}

impl MockProfile {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "mock profile {name} must lie in [0, 1], got {v}"
                )));
            }
            Ok(())
        };
        check("base_accuracy", self.base_accuracy)?;
        check("confidence_noise", self.confidence_noise)?;
        check("follow_rate", self.follow_rate)?;
        for (kw, acc) in &self.keyword_accuracy {
            if kw.trim().is_empty() {
                return Err(Error::Config("mock profile has an empty keyword".into()));
            }
            check(&format!("keyword_accuracy[{kw}]"), *acc)?;
        }
        for token in &self.mutation_vocabulary {
            if token.trim().is_empty()
                || token.chars().any(|c| c.is_whitespace() || c == '[' || c == ']')
            {
                return Err(Error::Config(format!(
                    "mutation vocabulary token `{token}` must be a single bracket-free word"
                )));
            }
        }
        Ok(())
    }
}

/// Full backend description as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_name: String,
    /// Chat-completion endpoint URL (http_chat only).
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API credential
    /// (http_chat only); the value itself never appears in config or flags.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per attempt up to an internal cap.
    #[serde(default = "default_retry_delay_ms")]
    pub retry_initial_delay_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent_requests: usize,
    /// Hard cap on total logical calls for the run (http_chat only).
    #[serde(default)]
    pub request_budget: Option<u64>,
    /// Whether the endpoint can return per-token log-probabilities.
    #[serde(default)]
    pub supports_logprobs: bool,
    /// Determinism seed (mocks only; required for them).
    #[serde(default)]
    pub seed: Option<u64>,
    /// Behavior profile (mocks only; required for them).
    #[serde(default)]
    pub mock_profile: Option<MockProfile>,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_retry_delay_ms() -> u64 {
    500
}
fn default_max_concurrent() -> usize {
    4
}

impl BackendConfig {
    /// Minimal mock config used heavily in tests.
    pub fn mock(kind: BackendKind, seed: u64, profile: MockProfile) -> Self {
        BackendConfig {
            kind,
            model_name: format!("{kind}-model"),
            endpoint_url: None,
            api_key_env: None,
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_initial_delay_ms: default_retry_delay_ms(),
            max_concurrent_requests: default_max_concurrent(),
            request_budget: None,
            supports_logprobs: kind == BackendKind::MockScorer,
            seed: Some(seed),
            mock_profile: Some(profile),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint_url.as_deref().map_or(true, str::is_empty) {
                    return Err(Error::Config("http_chat backend needs endpoint_url".into()));
                }
                if self.api_key_env.as_deref().map_or(true, str::is_empty) {
                    return Err(Error::Config("http_chat backend needs api_key_env".into()));
                }
            }
            BackendKind::MockScorer | BackendKind::MockReference => {
                if self.seed.is_none() {
                    return Err(Error::Config(format!("{} backend needs a seed", self.kind)));
                }
                match &self.mock_profile {
                    None => {
                        return Err(Error::Config(format!(
                            "{} backend needs a mock_profile",
                            self.kind
                        )))
                    }
                    Some(p) => p.validate()?,
                }
            }
        }
        if self.model_name.trim().is_empty() {
            return Err(Error::Config("backend model_name is empty".into()));
        }
        Ok(())
    }
}

/// Object-safe interface every backend implements.
pub trait TextBackend: Send + Sync {
    /// Stable identifier for error messages and logs.
    fn id(&self) -> String;

    /// Complete `prompt` into text.
    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String>;

    /// Whether [`TextBackend::score_choice_logits`] can succeed.
    fn supports_choice_logits(&self) -> bool {
        false
    }

    /// Per-option confidence distribution for a multiple-choice item.
    fn score_choice_logits(&self, _prompt: &str, _item: &TaskItem) -> Result<ChoiceDistribution> {
        Err(Error::LogprobsUnsupported { backend: self.id() })
    }

    /// Hands the backend the task items it will be queried about. Mock
    /// scorers need this to recover item identity (and the gold answer)
    /// from a rendered prompt; other backends ignore it.
    fn bind_items(&self, _items: &[TaskItem]) {}
}

/// Construct the backend an operator configured.
pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn TextBackend>> {
    config.validate()?;
    match config.kind {
        BackendKind::HttpChat => Ok(Box::new(http::HttpChatBackend::from_config(config)?)),
        BackendKind::MockScorer => Ok(Box::new(mock::MockScorerBackend::from_config(config)?)),
        BackendKind::MockReference => {
            Ok(Box::new(mock::MockReferenceBackend::from_config(config)?))
        }
    }
}
