//! Wire-level chat-completion client for real reference/scorer models.
//!
//! Speaks the common chat-completions shape: POST JSON with `model`,
//! `messages`, `temperature`, `max_tokens`, `logprobs` (plus `seed`/`stop`
//! when set), bearer-authenticated with a credential read from the
//! environment variable named in config — the key value never appears in
//! config files or flags, and a missing variable fails construction before
//! any network traffic.
//!
//! Transient failures (HTTP 429, any 5xx, timeouts, connection errors) are
//! retried with exponential backoff up to `max_retries`; other 4xx statuses
//! fail immediately. A per-run budget caps total logical calls (retries
//! within a call are not re-billed), and a concurrency gate bounds in-flight
//! requests across worker threads.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use crate::backend::{BackendConfig, BackendKind, ChoiceDistribution, GenParams, TextBackend};
use crate::dataset::TaskItem;
use crate::error::{Error, Result};

/// Backoff doubles per attempt but never exceeds this.
const MAX_RETRY_DELAY_MS: u64 = 10_000;
/// Error bodies are truncated to this many characters in error details.
const BODY_EXCERPT_CHARS: usize = 200;
/// How many top log-probabilities to request per token position.
const TOP_LOGPROBS: u32 = 20;

/// Counting semaphore bounding concurrent in-flight requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct GatePermit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Gate {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("gate wait");
        }
        *n += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: String,
    max_retries: u32,
    retry_initial_delay_ms: u64,
    budget: Option<u64>,
    calls: AtomicU64,
    gate: Gate,
    supports_logprobs: bool,
}

impl HttpChatBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        if config.kind != BackendKind::HttpChat {
            return Err(Error::Config(format!(
                "expected http_chat config, got {}",
                config.kind
            )));
        }
        let key_env = config.api_key_env.as_deref().expect("validated");
        let api_key = std::env::var(key_env)
            .map_err(|_| Error::MissingCredential(key_env.to_string()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("failed to build HTTP client: {e}")))?;
        Ok(HttpChatBackend {
            client,
            endpoint: config.endpoint_url.clone().expect("validated"),
            model: config.model_name.clone(),
            api_key,
            max_retries: config.max_retries,
            retry_initial_delay_ms: config.retry_initial_delay_ms,
            budget: config.request_budget,
            calls: AtomicU64::new(0),
            gate: Gate::new(config.max_concurrent_requests),
            supports_logprobs: config.supports_logprobs,
        })
    }

    /// Total logical calls made so far (retries not counted).
    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn charge_budget(&self) -> Result<()> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.budget {
            if n >= limit {
                return Err(Error::BudgetExhausted { limit });
            }
        }
        Ok(())
    }

    fn chat_body(&self, prompt: &str, params: &GenParams, logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "logprobs": logprobs,
        });
        if logprobs {
            body["top_logprobs"] = json!(TOP_LOGPROBS);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if !params.stop_sequences.is_empty() {
            body["stop"] = json!(params.stop_sequences);
        }
        body
    }

    /// One logical call: POST with retry on transient failures only.
    fn post(&self, body: &Value) -> Result<Value> {
        self.charge_budget()?;
        let mut delay = self.retry_initial_delay_ms.max(1);
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = self.gate.acquire();
                self.client
                    .post(&self.endpoint)
                    .bearer_auth(&self.api_key)
                    .json(body)
                    .send()
            };
            let retryable = match outcome {
                Ok(resp) => {
                    let code = resp.status().as_u16();
                    if resp.status().is_success() {
                        return resp.json::<Value>().map_err(|e| {
                            Error::MalformedResponse(format!("response body is not JSON: {e}"))
                        });
                    }
                    let detail: String = resp
                        .text()
                        .unwrap_or_default()
                        .chars()
                        .take(BODY_EXCERPT_CHARS)
                        .collect();
                    let err = Error::HttpStatus { status: code, detail };
                    if code == 429 || (500..=599).contains(&code) {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => {
                    let err = Error::HttpTransport(e.to_string());
                    if e.is_timeout() || e.is_connect() {
                        err
                    } else {
                        return Err(err);
                    }
                }
            };
            if attempt >= self.max_retries {
                return Err(retryable);
            }
            attempt += 1;
            std::thread::sleep(Duration::from_millis(delay));
            delay = (delay * 2).min(MAX_RETRY_DELAY_MS);
        }
    }
}

fn first_choice<'v>(response: &'v Value, path_hint: &str) -> Result<&'v Value> {
    response
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::MalformedResponse(format!("response lacks choices[0] ({path_hint})")))
}

impl TextBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http_chat:{}", self.model)
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<String> {
        let response = self.post(&self.chat_body(prompt, params, false))?;
        first_choice(&response, "generate")?
            .pointer("/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Error::MalformedResponse("response lacks choices[0].message.content".into())
            })
    }

    fn supports_choice_logits(&self) -> bool {
        self.supports_logprobs
    }

    fn score_choice_logits(&self, prompt: &str, item: &TaskItem) -> Result<ChoiceDistribution> {
        if !self.supports_logprobs {
            return Err(Error::LogprobsUnsupported { backend: self.id() });
        }
        let mut params = GenParams::scorer();
        params.max_tokens = 1;
        let response = self.post(&self.chat_body(prompt, &params, true))?;
        let top = first_choice(&response, "logits")?
            .pointer("/logprobs/content/0/top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| {
                Error::MalformedResponse(
                    "response lacks choices[0].logprobs.content[0].top_logprobs".into(),
                )
            })?;

        let mut by_letter: BTreeMap<char, f64> = BTreeMap::new();
        for entry in top {
            let token = entry.get("token").and_then(Value::as_str).unwrap_or("");
            let lp = entry.get("logprob").and_then(Value::as_f64);
            let trimmed = token.trim();
            if trimmed.chars().count() == 1 {
                if let (Some(letter), Some(lp)) = (trimmed.chars().next(), lp) {
                    // Keep the best log-probability per letter token form.
                    by_letter
                        .entry(letter)
                        .and_modify(|v| *v = v.max(lp))
                        .or_insert(lp);
                }
            }
        }

        let mut restricted = BTreeMap::new();
        for letter in item.letters() {
            match by_letter.get(&letter) {
                Some(&lp) => {
                    restricted.insert(letter, lp);
                }
                None => return Err(Error::MissingOptionLogprob { letter }),
            }
        }
        ChoiceDistribution::from_logprobs(restricted)
    }
}
