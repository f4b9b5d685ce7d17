//! Prompt scoring backends.
//!
//! [`MockPredictor`] is a keyword-logistic oracle used by tests and dry runs.
//! [`RemotePredictor`] posts prompts to an inference endpoint:
//!
//! ```text
//! POST {"input": "<prompt text>", "choices": ["No", "Yes"]}
//!   -> {"scores": [0.2, 0.8]}   aligned with choices
//!   -> {"text": "Yes"}          mapped through the verbalizer
//! ```
//!
//! The credential is read from an environment variable and sent as a bearer
//! token. At most `max_in_flight` requests are outstanding per predictor.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serialize::Prompt;
use crate::verbalize::Verbalizer;

pub const DEFAULT_AUTH_ENV_VAR: &str = "TABSERIAL_API_KEY";
/// Retries after the first attempt for transient failures.
pub const MAX_RETRIES: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
    #[error("credential environment variable {var} is not set")]
    MissingCredential { var: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s)")]
    Status { status: u16, attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("unparseable response: {0}")]
    Unparseable(String),
}

/// A scoring failure tied to the table row whose prompt caused it.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("row {row}: {source}")]
pub struct RowError {
    pub row: usize,
    #[source]
    pub source: PredictError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionScore {
    pub positive_probability: f64,
    pub raw_output: String,
    /// Set when free text matched neither verbalizer form set.
    pub unmatched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Mock,
    Remote,
}

fn default_auth_env_var() -> String {
    DEFAULT_AUTH_ENV_VAR.to_string()
}
fn default_timeout() -> f64 {
    30.0
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retry_base_ms() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    #[serde(default)]
    pub mock_weights: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub mock_bias: f64,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_auth_env_var")]
    pub auth_env_var: String,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay; doubles on each retry.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
}

impl PredictorConfig {
    pub fn mock(weights: BTreeMap<String, f64>, bias: f64) -> Self {
        Self {
            kind: PredictorKind::Mock,
            mock_weights: Some(weights),
            mock_bias: bias,
            endpoint_url: None,
            auth_env_var: default_auth_env_var(),
            timeout: default_timeout(),
            max_in_flight: 1,
            retry_base_ms: default_retry_base_ms(),
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, auth_env_var: impl Into<String>) -> Self {
        Self {
            kind: PredictorKind::Remote,
            mock_weights: None,
            mock_bias: 0.0,
            endpoint_url: Some(endpoint_url.into()),
            auth_env_var: auth_env_var.into(),
            timeout: default_timeout(),
            max_in_flight: default_max_in_flight(),
            retry_base_ms: default_retry_base_ms(),
        }
    }

    /// Checks field consistency and, for remote predictors, that the credential is present.
    pub fn validate(&self) -> Result<(), PredictError> {
        let invalid = |m: &str| Err(PredictError::InvalidConfig(m.to_string()));
        if self.max_in_flight == 0 {
            return invalid("max_in_flight must be at least 1");
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return invalid("timeout must be a positive number of seconds");
        }
        match self.kind {
            PredictorKind::Mock => match &self.mock_weights {
                None => invalid("mock predictor requires mock_weights"),
                Some(w) if w.values().chain([&self.mock_bias]).any(|v| !v.is_finite()) => {
                    invalid("mock weights and bias must be finite")
                }
                Some(_) => Ok(()),
            },
            PredictorKind::Remote => {
                let Some(url) = &self.endpoint_url else {
                    return invalid("remote predictor requires endpoint_url");
                };
                if reqwest::Url::parse(url).is_err() {
                    return Err(PredictError::InvalidConfig(format!(
                        "endpoint_url {url:?} is not a valid URL"
                    )));
                }
                read_credential(&self.auth_env_var).map(|_| ())
            }
        }
    }

    pub fn build(&self, verbalizer: &Verbalizer) -> Result<Box<dyn Predictor>, PredictError> {
        self.validate()?;
        Ok(match self.kind {
            PredictorKind::Mock => Box::new(MockPredictor::from_config(self)),
            PredictorKind::Remote => Box::new(RemotePredictor::new(self, verbalizer.clone())?),
        })
    }
}

fn read_credential(var: &str) -> Result<String, PredictError> {
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(PredictError::MissingCredential {
            var: var.to_string(),
        }),
    }
}

pub trait Predictor: Send + Sync {
    fn score(&self, prompt: &Prompt) -> Result<PredictionScore, PredictError>;

    /// Upper bound on concurrent `score` calls worth issuing.
    fn max_in_flight(&self) -> usize {
        1
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn thresholded_choice(prompt: &Prompt, p: f64) -> String {
    prompt.answer_choices()[usize::from(p >= 0.5)].clone()
}

/// `sigmoid(bias + sum of weights whose keyword occurs in the serialized row)`,
/// matching case-insensitively.
#[derive(Debug, Clone)]
pub struct MockPredictor {
    weights: Vec<(String, f64)>,
    bias: f64,
    max_in_flight: usize,
}

impl MockPredictor {
    pub fn new(weights: BTreeMap<String, f64>, bias: f64) -> Self {
        Self {
            weights: weights
                .into_iter()
                .map(|(k, w)| (k.to_lowercase(), w))
                .collect(),
            bias,
            max_in_flight: 1,
        }
    }

    fn from_config(config: &PredictorConfig) -> Self {
        let mut m = Self::new(
            config.mock_weights.clone().unwrap_or_default(),
            config.mock_bias,
        );
        m.max_in_flight = config.max_in_flight;
        m
    }

    pub fn logit(&self, text: &str) -> f64 {
        let text = text.to_lowercase();
        self.bias
            + self
                .weights
                .iter()
                .filter(|(k, _)| text.contains(k.as_str()))
                .map(|(_, w)| w)
                .sum::<f64>()
    }
}

impl Predictor for MockPredictor {
    fn score(&self, prompt: &Prompt) -> Result<PredictionScore, PredictError> {
        let p = sigmoid(self.logit(prompt.serialized_row()));
        Ok(PredictionScore {
            positive_probability: p,
            raw_output: thresholded_choice(prompt, p),
            unmatched: false,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    input: &'a str,
    choices: [&'a str; 2],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireResponse {
    Scores { scores: Vec<f64> },
    Text { text: String },
}

/// Probability of the positive choice from two aligned scores. Scores in
/// [0, 1] are treated as probabilities and renormalized; anything else as
/// log-probabilities or logits.
pub fn scores_to_probability(negative: f64, positive: f64) -> Result<f64, PredictError> {
    if !(negative.is_finite() && positive.is_finite()) {
        return Err(PredictError::Unparseable("non-finite score".into()));
    }
    let unit = 0.0..=1.0;
    if unit.contains(&negative) && unit.contains(&positive) {
        let total = negative + positive;
        Ok(if total > 0.0 { positive / total } else { 0.5 })
    } else {
        Ok(sigmoid(positive - negative))
    }
}

enum Failure {
    Transient(PredictError),
    Fatal(PredictError),
}

pub struct RemotePredictor {
    client: reqwest::blocking::Client,
    url: String,
    token: String,
    verbalizer: Verbalizer,
    in_flight: InFlight,
    retry_base: Duration,
}

impl fmt::Debug for RemotePredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemotePredictor")
            .field("url", &self.url)
            .field("token", &"<redacted>")
            .field("max_in_flight", &self.in_flight.limit)
            .finish()
    }
}

impl RemotePredictor {
    pub fn new(config: &PredictorConfig, verbalizer: Verbalizer) -> Result<Self, PredictError> {
        let url = config.endpoint_url.clone().ok_or_else(|| {
            PredictError::InvalidConfig("remote predictor requires endpoint_url".into())
        })?;
        let token = read_credential(&config.auth_env_var)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout))
            .build()
            .map_err(|e| PredictError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            client,
            url,
            token,
            verbalizer,
            in_flight: InFlight::new(config.max_in_flight.max(1)),
            retry_base: Duration::from_millis(config.retry_base_ms),
        })
    }

    fn attempt(&self, prompt: &Prompt, attempts: u32) -> Result<String, Failure> {
        let _permit = self.in_flight.acquire();
        let input = prompt.input_text();
        let [neg, pos] = prompt.answer_choices();
        let body = WireRequest {
            input: &input,
            choices: [neg, pos],
        };
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Failure::Transient(PredictError::Timeout { attempts })
                } else {
                    // the message never includes request headers
                    Failure::Transient(PredictError::Transport {
                        message: e.to_string(),
                        attempts,
                    })
                }
            })?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Transient(PredictError::Status {
                status: status.as_u16(),
                attempts,
            }));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(PredictError::Status {
                status: status.as_u16(),
                attempts,
            }));
        }
        response.text().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(PredictError::Timeout { attempts })
            } else {
                Failure::Fatal(PredictError::Unparseable(e.to_string()))
            }
        })
    }

    fn interpret(&self, prompt: &Prompt, body: &str) -> Result<PredictionScore, PredictError> {
        let parsed: WireResponse =
            serde_json::from_str(body).map_err(|e| PredictError::Unparseable(e.to_string()))?;
        match parsed {
            WireResponse::Scores { scores } => {
                let [negative, positive] = scores[..] else {
                    return Err(PredictError::Unparseable(format!(
                        "expected 2 scores, got {}",
                        scores.len()
                    )));
                };
                let p = scores_to_probability(negative, positive)?;
                Ok(PredictionScore {
                    positive_probability: p,
                    raw_output: thresholded_choice(prompt, p),
                    unmatched: false,
                })
            }
            WireResponse::Text { text } => Ok(self.verbalizer.map_output(&text)),
        }
    }
}

impl Predictor for RemotePredictor {
    fn score(&self, prompt: &Prompt) -> Result<PredictionScore, PredictError> {
        let mut retries = 0;
        loop {
            match self.attempt(prompt, retries + 1) {
                Ok(body) => return self.interpret(prompt, &body),
                Err(Failure::Transient(e)) if retries < MAX_RETRIES => {
                    log::debug!("transient failure ({e}), retrying");
                    thread::sleep(self.retry_base * 2u32.pow(retries));
                    retries += 1;
                }
                Err(Failure::Transient(e) | Failure::Fatal(e)) => return Err(e),
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }
}

/// Scores `(row, prompt)` pairs with up to `predictor.max_in_flight()` workers.
/// Results come back in input order; on failure the lowest failing row is reported.
pub fn score_prompts(
    predictor: &dyn Predictor,
    prompts: &[(usize, Prompt)],
) -> Result<Vec<PredictionScore>, RowError> {
    let workers = predictor.max_in_flight().clamp(1, prompts.len().max(1));
    let results: Vec<Result<PredictionScore, PredictError>> = if workers == 1 {
        prompts.iter().map(|(_, p)| predictor.score(p)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<PredictionScore, PredictError>>>> =
            Mutex::new(vec![None; prompts.len()]);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((_, prompt)) = prompts.get(i) else {
                        break;
                    };
                    let r = predictor.score(prompt);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("every slot is filled"))
            .collect()
    };
    prompts
        .iter()
        .zip(results)
        .map(|((row, _), r)| r.map_err(|source| RowError { row: *row, source }))
        .collect()
}
