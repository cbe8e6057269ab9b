//! Generation-backend driving.
//!
//! The wire contract is a minimal completion API: POST a JSON request
//! `{prompt, mode, ...decoding params}` and get back
//! `{outputs: [{text, score}, ...]}`. Adapters for concrete services sit
//! behind [`Transport`]; tests and offline runs use [`MockBackend`], a pure
//! function of (prompt, seed, params) that draws candidate responses from a
//! fixture catalog by hash.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, mix64, SplitMix64};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid decoding params: {0}")]
    InvalidParams(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("backend unreachable after {attempts} attempts: {reason}")]
    BackendUnreachable { attempts: u32, reason: String },
    #[error("backend rejected request: status {status}: {body}")]
    BackendRejected { status: u16, body: String },
    #[error("backend timed out")]
    Timeout,
}

/// Decoding settings, mode-tagged so sampling requests carry no beam fields
/// and beam requests carry no sampling fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodingParams {
    Sampling {
        temperature: f64,
        top_p: f64,
        top_k: u32,
        max_new_tokens: u32,
    },
    Beam {
        beam_size: u32,
        max_new_tokens: u32,
    },
}

pub const SAMPLING_TEMPERATURE: f64 = 1.0;
pub const SAMPLING_TOP_P: f64 = 0.9;
pub const SAMPLING_TOP_K: u32 = 50;
pub const BEAM_SIZE: u32 = 10;
pub const MAX_NEW_TOKENS_RATING: u32 = 16;
pub const MAX_NEW_TOKENS_SEQREC: u32 = 64;

impl DecodingParams {
    /// Rating-task default: sampling at temperature 1.0, top_p 0.9, top_k 50.
    pub fn sampling_default() -> Self {
        DecodingParams::Sampling {
            temperature: SAMPLING_TEMPERATURE,
            top_p: SAMPLING_TOP_P,
            top_k: SAMPLING_TOP_K,
            max_new_tokens: MAX_NEW_TOKENS_RATING,
        }
    }

    /// Seqrec-task default: beam search with 10 beams.
    pub fn beam_default() -> Self {
        DecodingParams::Beam {
            beam_size: BEAM_SIZE,
            max_new_tokens: MAX_NEW_TOKENS_SEQREC,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let fail = |msg: String| Err(GenerationError::InvalidParams(msg));
        match *self {
            DecodingParams::Sampling { temperature, top_p, top_k, max_new_tokens } => {
                if temperature <= 0.0 {
                    return fail(format!("temperature {temperature} must be positive"));
                }
                if !(top_p > 0.0 && top_p <= 1.0) {
                    return fail(format!("top_p {top_p} must be in (0, 1]"));
                }
                if top_k == 0 {
                    return fail("top_k must be at least 1".into());
                }
                if max_new_tokens == 0 {
                    return fail("max_new_tokens must be at least 1".into());
                }
            }
            DecodingParams::Beam { beam_size, max_new_tokens } => {
                if beam_size == 0 {
                    return fail("beam_size must be at least 1".into());
                }
                if max_new_tokens == 0 {
                    return fail("max_new_tokens must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn expected_outputs(&self) -> usize {
        match *self {
            DecodingParams::Sampling { .. } => 1,
            DecodingParams::Beam { beam_size, .. } => beam_size as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedOutput {
    pub text: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub outputs: Vec<GeneratedOutput>,
    pub backend_id: String,
    #[serde(skip)]
    pub latency: Duration,
    /// Set when a beam backend returned fewer outputs than beams requested.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

pub trait Backend: Send + Sync {
    fn backend_id(&self) -> String;
    fn generate(&self, prompt: &str, params: &DecodingParams)
        -> Result<GenerationResult, GenerationError>;
}

/// Validates inputs, delegates to the backend, and normalizes the output
/// ordering (scores non-increasing).
pub fn generate(
    backend: &dyn Backend,
    prompt: &str,
    params: &DecodingParams,
) -> Result<GenerationResult, GenerationError> {
    if prompt.trim().is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    params.validate()?;
    let mut result = backend.generate(prompt, params)?;
    result
        .outputs
        .sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    if result.outputs.len() < params.expected_outputs() {
        result.truncated = true;
    }
    Ok(result)
}

/// Runs a batch with at most `max_in_flight` requests outstanding.
///
/// Results come back in prompt order regardless of completion order, and a
/// failing prompt yields an error record instead of aborting the batch.
pub fn run_batch(
    prompts: &[(String, String)],
    params: &DecodingParams,
    backend: &dyn Backend,
    max_in_flight: usize,
) -> Vec<(String, Result<GenerationResult, GenerationError>)> {
    assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
    let cursor = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GenerationResult, GenerationError>>>> =
        Mutex::new((0..prompts.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.min(prompts.len()) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let outcome = generate(backend, &prompts[i].1, params);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, outcome)| (prompts[i].0.clone(), outcome.expect("every slot filled")))
        .collect()
}

/// How the mock treats the known truth response for a prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    /// Candidates are drawn purely by hash; the truth may or may not appear.
    #[default]
    #[serde(alias = "hash")]
    FromHash,
    /// The truth response always appears among the outputs.
    #[serde(alias = "always")]
    AlwaysInclude,
    /// The truth response never appears among the outputs.
    #[serde(alias = "never")]
    NeverInclude,
}

/// Deterministic offline backend: output selection is a pure function of
/// (prompt, seed, params) over a fixture catalog of candidate responses.
pub struct MockBackend {
    catalog: Vec<String>,
    seed: u64,
    truths: HashMap<String, String>,
    truth_mode: TruthMode,
}

impl MockBackend {
    pub fn new(catalog: Vec<String>, seed: u64) -> Self {
        Self { catalog, seed, truths: HashMap::new(), truth_mode: TruthMode::FromHash }
    }

    /// Registers per-prompt truth responses and how to treat them.
    pub fn with_truths(mut self, truths: HashMap<String, String>, mode: TruthMode) -> Self {
        self.truths = truths;
        self.truth_mode = mode;
        self
    }

    fn rng_for(&self, prompt: &str) -> SplitMix64 {
        SplitMix64::new(mix64(fnv1a64(prompt.as_bytes()) ^ mix64(self.seed)))
    }

    /// Up to `want` distinct candidates, honoring the truth mode.
    fn pick(&self, prompt: &str, want: usize) -> Vec<String> {
        let truth = self.truths.get(prompt);
        let pool: Vec<&String> = match (self.truth_mode, truth) {
            (TruthMode::NeverInclude, Some(t)) => {
                self.catalog.iter().filter(|c| *c != t).collect()
            }
            _ => self.catalog.iter().collect(),
        };
        let mut rng = self.rng_for(prompt);
        let mut picked: Vec<String> = Vec::with_capacity(want);
        let mut used = std::collections::BTreeSet::new();

        if self.truth_mode == TruthMode::AlwaysInclude {
            if let Some(t) = truth {
                picked.push(t.clone());
                used.insert(t.clone());
            }
        }
        if !pool.is_empty() {
            // A seeded shuffle of the pool keeps selection a pure function
            // of (prompt, seed) and never under-fills while candidates
            // remain.
            let mut order: Vec<usize> = (0..pool.len()).collect();
            rng.shuffle(&mut order);
            for idx in order {
                if picked.len() >= want {
                    break;
                }
                let candidate = pool[idx];
                if used.insert(candidate.clone()) {
                    picked.push(candidate.clone());
                }
            }
        }
        picked.truncate(want);
        // Rank the non-truth candidates by hash order but keep a forced
        // truth at a hash-chosen position rather than always first.
        if self.truth_mode == TruthMode::AlwaysInclude && picked.len() > 1 {
            let target = rng.next_below(picked.len() as u64) as usize;
            let first = picked.remove(0);
            picked.insert(target, first);
        }
        picked
    }
}

impl Backend for MockBackend {
    fn backend_id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn generate(
        &self,
        prompt: &str,
        params: &DecodingParams,
    ) -> Result<GenerationResult, GenerationError> {
        let started = Instant::now();
        let want = params.expected_outputs();
        let picked = self.pick(prompt, want);
        if picked.is_empty() {
            return Err(GenerationError::BackendRejected {
                status: 0,
                body: "mock catalog has no eligible candidates".into(),
            });
        }
        let outputs = picked
            .into_iter()
            .enumerate()
            .map(|(rank, text)| GeneratedOutput { text, score: -(rank as f64) })
            .collect::<Vec<_>>();
        let truncated = outputs.len() < want;
        Ok(GenerationResult {
            outputs,
            backend_id: self.backend_id(),
            latency: started.elapsed(),
            truncated,
        })
    }
}

/// Request body for the completion wire protocol.
#[derive(Serialize)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    #[serde(flatten)]
    pub params: &'a DecodingParams,
}

#[derive(Deserialize)]
pub struct CompletionResponse {
    pub outputs: Vec<GeneratedOutput>,
}

#[derive(Debug)]
pub enum TransportError {
    Unreachable(String),
    Timeout,
    Status { code: u16, body: String },
}

/// One HTTP POST. Swappable so tests can record or fail requests without a
/// network.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &str) -> Result<String, TransportError>;
}

/// Production transport over ureq.
pub struct UreqTransport {
    pub timeout: Duration,
    pub auth_token: Option<String>,
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, body: &str) -> Result<String, TransportError> {
        let mut request = ureq::post(url)
            .config()
            .timeout_global(Some(self.timeout))
            .build()
            .header("content-type", "application/json");
        if let Some(token) = &self.auth_token {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        match request.send(body) {
            Ok(mut response) => response
                .body_mut()
                .read_to_string()
                .map_err(|e| TransportError::Unreachable(e.to_string())),
            Err(ureq::Error::StatusCode(code)) => {
                Err(TransportError::Status { code, body: String::new() })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout),
            Err(other) => Err(TransportError::Unreachable(other.to_string())),
        }
    }
}

/// Completion-API client with bounded-backoff retries on transient errors.
pub struct HttpBackend<T: Transport> {
    endpoint: String,
    pub transport: T,
    retries: u32,
    backoff_base: Duration,
}

impl HttpBackend<UreqTransport> {
    /// Reads the bearer token from the named environment variable, if set.
    pub fn new(endpoint: &str, timeout: Duration, retries: u32, auth_env: Option<&str>) -> Self {
        let auth_token = auth_env.and_then(|var| std::env::var(var).ok());
        HttpBackend {
            endpoint: endpoint.to_string(),
            transport: UreqTransport { timeout, auth_token },
            retries,
            backoff_base: Duration::from_millis(100),
        }
    }
}

impl<T: Transport> HttpBackend<T> {
    pub fn with_transport(endpoint: &str, transport: T, retries: u32) -> Self {
        HttpBackend {
            endpoint: endpoint.to_string(),
            transport,
            retries,
            backoff_base: Duration::from_millis(1),
        }
    }

    pub fn request_body(prompt: &str, params: &DecodingParams) -> String {
        serde_json::to_string(&CompletionRequest { prompt, params })
            .expect("completion request serializes")
    }
}

impl<T: Transport> Backend for HttpBackend<T> {
    fn backend_id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn generate(
        &self,
        prompt: &str,
        params: &DecodingParams,
    ) -> Result<GenerationResult, GenerationError> {
        let started = Instant::now();
        let body = Self::request_body(prompt, params);
        let mut last_reason = String::new();
        let mut attempts = 0;
        while attempts <= self.retries {
            attempts += 1;
            match self.transport.post_json(&self.endpoint, &body) {
                Ok(text) => {
                    let parsed: CompletionResponse =
                        serde_json::from_str(&text).map_err(|e| {
                            GenerationError::BackendRejected {
                                status: 200,
                                body: format!("unparseable response: {e}"),
                            }
                        })?;
                    return Ok(GenerationResult {
                        outputs: parsed.outputs,
                        backend_id: self.backend_id(),
                        latency: started.elapsed(),
                        truncated: false,
                    });
                }
                // Client errors are final; everything else retries.
                Err(TransportError::Status { code, body }) if (400..500).contains(&code) => {
                    return Err(GenerationError::BackendRejected { status: code, body });
                }
                Err(TransportError::Status { code, body }) => {
                    last_reason = format!("status {code}: {body}");
                }
                Err(TransportError::Timeout) => {
                    last_reason = "timeout".into();
                }
                Err(TransportError::Unreachable(reason)) => {
                    last_reason = reason;
                }
            }
            if attempts <= self.retries {
                std::thread::sleep(self.backoff_base * 2u32.saturating_pow(attempts - 1));
            }
        }
        if last_reason == "timeout" {
            return Err(GenerationError::Timeout);
        }
        Err(GenerationError::BackendUnreachable { attempts, reason: last_reason })
    }
}
