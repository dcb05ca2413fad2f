//! Language-model gateway.
//!
//! Every model capability the pipeline needs (completion, sequence scoring,
//! masked-token candidates, embeddings, optional classification) goes
//! through [`Gateway`], which wraps a [`LanguageModel`] backend with request
//! validation, a context budget, stop-string truncation, response checks and
//! a bound on in-flight requests.
//!
//! Backends: [`mock::MockBackend`] (deterministic, in-process) and
//! [`http::HttpBackend`] (JSON over HTTP). [`server`] exposes any backend
//! over the same wire protocol.

pub mod http;
pub mod mock;
pub mod server;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::text;

/// Default context window, in tokens.
pub const DEFAULT_CONTEXT_BUDGET: usize = 2048;
/// Default bound on concurrent in-flight requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
/// Tolerance on the total probability mass of a candidate set.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub seed: u64,
}

impl CompletionRequest {
    /// Greedy single-sample request with the default decoding parameters
    /// (top-p 0.9, temperature 0).
    pub fn greedy(prompt: impl Into<String>, max_tokens: usize) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens,
            top_p: 0.9,
            temperature: 0.0,
            stop: Vec::new(),
            n_samples: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest(
                "top_p must lie in (0, 1]".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub text: String,
}

/// Per-token conditional log-probabilities of a text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenLogProbs {
    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(GatewayError::InvalidResponse(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.logprobs.len()
            )));
        }
        if let Some(lp) = self.logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(GatewayError::InvalidResponse(format!("logprob {lp} > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillMaskRequest {
    pub tokens: Vec<String>,
    pub position: usize,
    pub top_k: usize,
    /// Tokens whose probability at the masked slot is requested directly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillMaskResponse {
    pub candidates: Vec<Candidate>,
    /// Aligned with the request's `targets`; absent when the backend does
    /// not support direct lookups.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_probs: Vec<f64>,
}

/// Top-k candidates for one masked position, descending by probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCandidateSet {
    pub position: usize,
    pub candidates: Vec<Candidate>,
}

impl MaskCandidateSet {
    pub fn prob_of(&self, token: &str) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.token == token)
            .map(|c| c.prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Token,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
    pub granularity: Granularity,
}

/// Wire form of an embedding response. For token granularity `vectors` is
/// the concatenation of every text's token vectors and `counts` gives the
/// number of tokens per text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingResult {
    pub granularity: Granularity,
    pub vectors: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl EmbeddingResult {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Vectors grouped per input text.
    pub fn per_text(&self) -> Vec<&[Vec<f64>]> {
        let mut out = Vec::with_capacity(self.counts.len());
        let mut start = 0;
        for &c in &self.counts {
            out.push(&self.vectors[start..start + c]);
            start += c;
        }
        out
    }

    fn from_wire(
        granularity: Granularity,
        n_texts: usize,
        resp: EmbedResponse,
    ) -> Result<Self, GatewayError> {
        let counts = match (granularity, resp.counts) {
            (Granularity::Sentence, _) => vec![1; n_texts],
            (Granularity::Token, Some(c)) => c,
            (Granularity::Token, None) => {
                return Err(GatewayError::InvalidResponse(
                    "token embeddings without per-text counts".into(),
                ))
            }
        };
        if counts.len() != n_texts || counts.iter().sum::<usize>() != resp.vectors.len() {
            return Err(GatewayError::InvalidResponse(format!(
                "{} vectors do not match counts for {} texts",
                resp.vectors.len(),
                n_texts
            )));
        }
        let result = EmbeddingResult {
            granularity,
            vectors: resp.vectors,
            counts,
        };
        let dim = result.dim();
        if result.vectors.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::DimensionMismatch);
        }
        if result.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GatewayError::InvalidResponse(
                "non-finite embedding entry".into(),
            ));
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub text: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("prompt of {prompt_tokens} tokens plus {max_tokens} generated exceeds the {budget}-token context")]
    ContextOverflow {
        prompt_tokens: usize,
        max_tokens: usize,
        budget: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("empty input")]
    EmptyInput,
    #[error("mask position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("embedding dimension mismatch")]
    DimensionMismatch,
    #[error("capability `{0}` is not configured")]
    CapabilityNotConfigured(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("backend error {code}: {message}")]
    Backend { code: String, message: String },
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
}

impl GatewayError {
    /// Wire error code.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::ContextOverflow { .. } => "context_overflow",
            GatewayError::InvalidRequest(_) => "invalid_request",
            GatewayError::EmptyInput => "empty_input",
            GatewayError::PositionOutOfRange { .. } => "position_out_of_range",
            GatewayError::DimensionMismatch => "dimension_mismatch",
            GatewayError::CapabilityNotConfigured(_) => "capability_not_configured",
            GatewayError::Transport { .. } => "transport",
            GatewayError::Backend { .. } => "backend_error",
            GatewayError::InvalidResponse(_) => "invalid_response",
        }
    }

    /// Rebuilds an error from a wire payload.
    pub fn from_wire(body: ErrorBody) -> Self {
        match body.code.as_str() {
            "capability_not_configured" => GatewayError::CapabilityNotConfigured(body.message),
            "empty_input" => GatewayError::EmptyInput,
            "dimension_mismatch" => GatewayError::DimensionMismatch,
            "invalid_request" | "position_out_of_range" | "context_overflow" => {
                GatewayError::InvalidRequest(body.message)
            }
            _ => GatewayError::Backend {
                code: body.code,
                message: body.message,
            },
        }
    }
}

/// A model backend. Implementations must be deterministic for a fixed
/// request when the request asks for greedy decoding.
pub trait LanguageModel: Send + Sync {
    /// Human-readable identity recorded in run manifests.
    fn identity(&self) -> String;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
    fn score(&self, text: &str) -> Result<TokenLogProbs, GatewayError>;
    fn fill_mask(&self, req: &FillMaskRequest) -> Result<FillMaskResponse, GatewayError>;
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, GatewayError>;
    fn classify(&self, text: &str, task: Task) -> Result<f64, GatewayError>;
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Truncates at the earliest occurrence of any stop string.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

/// Shareable, validating front-end over a backend.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn LanguageModel>,
    limiter: Arc<Limiter>,
    context_budget: usize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LanguageModel>) -> Self {
        Gateway {
            backend,
            limiter: Arc::new(Limiter::new(DEFAULT_MAX_IN_FLIGHT)),
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }

    pub fn with_context_budget(mut self, budget: usize) -> Self {
        self.context_budget = budget;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = Arc::new(Limiter::new(max));
        self
    }

    pub fn context_budget(&self) -> usize {
        self.context_budget
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    /// Client-side prompt length, measured with [`text::tokenize`].
    pub fn count_tokens(&self, text: &str) -> usize {
        text::tokenize(text).len()
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, GatewayError> {
        req.validate()?;
        let prompt_tokens = self.count_tokens(&req.prompt);
        if prompt_tokens + req.max_tokens > self.context_budget {
            return Err(GatewayError::ContextOverflow {
                prompt_tokens,
                max_tokens: req.max_tokens,
                budget: self.context_budget,
            });
        }
        let resp = {
            let _permit = self.limiter.acquire();
            self.backend.complete(req)?
        };
        if resp.choices.len() != req.n_samples {
            return Err(GatewayError::InvalidResponse(format!(
                "requested {} completions, got {}",
                req.n_samples,
                resp.choices.len()
            )));
        }
        Ok(resp
            .choices
            .into_iter()
            .map(|c| truncate_at_stop(&c.text, &req.stop))
            .collect())
    }

    pub fn score_sequence(&self, text: &str) -> Result<TokenLogProbs, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let out = {
            let _permit = self.limiter.acquire();
            self.backend.score(text)?
        };
        out.check()?;
        Ok(out)
    }

    pub fn fill_mask(
        &self,
        tokens: &[String],
        position: usize,
        top_k: usize,
    ) -> Result<MaskCandidateSet, GatewayError> {
        self.fill_mask_with_targets(tokens, position, top_k, &[])
            .map(|(set, _)| set)
    }

    /// Like [`Gateway::fill_mask`], also asking for the probability of each
    /// target token. Returns `None` per target the backend did not report.
    pub fn fill_mask_with_targets(
        &self,
        tokens: &[String],
        position: usize,
        top_k: usize,
        targets: &[String],
    ) -> Result<(MaskCandidateSet, Vec<Option<f64>>), GatewayError> {
        if position >= tokens.len() {
            return Err(GatewayError::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        if top_k == 0 {
            return Err(GatewayError::InvalidRequest("top_k must be >= 1".into()));
        }
        let mut masked = tokens.to_vec();
        masked[position] = text::MASK_TOKEN.to_string();
        let req = FillMaskRequest {
            tokens: masked,
            position,
            top_k,
            targets: targets.to_vec(),
        };
        let resp = {
            let _permit = self.limiter.acquire();
            self.backend.fill_mask(&req)?
        };
        check_candidates(&resp.candidates, top_k)?;
        let target_probs = if resp.target_probs.len() == targets.len() {
            resp.target_probs.iter().map(|&p| Some(p)).collect()
        } else {
            vec![None; targets.len()]
        };
        let set = MaskCandidateSet {
            position,
            candidates: resp.candidates,
        };
        let target_probs = targets
            .iter()
            .zip(target_probs)
            .map(|(t, direct)| direct.or_else(|| set.prob_of(t)))
            .collect();
        Ok((set, target_probs))
    }

    pub fn embed(
        &self,
        texts: &[String],
        granularity: Granularity,
    ) -> Result<EmbeddingResult, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let req = EmbedRequest {
            texts: texts.to_vec(),
            granularity,
        };
        let resp = {
            let _permit = self.limiter.acquire();
            self.backend.embed(&req)?
        };
        EmbeddingResult::from_wire(granularity, texts.len(), resp)
    }

    pub fn classify(&self, text: &str, task: Task) -> Result<f64, GatewayError> {
        let p = {
            let _permit = self.limiter.acquire();
            self.backend.classify(text, task)?
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(GatewayError::InvalidResponse(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(p)
    }
}

fn check_candidates(cands: &[Candidate], top_k: usize) -> Result<(), GatewayError> {
    if cands.len() > top_k {
        return Err(GatewayError::InvalidResponse(format!(
            "{} candidates for top_k {top_k}",
            cands.len()
        )));
    }
    if cands.iter().any(|c| !(c.prob > 0.0 && c.prob <= 1.0)) {
        return Err(GatewayError::InvalidResponse(
            "candidate probability outside (0, 1]".into(),
        ));
    }
    if cands.windows(2).any(|w| w[0].prob < w[1].prob) {
        return Err(GatewayError::InvalidResponse(
            "candidates not sorted by probability".into(),
        ));
    }
    let mass: f64 = cands.iter().map(|c| c.prob).sum();
    if mass > 1.0 + MASS_TOLERANCE {
        return Err(GatewayError::InvalidResponse(format!(
            "candidate mass {mass} exceeds 1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_truncation_takes_earliest() {
        let stops = vec!["\n".to_string(), "def".to_string()];
        assert_eq!(truncate_at_stop("abc\ndef", &stops), "abc");
        assert_eq!(truncate_at_stop("abcdef\n", &stops), "abc");
        assert_eq!(truncate_at_stop("abc", &[]), "abc");
    }

    #[test]
    fn request_validation() {
        let mut r = CompletionRequest::greedy("p", 1);
        r.validate().unwrap();
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        let mut r = CompletionRequest::greedy("p", 1);
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        r.top_p = 1.0;
        r.temperature = -0.1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn wire_field_names() {
        let r = CompletionRequest {
            prompt: "x".into(),
            max_tokens: 5,
            top_p: 0.9,
            temperature: 0.0,
            stop: vec!["\n".into()],
            n_samples: 2,
            seed: 3,
        };
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "max_tokens",
                "n",
                "prompt",
                "seed",
                "stop",
                "temperature",
                "top_p"
            ]
        );
        let fm = serde_json::to_value(FillMaskRequest {
            tokens: vec!["a".into()],
            position: 0,
            top_k: 1,
            targets: vec![],
        })
        .unwrap();
        assert_eq!(
            fm,
            serde_json::json!({"tokens": ["a"], "position": 0, "top_k": 1})
        );
        let e = serde_json::to_value(EmbedRequest {
            texts: vec!["a".into()],
            granularity: Granularity::Sentence,
        })
        .unwrap();
        assert_eq!(
            e,
            serde_json::json!({"texts": ["a"], "granularity": "sentence"})
        );
    }

    #[test]
    fn candidate_checks() {
        let c = |t: &str, p: f64| Candidate {
            token: t.into(),
            prob: p,
        };
        assert!(check_candidates(&[c("a", 0.5), c("b", 0.4)], 2).is_ok());
        assert!(check_candidates(&[c("a", 0.4), c("b", 0.5)], 2).is_err());
        assert!(check_candidates(&[c("a", 0.7), c("b", 0.6)], 2).is_err());
        assert!(check_candidates(&[c("a", 0.5)], 0).is_err());
        assert!(check_candidates(&[c("a", 0.0)], 1).is_err());
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let limiter = Arc::new(Limiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (l, a, p) = (limiter.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _g = l.acquire();
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    a.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
