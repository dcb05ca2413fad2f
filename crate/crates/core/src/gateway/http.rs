//! JSON-over-HTTP backend speaking the `/v1/*` wire protocol.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    ClassifyRequest, ClassifyResponse, CompletionRequest, CompletionResponse, EmbedRequest,
    EmbedResponse, ErrorResponse, FillMaskRequest, FillMaskResponse, GatewayError, LanguageModel,
    ScoreRequest, TokenLogProbs,
};
use crate::corpus::Task;

pub const DEFAULT_RETRIES: usize = 3;
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(100);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    /// Retries after the first attempt on transport failures and on
    /// 429/502/503/504 responses.
    pub retries: usize,
    /// First backoff delay; doubles on each retry.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            retries: DEFAULT_RETRIES,
            backoff: DEFAULT_BACKOFF,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend { config, client })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, GatewayError> {
        let url = format!("{}{}", self.config.base_url, path);
        let mut delay = self.config.backoff;
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.try_post(&url, body) {
                Ok(resp) => return Ok(resp),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{url}: attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }

    fn try_post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        body: &Req,
    ) -> Result<Resp, Attempt> {
        let resp = self
            .client
            .post(url)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(GatewayError::InvalidResponse(e.to_string())));
        }
        if matches!(status.as_u16(), 429 | 502 | 503 | 504) {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        Err(Attempt::Fatal(
            match serde_json::from_str::<ErrorResponse>(&text) {
                Ok(e) => GatewayError::from_wire(e.error),
                Err(_) => GatewayError::Backend {
                    code: format!("http_{}", status.as_u16()),
                    message: text,
                },
            },
        ))
    }
}

impl LanguageModel for HttpBackend {
    fn identity(&self) -> String {
        format!("http({})", self.config.base_url)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.post("/v1/complete", req)
    }

    fn score(&self, text: &str) -> Result<TokenLogProbs, GatewayError> {
        self.post(
            "/v1/score",
            &ScoreRequest {
                text: text.to_string(),
            },
        )
    }

    fn fill_mask(&self, req: &FillMaskRequest) -> Result<FillMaskResponse, GatewayError> {
        self.post("/v1/fill_mask", req)
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, GatewayError> {
        self.post("/v1/embed", req)
    }

    fn classify(&self, text: &str, task: Task) -> Result<f64, GatewayError> {
        let resp: ClassifyResponse = self.post(
            "/v1/classify",
            &ClassifyRequest {
                text: text.to_string(),
                task,
            },
        )?;
        Ok(resp.prob)
    }
}
