//! OpenAI-compatible completions backend.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, Prediction};

pub const DEFAULT_API_KEY_ENV: &str = "CURATA_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Base URL up to and excluding `/completions`, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; unset means no auth header.
    pub api_key_env: String,
    pub max_tokens: u32,
    pub logprobs: u32,
    pub timeout_secs: u64,
    /// JSONL file receiving every request and response.
    pub audit_path: Option<PathBuf>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "text-davinci-002".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_tokens: 64,
            logprobs: 1,
            timeout_secs: 60,
            audit_path: None,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    audit: Option<Mutex<File>>,
    id: String,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> io::Result<Self> {
        let audit = match &config.audit_path {
            Some(p) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(HttpBackend {
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            id: format!("http:{}", config.model),
            config,
            agent,
            audit,
        })
    }

    fn log(&self, entry: serde_json::Value) {
        if let Some(f) = &self.audit {
            let mut f = f.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = writeln!(f, "{entry}") {
                tracing::warn!(error = %e, "audit log write failed");
            }
        }
    }

    fn request(&self, body: &serde_json::Value) -> Result<CompletionResponse, BackendError> {
        let url = format!("{}/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(map_error)?;
        resp.body_mut()
            .read_json::<CompletionResponse>()
            .map_err(|e| BackendError::BadResponse(e.to_string()))
    }
}

fn map_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::StatusCode(429) => BackendError::Quota("HTTP 429".into()),
        ureq::Error::StatusCode(s) if s >= 500 => BackendError::Transport(format!("HTTP {s}")),
        ureq::Error::StatusCode(s) => BackendError::Rejected(format!("HTTP {s}")),
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<Prediction, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
            "stop": ["\n"],
            "logprobs": self.config.logprobs,
        });
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let result = self.request(&body).and_then(|r| {
            r.choices
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::BadResponse("no choices".into()))
        });
        match &result {
            Ok(c) => self.log(json!({"ts": ts, "request": body, "text": c.text})),
            Err(e) => self.log(json!({"ts": ts, "request": body, "error": e.to_string()})),
        }
        let choice = result?;
        let total = choice.logprobs.and_then(|lp| {
            let vals: Vec<f64> = lp.token_logprobs.into_iter().flatten().collect();
            (!vals.is_empty()).then(|| vals.iter().sum())
        });
        Ok(Prediction::new(&choice.text, total, &self.id))
    }
}
