//! JSON-over-HTTP client for a remote model service.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;

use super::{Backend, BackendError, Completion, Prompt};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Scripted,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(BackendKind::Scripted),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend kind `{other}` (expected scripted or remote)")),
        }
    }
}

/// Backend selection as read from the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub token: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            token: None,
            model: None,
            timeout: DEFAULT_TIMEOUT,
            script: None,
        }
    }
}

impl BackendConfig {
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(kind) = get("COUNSEL_BACKEND") {
            cfg.kind = kind.parse()?;
        }
        cfg.endpoint = get("COUNSEL_BACKEND_ENDPOINT");
        cfg.token = get("COUNSEL_BACKEND_TOKEN");
        cfg.model = get("COUNSEL_BACKEND_MODEL");
        cfg.script = get("COUNSEL_SCRIPT").map(PathBuf::from);
        if let Some(secs) = get("COUNSEL_BACKEND_TIMEOUT_SECS") {
            let secs: f64 = secs
                .parse()
                .map_err(|_| format!("COUNSEL_BACKEND_TIMEOUT_SECS is not a number: {secs}"))?;
            if secs.is_nan() || secs <= 0.0 {
                return Err("COUNSEL_BACKEND_TIMEOUT_SECS must be positive".into());
            }
            cfg.timeout = Duration::from_secs_f64(secs);
        }
        if cfg.kind == BackendKind::Remote && cfg.endpoint.is_none() {
            return Err("remote backend needs COUNSEL_BACKEND_ENDPOINT".into());
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a Prompt,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
    model: String,
    timeout: Duration,
    retries: u32,
}

impl HttpBackend {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
            token: None,
            model: "default".to_string(),
            timeout,
            retries: 1,
        })
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Unavailable("no endpoint configured".into()))?;
        let mut b = Self::new(endpoint, cfg.timeout)?;
        b.token = cfg.token.clone();
        if let Some(m) = &cfg.model {
            b.model = m.clone();
        }
        Ok(b)
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn attempt(&self, prompt: &Prompt) -> Result<Completion, (BackendError, bool)> {
        let mut req = self.client.post(&self.endpoint).json(&WireRequest {
            model: &self.model,
            prompt,
        });
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                (BackendError::Timeout(self.timeout), true)
            } else {
                (BackendError::Unavailable(e.to_string()), true)
            }
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err((BackendError::Unavailable(format!("server answered {status}")), true));
        }
        if !status.is_success() {
            return Err((BackendError::Unavailable(format!("server answered {status}")), false));
        }
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                (BackendError::Timeout(self.timeout), true)
            } else {
                (BackendError::Unavailable(e.to_string()), true)
            }
        })?;
        serde_json::from_str(&body).map_err(|e| {
            (
                BackendError::ContractViolation(format!("malformed completion: {e}")),
                false,
            )
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        let mut tries = 0;
        loop {
            match self.attempt(prompt) {
                Ok(c) => return Ok(c),
                Err((e, transient)) => {
                    if !transient || tries >= self.retries {
                        return Err(e);
                    }
                    tries += 1;
                }
            }
        }
    }
}
