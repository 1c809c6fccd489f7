//! Transports for label requests.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{tile_exemplars, LabelRequest, Part, RequestKind};
use crate::error::{Error, Result};
use crate::patching::png_bytes;

pub trait LabelClient: Send + Sync {
    /// Raw model answer for `request`.
    fn complete(&self, request: &LabelRequest) -> Result<String>;
}

type Responder = Box<dyn Fn(&LabelRequest) -> String + Send + Sync>;

/// Answers from a closure and counts calls.
pub struct MockClient {
    respond: Responder,
    calls: AtomicUsize,
}

impl MockClient {
    /// Always answers `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| text.clone())
    }

    pub fn new(respond: impl Fn(&LabelRequest) -> String + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(respond),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LabelClient for MockClient {
    fn complete(&self, request: &LabelRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((self.respond)(request))
    }
}

pub const ENV_ENDPOINT: &str = "NEURFLOW_LABEL_ENDPOINT";
pub const ENV_API_KEY: &str = "NEURFLOW_LABEL_API_KEY";
pub const ENV_MODEL: &str = "NEURFLOW_LABEL_MODEL";

#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Sent as a bearer token when set.
    pub api_key: Option<String>,
    pub model: String,
    pub max_attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub timeout: Duration,
    /// Send each group as one tiled image instead of separate images.
    pub tile: bool,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: String::new(),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            tile: false,
        }
    }

    /// Reads the endpoint, key and model name from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| Error::MissingEndpoint(ENV_ENDPOINT))?;
        let mut cfg = Self::new(endpoint);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        cfg.model = std::env::var(ENV_MODEL).unwrap_or_default();
        Ok(cfg)
    }
}

/// Posts `{model, temperature: 0, messages: [{role: "user", content: parts}]}`
/// and reads the answer from `text`, `choices[0].message.content` or
/// `content[*].text`.
pub struct HttpClient {
    config: HttpConfig,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { config, http })
    }

    pub fn body(&self, request: &LabelRequest) -> Result<Value> {
        let parts = if self.config.tile {
            tiled_parts(request)?
        } else {
            request.parts()
        };
        Ok(json!({
            "model": self.config.model,
            "temperature": 0.0,
            "messages": [{ "role": "user", "content": parts }],
        }))
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| (false, format!("response is not JSON: {e}")))?;
        response_text(&value).ok_or_else(|| (false, "response has no text field".to_string()))
    }
}

impl LabelClient for HttpClient {
    fn complete(&self, request: &LabelRequest) -> Result<String> {
        let body = self.body(request)?;
        let attempts = self.config.max_attempts.max(1);
        let mut delay = self.config.backoff;
        for n in 1..=attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retry, message)) if retry && n < attempts => {
                    log::warn!("label request attempt {n} failed: {message}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err((_, message)) => return Err(Error::Transport { attempts: n, message }),
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

fn response_text(v: &Value) -> Option<String> {
    if let Some(t) = v.get("text").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    if let Some(t) = v.pointer("/choices/0/message/content").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    let blocks = v.get("content")?.as_array()?;
    let texts: Vec<&str> = blocks.iter().filter_map(|b| b.get("text").and_then(Value::as_str)).collect();
    (!texts.is_empty()).then(|| texts.join("\n"))
}

fn tiled_parts(request: &LabelRequest) -> Result<Vec<Part>> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut parts = vec![Part::Text {
        text: request.prompt.clone(),
    }];
    for (i, set) in request.exemplars.iter().enumerate() {
        if request.kind == RequestKind::Relation {
            parts.push(Part::Text {
                text: format!("Group {}:", i + 1),
            });
        }
        let images = set
            .images
            .iter()
            .map(|data| {
                let bytes = b64.decode(data).map_err(|e| Error::Config(format!("bad exemplar encoding: {e}")))?;
                Ok(image::load_from_memory(&bytes)?.to_rgb8())
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(sheet) = tile_exemplars(&images, 3) {
            parts.push(Part::Image {
                media_type: "image/png".into(),
                data: b64.encode(png_bytes(&sheet)?),
            });
        }
    }
    Ok(parts)
}

/// Stores raw answers under `dir/<request hash>.txt` and serves repeats
/// from disk.
pub struct CachedClient<C> {
    inner: C,
    dir: PathBuf,
}

impl<C: LabelClient> CachedClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: LabelClient> LabelClient for CachedClient<C> {
    fn complete(&self, request: &LabelRequest) -> Result<String> {
        let path = self.dir.join(format!("{}.txt", request.hash()));
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Ok(text);
        }
        let text = self.inner.complete(request)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(text)
    }
}
