//! OpenAI-compatible HTTP backend.
//!
//! Chat and vision use `POST {url}/chat/completions`; vision sends the image
//! as a base64 data URL. Both embedding capabilities use
//! `POST {url}/embeddings`, image embeddings passing the data URL as input.
//! Connection failures, timeouts and 5xx/429 responses are retried twice with
//! a one-second backoff, then reported as an unavailable backend.

use std::path::Path;
use std::thread::sleep;
use std::time::Duration;

use apg_core::gateway::{ChatRequest, ModelBackend, VisionRequest};
use apg_core::Error as CoreError;
use base64::Engine;
use serde_json::{json, Value};

use crate::config::{Config, Endpoint};
use crate::error::{Error, Result};

pub const DEFAULT_RETRIES: u32 = 2;
pub const DEFAULT_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
struct Client {
    name: &'static str,
    url: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    fn new(name: &'static str, endpoint: &Endpoint) -> Result<Option<Self>> {
        let Some(url) = endpoint.url.clone() else { return Ok(None) };
        let model = endpoint
            .model
            .clone()
            .ok_or_else(|| Error::Config(format!("[{name}] has a url but no model")))?;
        let token = match &endpoint.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("[{name}] api_key_env names `{var}`, which is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs())))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Some(Client { name, url: url.trim_end_matches('/').to_string(), model, token, agent }))
    }
}

pub struct HttpBackend {
    chat: Option<Client>,
    vision: Option<Client>,
    embed_text: Option<Client>,
    embed_image: Option<Client>,
    retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let url = |c: &Option<Client>| c.as_ref().map(|c| c.url.clone());
        f.debug_struct("HttpBackend")
            .field("chat", &url(&self.chat))
            .field("vision", &url(&self.vision))
            .field("embed_text", &url(&self.embed_text))
            .field("embed_image", &url(&self.embed_image))
            .finish()
    }
}

enum Failure {
    /// Worth retrying.
    Transient(String),
    Permanent(String),
}

impl HttpBackend {
    pub fn from_config(config: &Config) -> Result<Self> {
        let backend = HttpBackend {
            chat: Client::new("chat", &config.chat)?,
            vision: Client::new("vision", &config.vision)?,
            embed_text: Client::new("embed_text", &config.embed_text)?,
            embed_image: Client::new("embed_image", &config.embed_image)?,
            retries: DEFAULT_RETRIES,
            backoff: DEFAULT_BACKOFF,
        };
        if backend.chat.is_none() || backend.embed_text.is_none() {
            return Err(Error::Config(
                "an HTTP backend needs at least [chat] and [embed_text] urls (or pass --mock-script)".into(),
            ));
        }
        Ok(backend)
    }

    pub fn with_retry_policy(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn client<'c>(&self, c: &'c Option<Client>, what: &str) -> apg_core::Result<&'c Client> {
        c.as_ref()
            .ok_or_else(|| CoreError::BackendUnavailable(format!("no {what} endpoint configured")))
    }

    fn post(&self, client: &Client, path: &str, body: &Value) -> apg_core::Result<Value> {
        let url = format!("{}/{path}", client.url);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                log::warn!("{} request failed ({last}); retry {attempt}/{}", client.name, self.retries);
                sleep(self.backoff);
            }
            match send(client, &url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Permanent(msg)) => return Err(CoreError::invalid(format!("{}: {msg}", client.name))),
                Err(Failure::Transient(msg)) => last = msg,
            }
        }
        Err(CoreError::BackendUnavailable(format!(
            "{} at {url} failed after {} attempts: {last}",
            client.name,
            self.retries + 1
        )))
    }

    fn completion(&self, client: &Client, content: Value) -> apg_core::Result<String> {
        let body = json!({
            "model": client.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        });
        let v = self.post(client, "chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| CoreError::invalid(format!("{}: response has no choices[0].message.content", client.name)))
    }

    fn embedding(&self, client: &Client, input: Value) -> apg_core::Result<Vec<f32>> {
        let v = self.post(client, "embeddings", &json!({"model": client.model, "input": input}))?;
        let values = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| CoreError::invalid(format!("{}: response has no data[0].embedding", client.name)))?;
        values
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CoreError::invalid(format!("{}: embedding holds a non-number", client.name)))
    }
}

fn send(client: &Client, url: &str, body: &Value) -> Result<Value, Failure> {
    let mut req = client.agent.post(url).header("Content-Type", "application/json");
    if let Some(token) = &client.token {
        req = req.header("Authorization", format!("Bearer {token}"));
    }
    let mut resp = req.send_json(body).map_err(|e| Failure::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| Failure::Transient(e.to_string()))?;
    match status {
        200..=299 => serde_json::from_str(&text).map_err(|e| Failure::Permanent(format!("malformed JSON: {e}"))),
        429 | 500..=599 => Err(Failure::Transient(format!("http status {status}"))),
        _ => Err(Failure::Permanent(format!("http status {status}: {}", text.chars().take(200).collect::<String>()))),
    }
}

fn mime(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

fn data_url(image_ref: &str) -> apg_core::Result<String> {
    let bytes = std::fs::read(image_ref).map_err(|e| CoreError::invalid(format!("cannot read image `{image_ref}`: {e}")))?;
    Ok(format!("data:{};base64,{}", mime(image_ref), base64::engine::general_purpose::STANDARD.encode(bytes)))
}

impl ModelBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> apg_core::Result<String> {
        let client = self.client(&self.chat, "chat")?;
        self.completion(client, Value::String(request.prompt.clone()))
    }

    fn vision(&self, request: &VisionRequest) -> apg_core::Result<String> {
        let client = self.client(&self.vision, "vision")?;
        let content = json!([
            {"type": "text", "text": request.prompt},
            {"type": "image_url", "image_url": {"url": data_url(&request.image_ref)?}},
        ]);
        self.completion(client, content)
    }

    fn embed_text(&self, text: &str) -> apg_core::Result<Vec<f32>> {
        let client = self.client(&self.embed_text, "embed_text")?;
        self.embedding(client, Value::String(text.to_string()))
    }

    fn embed_image(&self, image_ref: &str) -> apg_core::Result<Vec<f32>> {
        let client = self.client(&self.embed_image, "embed_image")?;
        self.embedding(client, Value::String(data_url(image_ref)?))
    }

    fn image_exists(&self, image_ref: &str) -> bool {
        Path::new(image_ref).is_file()
    }
}
