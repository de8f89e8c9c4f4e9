use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, ChatRequest, EmbeddingVector, GatewayError, LlmBackend};

#[derive(Clone, Debug)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal POST-JSON seam so retry behaviour can be tested without a server.
/// `Err` means the request never produced an HTTP status (connect, timeout).
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Client for HTTP JSON chat-completion endpoints.
pub struct RemoteBackend {
    cfg: BackendConfig,
    transport: Arc<dyn HttpTransport>,
    api_key: Option<String>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.cfg.endpoint)
            .field("model", &self.cfg.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(String),
    Retry(String),
}

impl RemoteBackend {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn HttpTransport>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            cfg,
            transport,
            api_key,
        })
    }

    pub fn chat_body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        let mut body = json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    /// Posts with exponential backoff. Transport failures, 429 and 5xx are
    /// retried; any other status is an application answer and is returned.
    fn post_with_retry(&self, url: &str, body: &Value) -> Result<String, GatewayError> {
        let total = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=total {
            match self.attempt(url, body)? {
                Attempt::Done(text) => return Ok(text),
                Attempt::Retry(reason) => {
                    log::warn!("{} attempt {attempt}/{total} failed: {reason}", self.cfg.model_name);
                    last = reason;
                }
            }
            if attempt < total && self.cfg.backoff_base_ms > 0 {
                let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
        }
        Err(GatewayError::Exhausted {
            attempts: total,
            last,
        })
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Attempt, GatewayError> {
        match self.transport.post_json(url, self.api_key.as_deref(), body) {
            Err(e) => Ok(Attempt::Retry(format!("transport: {e}"))),
            Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                Ok(Attempt::Retry(format!("status {}", reply.status)))
            }
            Ok(reply) if !(200..300).contains(&reply.status) => Err(GatewayError::Rejected {
                status: reply.status,
                body: reply.body,
            }),
            Ok(reply) => Ok(Attempt::Done(reply.body)),
        }
    }
}

pub(crate) fn extract_chat_content(body: &str) -> Result<String, GatewayError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("invalid JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}

fn extract_embedding(body: &str) -> Result<EmbeddingVector, GatewayError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("invalid JSON: {e}")))?;
    let arr = value
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("missing data[0].embedding".into()))?;
    let values = arr
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| GatewayError::Protocol("non-numeric embedding entry".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingVector::new(values)
}

impl LlmBackend for RemoteBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let url = self.cfg.endpoint.as_deref().expect("validated");
        let body = self.post_with_retry(url, &self.chat_body(req))?;
        extract_chat_content(&body)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        let url = self.cfg.embed_endpoint.as_deref().ok_or_else(|| {
            GatewayError::Config("remote backend has no embed_endpoint".into())
        })?;
        let body = json!({ "model": self.cfg.model_name, "input": text });
        let reply = self.post_with_retry(url, &body)?;
        extract_embedding(&reply)
    }

    fn name(&self) -> &str {
        &self.cfg.model_name
    }
}
