//! Chat-completion and embedding backends.
//!
//! Everything downstream talks to a [`Gateway`], a shared handle to some
//! [`LlmBackend`]. Two backends ship: [`RemoteBackend`] speaks the common
//! HTTP JSON chat-completion protocol, and [`MockBackend`] answers from a
//! script (or a deterministic built-in responder) so whole pipeline runs can
//! be replayed bit for bit.

mod canned;
mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use canned::CannedResponder;
pub use mock::{MockBackend, ScriptEntry, ScriptMatch};
pub use remote::{HttpReply, HttpTransport, RemoteBackend, UreqTransport};

use crate::hashing::{hex64, stable_hash64};

pub type Gateway = Arc<dyn LlmBackend>;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("gateway gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend refused the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted response for request {hash}")]
    NoScriptedResponse { hash: String },
    #[error("call budget of {limit} exhausted")]
    BudgetExhausted { limit: u64 },
    #[error("{0}")]
    Other(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn single(prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::user(prompt)],
            temperature: 0.7,
            max_output_tokens: 1024,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash used for script lookup. Seed and output-token cap are ignored so
    /// one fixture serves a whole sweep.
    pub fn script_hash(&self) -> String {
        let mut buf = Vec::new();
        for m in &self.messages {
            buf.extend_from_slice(format!("{:?}", m.role).as_bytes());
            buf.push(0);
            buf.extend_from_slice(m.content.as_bytes());
            buf.push(0);
        }
        buf.extend_from_slice(&self.temperature.to_bits().to_be_bytes());
        hex64(stable_hash64(&buf))
    }

    /// The content of the last user message, which carries the filled prompt.
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::Protocol("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::Protocol("non-finite embedding entry".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub trait LlmBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;

    fn name(&self) -> &str;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

fn default_embed_dim() -> usize {
    64
}

fn default_key_env() -> String {
    "DIALFORGE_API_KEY".into()
}

/// Backend description as it appears in run configs.
///
/// `script` for a mock may be a JSON script path or the literal `builtin`,
/// which selects [`CannedResponder`]. API keys are read from the environment
/// variable named by `api_key_env` and never stored here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_endpoint: Option<String>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

impl BackendConfig {
    pub fn mock_builtin(model_name: &str) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            embed_endpoint: None,
            model_name: model_name.into(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            script: Some(PathBuf::from("builtin")),
            embed_dim: default_embed_dim(),
            api_key_env: default_key_env(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Remote => {
                if self.endpoint.as_deref().unwrap_or("").is_empty() {
                    return Err(GatewayError::Config("remote backend requires endpoint".into()));
                }
                if self.model_name.is_empty() {
                    return Err(GatewayError::Config(
                        "remote backend requires model_name".into(),
                    ));
                }
            }
            BackendKind::Mock => {
                if self.script.is_none() {
                    return Err(GatewayError::Config("mock backend requires script".into()));
                }
            }
        }
        if self.embed_dim == 0 {
            return Err(GatewayError::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Gateway, GatewayError> {
        self.validate()?;
        match self.kind {
            BackendKind::Remote => Ok(Arc::new(RemoteBackend::new(
                self.clone(),
                Arc::new(UreqTransport::new()),
            )?)),
            BackendKind::Mock => {
                let script = self.script.as_ref().expect("validated");
                let name = if self.model_name.is_empty() {
                    "mock"
                } else {
                    &self.model_name
                };
                let backend = if script.as_os_str() == "builtin" {
                    MockBackend::new(name)
                        .with_embed_dim(self.embed_dim)
                        .with_responder(CannedResponder::for_model(name))
                } else {
                    MockBackend::from_script_file(name, script)?.with_embed_dim(self.embed_dim)
                };
                Ok(Arc::new(backend))
            }
        }
    }
}

/// Shared counter that caps the number of gateway calls across backends.
#[derive(Debug, Default)]
pub struct CallBudget {
    used: AtomicU64,
    limit: Option<u64>,
}

impl CallBudget {
    pub fn new(limit: Option<u64>) -> Arc<Self> {
        Arc::new(Self {
            used: AtomicU64::new(0),
            limit,
        })
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn limit(&self) -> Option<u64> {
        self.limit
    }

    fn take(&self) -> Result<(), GatewayError> {
        let prev = self.used.fetch_add(1, Ordering::SeqCst);
        match self.limit {
            Some(limit) if prev >= limit => {
                self.used.fetch_sub(1, Ordering::SeqCst);
                Err(GatewayError::BudgetExhausted { limit })
            }
            _ => Ok(()),
        }
    }
}

/// Wraps a backend so every call draws from a shared [`CallBudget`].
pub struct Budgeted {
    inner: Gateway,
    budget: Arc<CallBudget>,
}

impl Budgeted {
    pub fn wrap(inner: Gateway, budget: Arc<CallBudget>) -> Gateway {
        Arc::new(Self { inner, budget })
    }
}

impl LlmBackend for Budgeted {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.budget.take()?;
        self.inner.chat(req)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.budget.take()?;
        self.inner.embed(text)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_hash_ignores_seed_and_token_cap() {
        let a = ChatRequest::single("hi").with_seed(1);
        let mut b = ChatRequest::single("hi").with_seed(99);
        b.max_output_tokens = 7;
        assert_eq!(a.script_hash(), b.script_hash());
        let c = ChatRequest::single("hi").with_temperature(0.0);
        assert_ne!(a.script_hash(), c.script_hash());
    }

    #[test]
    fn request_validation() {
        let mut req = ChatRequest::single("x");
        assert!(req.validate().is_ok());
        req.temperature = -1.0;
        assert!(req.validate().is_err());
        req.temperature = 0.0;
        req.messages.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn config_invariants() {
        let mut cfg = BackendConfig::mock_builtin("m");
        assert!(cfg.validate().is_ok());
        cfg.script = None;
        assert!(matches!(cfg.validate(), Err(GatewayError::Config(_))));
        cfg.kind = BackendKind::Remote;
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1/v1/chat/completions".into());
        cfg.model_name = "m".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn budget_caps_calls() {
        let budget = CallBudget::new(Some(2));
        let gw = Budgeted::wrap(Arc::new(MockBackend::new("m")), budget.clone());
        gw.embed("a").unwrap();
        gw.embed("b").unwrap();
        assert!(matches!(
            gw.embed("c"),
            Err(GatewayError::BudgetExhausted { limit: 2 })
        ));
        assert_eq!(budget.used(), 2);
    }
}
