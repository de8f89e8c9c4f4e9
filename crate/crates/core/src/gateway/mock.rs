use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ChatRequest, EmbeddingVector, GatewayError, LlmBackend};
use crate::hashing::stable_hash64;

/// How a script entry is matched: by request hash (see
/// [`ChatRequest::script_hash`]) or by 0-based call ordinal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptMatch {
    Index(usize),
    Hash(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub response: String,
}

type Responder = Box<dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync>;

/// Deterministic offline backend.
///
/// Lookup order for a chat call: hash entry, then the entry scheduled for
/// this call ordinal, then the fallback responder. Hash-keyed entries and
/// responders are pure functions of the request; ordinal entries depend on
/// call order and are meant for strictly sequential stages.
pub struct MockBackend {
    name: String,
    by_hash: HashMap<String, String>,
    by_index: BTreeMap<usize, String>,
    calls: AtomicUsize,
    responder: Option<Responder>,
    embed_dim: usize,
    embed_overrides: HashMap<String, Vec<f64>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            by_hash: HashMap::new(),
            by_index: BTreeMap::new(),
            calls: AtomicUsize::new(0),
            responder: None,
            embed_dim: 64,
            embed_overrides: HashMap::new(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_entries(name: &str, entries: Vec<ScriptEntry>) -> Self {
        let mut mock = Self::new(name);
        for entry in entries {
            match entry.matcher {
                ScriptMatch::Index(i) => {
                    mock.by_index.insert(i, entry.response);
                }
                ScriptMatch::Hash(h) => {
                    mock.by_hash.insert(h, entry.response);
                }
            }
        }
        mock
    }

    pub fn from_script_file(name: &str, path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading {}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Config(format!("parsing {}: {e}", path.display())))?;
        Ok(Self::from_entries(name, entries))
    }

    /// Responses served in order, one per call.
    pub fn sequence<S: Into<String>>(name: &str, responses: impl IntoIterator<Item = S>) -> Self {
        let entries = responses
            .into_iter()
            .enumerate()
            .map(|(i, r)| ScriptEntry {
                matcher: ScriptMatch::Index(i),
                response: r.into(),
            })
            .collect();
        Self::from_entries(name, entries)
    }

    pub fn with_hash_response(mut self, req: &ChatRequest, response: impl Into<String>) -> Self {
        self.by_hash.insert(req.script_hash(), response.into());
        self
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self
    }

    /// Pins the embedding of an exact text, for tests that need controlled
    /// similarity.
    pub fn with_embedding(mut self, text: &str, values: Vec<f64>) -> Self {
        self.embed_overrides.insert(text.to_string(), values);
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }
}

/// Hash-seeded standard normal draws, normalised to unit length.
pub(crate) fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(text.as_bytes()));
    let mut values: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    } else {
        values[0] = 1.0;
    }
    values
}

impl LlmBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("mock log poisoned").push(req.clone());
        let hash = req.script_hash();
        if let Some(r) = self.by_hash.get(&hash) {
            return Ok(r.clone());
        }
        if let Some(r) = self.by_index.get(&ordinal) {
            return Ok(r.clone());
        }
        match &self.responder {
            Some(f) => f(req),
            None => Err(GatewayError::NoScriptedResponse { hash }),
        }
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        if let Some(v) = self.embed_overrides.get(text) {
            return EmbeddingVector::new(v.clone());
        }
        EmbeddingVector::new(hash_embedding(text, self.embed_dim))
    }

    fn name(&self) -> &str {
        &self.name
    }
}
