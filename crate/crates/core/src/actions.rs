//! User-agent action sequences grounded in a local knowledge corpus.
//!
//! Each round the agent performs one activity given its current memory and
//! the most relevant reference documents, then folds the activity back into
//! a single consolidated memory string.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, GatewayError, LlmBackend};
use crate::hashing::{derive_seed, hex64, stable_hash64};
use crate::metrics::cosine_similarity;
use crate::persona::{CandidateUser, Scenario};
use crate::prompts::{fill, ACTION_STEP, MEMORY_UPDATE};

#[derive(Debug, thiserror::Error)]
pub enum ActionError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("corpus {path}: {reason}")]
    Corpus { path: String, reason: String },
    #[error("action round {action} does not follow memory round {memory}")]
    RoundMismatch { memory: u32, action: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("simulation aborted after {} completed rounds: {source}", partial.actions.len())]
    Aborted {
        partial: Box<ActionSequence>,
        #[source]
        source: Box<ActionError>,
    },
}

impl ActionError {
    /// The gateway failure at the bottom of this error, if any.
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            Self::Gateway(e) => Some(e),
            Self::Aborted { source, .. } => source.gateway_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub documents: Vec<Document>,
    #[serde(default)]
    pub scenario: Option<String>,
}

impl KnowledgeBase {
    pub fn new(mut documents: Vec<Document>) -> Result<Self, ActionError> {
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = documents.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(ActionError::InvalidParameter(format!("duplicate document id {}", w[0].id)));
        }
        if let Some(d) = documents.iter().find(|d| d.text.trim().is_empty()) {
            return Err(ActionError::InvalidParameter(format!("document {} is empty", d.id)));
        }
        Ok(Self {
            documents,
            scenario: None,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Where reference documents come from. Only directory ingestion ships; a
/// web-search fetcher would implement the same trait.
pub trait KnowledgeFetcher {
    fn fetch(&self, scenario: &Scenario) -> Result<(KnowledgeBase, Vec<String>), ActionError>;
}

pub struct DirectoryFetcher {
    pub root: std::path::PathBuf,
}

impl KnowledgeFetcher for DirectoryFetcher {
    fn fetch(&self, scenario: &Scenario) -> Result<(KnowledgeBase, Vec<String>), ActionError> {
        let (mut kb, warnings) = ingest_corpus(&self.root)?;
        kb.scenario = Some(scenario.name.clone());
        Ok((kb, warnings))
    }
}

/// One document per regular file under `dir`, id = path relative to `dir`.
/// Empty or non-UTF-8 files are skipped and reported as warnings.
pub fn ingest_corpus(dir: &Path) -> Result<(KnowledgeBase, Vec<String>), ActionError> {
    let corpus_err = |reason: String| ActionError::Corpus {
        path: dir.display().to_string(),
        reason,
    };
    if !dir.is_dir() {
        return Err(corpus_err("not a readable directory".into()));
    }
    let mut documents = Vec::new();
    let mut warnings = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| corpus_err(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .unwrap_or(entry.path())
            .to_string_lossy()
            .replace('\\', "/");
        let text = match std::fs::read_to_string(entry.path()) {
            Ok(t) => t,
            Err(e) => {
                let msg = format!("skipping {rel}: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        if text.trim().is_empty() {
            let msg = format!("skipping empty file {rel}");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let title = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or(&rel)
            .trim_start_matches('#')
            .trim()
            .to_string();
        documents.push(Document {
            id: rel,
            title,
            text: text.trim().to_string(),
        });
    }
    Ok((KnowledgeBase::new(documents)?, warnings))
}

/// Embedding index over a knowledge base; top-r by cosine, ties in
/// document-id order.
pub struct Retriever {
    kb: KnowledgeBase,
    embeddings: Vec<Vec<f64>>,
    embedder: Gateway,
    top_r: usize,
}

impl Retriever {
    pub fn build(embedder: Gateway, kb: KnowledgeBase, top_r: usize) -> Result<Self, ActionError> {
        let embeddings = kb
            .documents
            .iter()
            .map(|d| embedder.embed(&d.text).map(|e| e.values))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            kb,
            embeddings,
            embedder,
            top_r,
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn top_r(&self) -> usize {
        self.top_r
    }

    pub fn retrieve(&self, query: &str) -> Result<Vec<&Document>, ActionError> {
        if self.kb.is_empty() || self.top_r == 0 || query.trim().is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(query)?.values;
        let mut scored = Vec::with_capacity(self.embeddings.len());
        for (i, e) in self.embeddings.iter().enumerate() {
            let s = cosine_similarity(&q, e)
                .map_err(|err| ActionError::InvalidParameter(format!("retrieval: {err}")))?;
            scored.push((i, s));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored
            .into_iter()
            .take(self.top_r)
            .map(|(i, _)| &self.kb.documents[i])
            .collect())
    }

    pub fn reference_block(&self, query: &str) -> Result<String, ActionError> {
        Ok(render_refs(&self.retrieve(query)?))
    }
}

pub fn render_refs(docs: &[&Document]) -> String {
    docs.iter()
        .map(|d| format!("[{}] {}\n{}", d.id, d.title, d.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub text: String,
    pub round: u32,
}

impl Memory {
    /// Round-0 memory: the persona's intent and questions.
    pub fn initial(persona: &CandidateUser) -> Self {
        let mut text = format!("Identity: {}\nObjective: {}\nQuestions:", persona.identity, persona.reason);
        for q in &persona.questions {
            text.push_str("\n- ");
            text.push_str(q);
        }
        Self { text, round: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub round: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub id: String,
    pub persona: CandidateUser,
    pub actions: Vec<ActionRecord>,
    pub final_memory: Memory,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionOptions {
    pub temperature: f64,
}

impl Default for ActionOptions {
    fn default() -> Self {
        Self { temperature: 0.7 }
    }
}

fn nonempty(text: String, what: &str) -> Result<String, ActionError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(ActionError::Gateway(GatewayError::Protocol(format!("empty {what}"))));
    }
    Ok(trimmed.to_string())
}

pub fn next_action(
    gateway: &dyn LlmBackend,
    scenario: &Scenario,
    memory: &Memory,
    retriever: &Retriever,
    seed: u64,
    opts: ActionOptions,
) -> Result<ActionRecord, ActionError> {
    let refs = retriever.reference_block(&memory.text)?;
    let prompt = fill(
        ACTION_STEP,
        &[
            ("area_name", &scenario.name),
            ("now_memory", &memory.text),
            ("ref", &refs),
        ],
    );
    let req = ChatRequest::single(prompt)
        .with_temperature(opts.temperature)
        .with_seed(seed);
    let text = nonempty(gateway.chat(&req)?, "action")?;
    Ok(ActionRecord {
        round: memory.round + 1,
        text,
    })
}

pub fn consolidate_memory(
    gateway: &dyn LlmBackend,
    scenario: &Scenario,
    memory: &Memory,
    action: &ActionRecord,
    seed: u64,
    opts: ActionOptions,
) -> Result<Memory, ActionError> {
    if action.round != memory.round + 1 {
        return Err(ActionError::RoundMismatch {
            memory: memory.round,
            action: action.round,
        });
    }
    let prompt = fill(
        MEMORY_UPDATE,
        &[
            ("area_name", &scenario.name),
            ("act", &action.text),
            ("now_memory", &memory.text),
        ],
    );
    let req = ChatRequest::single(prompt)
        .with_temperature(opts.temperature)
        .with_seed(seed);
    Ok(Memory {
        text: nonempty(gateway.chat(&req)?, "memory")?,
        round: action.round,
    })
}

/// Alternates action and consolidation for `rounds` rounds. On failure the
/// completed prefix is returned inside [`ActionError::Aborted`].
pub fn simulate(
    gateway: &dyn LlmBackend,
    persona: &CandidateUser,
    scenario: &Scenario,
    retriever: &Retriever,
    rounds: u32,
    seed: u64,
    opts: ActionOptions,
) -> Result<ActionSequence, ActionError> {
    if rounds == 0 {
        return Err(ActionError::InvalidParameter("rounds must be at least 1".into()));
    }
    let id = format!(
        "a-{}",
        &hex64(stable_hash64(format!("{}:{seed}", persona.id()).as_bytes()))[..12]
    );
    let mut seq = ActionSequence {
        id,
        persona: persona.clone(),
        actions: Vec::with_capacity(rounds as usize),
        final_memory: Memory::initial(persona),
        seed,
    };
    for round in 1..=rounds {
        let step = next_action(
            gateway,
            scenario,
            &seq.final_memory,
            retriever,
            derive_seed(seed, &format!("action-{round}")),
            opts,
        )
        .and_then(|action| {
            let memory = consolidate_memory(
                gateway,
                scenario,
                &seq.final_memory,
                &action,
                derive_seed(seed, &format!("memory-{round}")),
                opts,
            )?;
            Ok((action, memory))
        });
        match step {
            Ok((action, memory)) => {
                seq.actions.push(action);
                seq.final_memory = memory;
            }
            Err(e) => {
                return Err(ActionError::Aborted {
                    partial: Box::new(seq),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(seq)
}
