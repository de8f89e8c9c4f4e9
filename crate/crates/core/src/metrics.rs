//! Text statistics and base dialogue-quality metrics.
//!
//! Tokens are produced by one rule only ([`tokenize`]): lowercase, split on
//! Unicode whitespace, strip leading and trailing non-alphanumeric
//! characters, drop tokens that end up empty.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dialogue::Dialogue;
use crate::graph::{LeafId, MetricContext};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("index {index} out of range for corpus of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite intermediate value in {0}")]
    NonFinite(&'static str),
}

pub type TokenStream = Vec<String>;

pub fn tokenize(text: &str) -> TokenStream {
    text.split_whitespace()
        .filter_map(|raw| {
            let token = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            (!token.is_empty()).then_some(token)
        })
        .collect()
}

/// Unique n-grams over total n-grams. A stream shorter than `n` has no
/// n-grams and scores 1.0.
pub fn distinct_n<S: AsRef<str>>(tokens: &[S], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidParameter("n must be at least 1".into()));
    }
    if tokens.len() < n {
        return Ok(1.0);
    }
    let grams: Vec<Vec<&str>> = tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect();
    let unique: HashSet<&Vec<&str>> = grams.iter().collect();
    Ok(unique.len() as f64 / grams.len() as f64)
}

/// TF-IDF vectors for a corpus: raw term frequency times the smoothed
/// inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
#[derive(Debug, Clone)]
pub struct TfIdf {
    vectors: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self, MetricError> {
        if corpus.is_empty() {
            return Err(MetricError::InvalidInput("empty corpus".into()));
        }
        let n = corpus.len() as f64;
        let mut df: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            let terms: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut vectors = Vec::with_capacity(corpus.len());
        let mut norms = Vec::with_capacity(corpus.len());
        for doc in corpus {
            let mut tf: BTreeMap<String, f64> = BTreeMap::new();
            for t in doc {
                *tf.entry(t.as_ref().to_string()).or_default() += 1.0;
            }
            for (term, weight) in tf.iter_mut() {
                let idf = ((1.0 + n) / (1.0 + df[term.as_str()] as f64)).ln() + 1.0;
                *weight *= idf;
            }
            let norm = tf.values().map(|w| w * w).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(MetricError::NonFinite("tf-idf norm"));
            }
            vectors.push(tf);
            norms.push(norm);
        }
        Ok(Self { vectors, norms })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Cosine of two document vectors; 0.0 when either is the zero vector.
    pub fn similarity(&self, i: usize, j: usize) -> Result<f64, MetricError> {
        let len = self.len();
        for index in [i, j] {
            if index >= len {
                return Err(MetricError::IndexOutOfRange { index, len });
            }
        }
        if self.norms[i] == 0.0 || self.norms[j] == 0.0 {
            return Ok(0.0);
        }
        let (small, large) = if self.vectors[i].len() <= self.vectors[j].len() {
            (&self.vectors[i], &self.vectors[j])
        } else {
            (&self.vectors[j], &self.vectors[i])
        };
        let dot: f64 = small
            .iter()
            .filter_map(|(t, w)| large.get(t).map(|v| w * v))
            .sum();
        let sim = dot / (self.norms[i] * self.norms[j]);
        if !sim.is_finite() {
            return Err(MetricError::NonFinite("tf-idf similarity"));
        }
        Ok(sim.clamp(0.0, 1.0))
    }

    pub fn mean_pairwise_similarity(&self) -> Result<f64, MetricError> {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                total += self.similarity(i, j)?;
                pairs += 1;
            }
        }
        Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
    }
}

pub fn tfidf_similarity<S: AsRef<str>>(
    corpus: &[Vec<S>],
    i: usize,
    j: usize,
) -> Result<f64, MetricError> {
    TfIdf::fit(corpus)?.similarity(i, j)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::InvalidInput("zero-norm vector".into()));
    }
    let sim = dot / (na * nb);
    if !sim.is_finite() {
        return Err(MetricError::NonFinite("cosine similarity"));
    }
    Ok(sim.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub dialogues: usize,
    pub total_turns: usize,
    pub avg_turns_per_dialogue: f64,
    pub avg_tokens_per_turn: f64,
    pub unique_token_ratio: f64,
}

/// Statistics over dialogues given as lists of turn texts.
pub fn turn_stats<D, T>(dialogues: &[D]) -> Result<StatsReport, MetricError>
where
    D: AsRef<[T]>,
    T: AsRef<str>,
{
    if dialogues.is_empty() {
        return Err(MetricError::InvalidInput("empty dataset".into()));
    }
    let mut total_turns = 0usize;
    let mut total_tokens = 0usize;
    let mut vocab: HashSet<String> = HashSet::new();
    for dialogue in dialogues {
        for turn in dialogue.as_ref() {
            total_turns += 1;
            let tokens = tokenize(turn.as_ref());
            total_tokens += tokens.len();
            vocab.extend(tokens);
        }
    }
    if total_turns == 0 {
        return Err(MetricError::InvalidInput("dataset has no turns".into()));
    }
    if total_tokens == 0 {
        return Err(MetricError::InvalidInput("dataset has no tokens".into()));
    }
    Ok(StatsReport {
        dialogues: dialogues.len(),
        total_turns,
        avg_turns_per_dialogue: total_turns as f64 / dialogues.len() as f64,
        avg_tokens_per_turn: total_tokens as f64 / total_turns as f64,
        unique_token_ratio: vocab.len() as f64 / total_tokens as f64,
    })
}

pub fn dataset_stats(dataset: &[Dialogue]) -> Result<StatsReport, MetricError> {
    let turns: Vec<Vec<&str>> = dataset
        .iter()
        .map(|d| d.turns.iter().map(|t| t.text.as_str()).collect())
        .collect();
    turn_stats(&turns)
}

/// Knobs for the leaf values that are not pure diversity ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextOptions {
    /// Tokens per turn at which the length penalty is zero.
    pub target_tokens_per_turn: f64,
}

impl Default for ContextOptions {
    fn default() -> Self {
        Self {
            target_tokens_per_turn: 40.0,
        }
    }
}

fn mean_pairwise_cosine(vectors: &[Vec<f64>]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            total += cosine_similarity(&vectors[i], &vectors[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Leaf values over a set of documents. Each document is one unit of
/// comparison (a whole dialogue, or a single turn) with its embedding.
///
/// - `distinct-1`, `distinct-2`: mean per-document distinct-n
/// - `tfidf-diversity`: 1 − mean pairwise TF-IDF similarity
/// - `embedding-diversity`: 1 − mean pairwise embedding cosine
/// - `length-penalty`: |mean tokens per turn − target| / target
///
/// With fewer than two documents both pairwise similarities are taken as 0.
pub fn context_from_documents(
    documents: &[String],
    embeddings: &[Vec<f64>],
    turns: usize,
    opts: ContextOptions,
) -> Result<MetricContext, MetricError> {
    if documents.is_empty() {
        return Err(MetricError::InvalidInput("no documents".into()));
    }
    if documents.len() != embeddings.len() {
        return Err(MetricError::DimensionMismatch(documents.len(), embeddings.len()));
    }
    if turns == 0 {
        return Err(MetricError::InvalidInput("no turns".into()));
    }
    if opts.target_tokens_per_turn.is_nan() || opts.target_tokens_per_turn <= 0.0 {
        return Err(MetricError::InvalidParameter("target tokens must be positive".into()));
    }
    let tokenized: Vec<TokenStream> = documents.iter().map(|d| tokenize(d)).collect();
    let docs = tokenized.len() as f64;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for t in &tokenized {
        d1 += distinct_n(t, 1)?;
        d2 += distinct_n(t, 2)?;
    }
    let tfidf = TfIdf::fit(&tokenized)?.mean_pairwise_similarity()?;
    let emb = mean_pairwise_cosine(embeddings)?;
    let tokens: usize = tokenized.iter().map(Vec::len).sum();
    let per_turn = tokens as f64 / turns as f64;
    let penalty = (per_turn - opts.target_tokens_per_turn).abs() / opts.target_tokens_per_turn;

    let mut ctx = MetricContext::new();
    ctx.insert(LeafId::Distinct1, d1 / docs);
    ctx.insert(LeafId::Distinct2, d2 / docs);
    ctx.insert(LeafId::TfidfDiversity, 1.0 - tfidf);
    ctx.insert(LeafId::EmbeddingDiversity, 1.0 - emb);
    ctx.insert(LeafId::LengthPenalty, penalty);
    if ctx.values().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("metric context"));
    }
    Ok(ctx)
}
