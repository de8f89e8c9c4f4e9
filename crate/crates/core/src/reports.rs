//! Corpus-level reports: embedding similarity and topic repetition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dialogue::Dialogue;
use crate::gateway::{ChatRequest, GatewayError, LlmBackend};
use crate::metrics::{cosine_similarity, MetricError};
use crate::prompts::{fill, TOPIC_SUMMARY};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub dialogues: usize,
    pub pairs: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

/// Cosine statistics over all unordered pairs `i < j` (self-pairs excluded).
pub fn similarity_from_embeddings(embeddings: &[Vec<f64>]) -> Result<SimilarityReport, ReportError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(ReportError::InvalidInput(format!("need at least 2 dialogues, got {n}")));
    }
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_similarity(&embeddings[i], &embeddings[j])?;
            max = max.max(s);
            min = min.min(s);
            total += s;
            pairs += 1;
        }
    }
    // Keep min ≤ mean ≤ max under floating-point summation error.
    let mean = (total / pairs as f64).clamp(min, max);
    Ok(SimilarityReport {
        dialogues: n,
        pairs,
        max,
        min,
        mean,
    })
}

/// Embeds each dialogue's turns joined by newlines and aggregates pairwise
/// cosines.
pub fn similarity_report(dialogues: &[Dialogue], embedder: &dyn LlmBackend) -> Result<SimilarityReport, ReportError> {
    if dialogues.len() < 2 {
        return Err(ReportError::InvalidInput(format!(
            "need at least 2 dialogues, got {}",
            dialogues.len()
        )));
    }
    let embeddings = dialogues
        .iter()
        .map(|d| Ok(embedder.embed(&d.joined_text())?.values))
        .collect::<Result<Vec<_>, GatewayError>>()?;
    similarity_from_embeddings(&embeddings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub dialogue_id: String,
    /// Normalized topic; absent when summarization failed.
    pub topic: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicReport {
    pub entries: Vec<TopicEntry>,
    pub unique_topics: usize,
    pub max_repetition: usize,
    pub failures: usize,
}

pub fn normalize_topic(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Groups already summarized topics by exact normalized text.
pub fn topic_counts<S: AsRef<str>>(topics: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in topics {
        *counts.entry(normalize_topic(t.as_ref())).or_insert(0) += 1;
    }
    counts
}

/// One summarization call per dialogue. Failed dialogues are flagged in the
/// entries and left out of the counts; the report fails only if every
/// dialogue failed.
pub fn topic_report(dialogues: &[Dialogue], summarizer: &dyn LlmBackend) -> Result<TopicReport, ReportError> {
    if dialogues.is_empty() {
        return Err(ReportError::InvalidInput("no dialogues".into()));
    }
    let mut entries = Vec::with_capacity(dialogues.len());
    let mut last_err = None;
    for d in dialogues {
        let req = ChatRequest::single(fill(TOPIC_SUMMARY, &[("dialogue", &d.transcript())]))
            .with_temperature(0.0)
            .with_seed(d.seed);
        let entry = match summarizer.chat(&req) {
            Ok(raw) if !raw.trim().is_empty() => TopicEntry {
                dialogue_id: d.id.clone(),
                topic: Some(normalize_topic(&raw)),
                error: None,
            },
            Ok(_) => TopicEntry {
                dialogue_id: d.id.clone(),
                topic: None,
                error: Some("empty topic".into()),
            },
            Err(e) => {
                let entry = TopicEntry {
                    dialogue_id: d.id.clone(),
                    topic: None,
                    error: Some(e.to_string()),
                };
                last_err = Some(e);
                entry
            }
        };
        entries.push(entry);
    }
    let topics: Vec<&str> = entries.iter().filter_map(|e| e.topic.as_deref()).collect();
    if topics.is_empty() {
        return Err(match last_err {
            Some(e) => ReportError::Gateway(e),
            None => ReportError::InvalidInput("every topic was empty".into()),
        });
    }
    let counts = topic_counts(&topics);
    Ok(TopicReport {
        unique_topics: counts.len(),
        max_repetition: counts.values().copied().max().unwrap_or(0),
        failures: entries.len() - topics.len(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;

    #[test]
    fn similarity_hand_values() {
        let r = similarity_from_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let expected = (0.0 + 2.0 * std::f64::consts::FRAC_1_SQRT_2) / 3.0;
        assert!((r.mean - expected).abs() < 1e-12);
        assert_eq!(r.pairs, 3);
        assert!((r.max - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(r.min.abs() < 1e-12);
        let same = similarity_from_embeddings(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        assert!((same.max - 1.0).abs() < 1e-12 && (same.min - 1.0).abs() < 1e-12 && (same.mean - 1.0).abs() < 1e-12);
        assert!(similarity_from_embeddings(&[vec![1.0]]).is_err());
    }

    fn dialogue(id: &str) -> Dialogue {
        serde_json::from_value(serde_json::json!({
            "id": id, "scenario": "s", "persona_id": "p", "action_seq_id": "a", "dia_len": 1, "seed": 0,
            "turns": [{"speaker": "user", "text": format!("hello {id}")}]
        }))
        .unwrap()
    }

    #[test]
    fn topics_counted_after_normalizing() {
        let ds = [dialogue("1"), dialogue("2"), dialogue("3")];
        let mock = MockBackend::sequence("t", ["Hotel costs", " hotel costs\n", "Meals"]);
        let r = topic_report(&ds, &mock).unwrap();
        assert_eq!((r.unique_topics, r.max_repetition, r.failures), (2, 2, 0));
        let mock = MockBackend::sequence("t", ["a", "b", "c"]);
        let r = topic_report(&ds, &mock).unwrap();
        assert_eq!((r.unique_topics, r.max_repetition), (3, 1));
    }

    #[test]
    fn topic_failures_are_flagged() {
        let ds = [dialogue("1"), dialogue("2")];
        let mock = MockBackend::sequence("t", ["a"]);
        let r = topic_report(&ds, &mock).unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.entries[1].error.is_some());
        assert!(topic_report(&ds, &MockBackend::new("t")).is_err());
        assert!(topic_report(&[], &MockBackend::new("t")).is_err());
    }

    #[test]
    fn identical_dialogues_are_fully_similar() {
        let ds = [dialogue("x"), dialogue("x")];
        let r = similarity_report(&ds, &MockBackend::new("e")).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12);
    }
}
