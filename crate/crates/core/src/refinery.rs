//! Reasoning tasks over dialogues and iterative difficulty hardening.
//!
//! Each record pairs a dialogue with a question and label. An iteration
//! measures how many reasoning models answer each question correctly, stores
//! the questions most models miss in a [`DifficultKb`], and regenerates every
//! question that all models solved, using the most similar difficult question
//! as exemplar. Regenerated questions are auto-labelled and pass through the
//! verification queue before they replace the old task.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dialogue::Dialogue;
use crate::gateway::{ChatRequest, GatewayError, LlmBackend, Message};
use crate::hashing::derive_seed;
use crate::metrics::{cosine_similarity, MetricError};
use crate::prompts::{
    fill, ANSWER_QUESTION, MATH_ANSWER_RULE, NO_REFERENCE_PROBLEM, PROBLEM_GENERATION,
    PROBLEM_GENERATION_RETRY, YES_NO_ANSWER_RULE,
};
use crate::store::{VerificationItem, VerificationStatus};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("difficult-problem knowledge base is empty")]
    EmptyKb,
    #[error("embedding has dimension {actual}, knowledge base uses {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("unknown dialogue {0}")]
    MissingDialogue(String),
    #[error("problem generation failed after {attempts} attempts; last reply {raw:?}")]
    Regeneration { attempts: usize, raw: String },
    #[error("no answer could be extracted from {0:?}")]
    Labeling(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MathWord,
    CommonSense,
}

impl TaskKind {
    /// Tag used in generation prompts and replies.
    pub fn tag(self) -> &'static str {
        match self {
            Self::MathWord => "math",
            Self::CommonSense => "common-sense",
        }
    }

    fn answer_rule(self) -> &'static str {
        match self {
            Self::MathWord => MATH_ANSWER_RULE,
            Self::CommonSense => YES_NO_ANSWER_RULE,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTask {
    pub question: String,
    /// Unset until labelled.
    #[serde(default)]
    pub label: Option<String>,
    pub kind: TaskKind,
}

impl ReasoningTask {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.question.trim().is_empty() {
            return Err(RefineError::InvalidTask("empty question".into()));
        }
        match (&self.label, self.kind) {
            (None, _) => Ok(()),
            (Some(l), TaskKind::MathWord) if parse_number(l).is_some() => Ok(()),
            (Some(l), TaskKind::CommonSense) if matches!(l.trim().to_lowercase().as_str(), "yes" | "no") => Ok(()),
            (Some(l), kind) => Err(RefineError::InvalidTask(format!("label {l:?} invalid for {kind} task"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub dialogue_id: String,
    #[serde(flatten)]
    pub task: ReasoningTask,
    /// Fraction of reasoning models that answered correctly; unset until assessed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:^|[^\w.])(-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)").expect("static regex")
    })
}

fn yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"))
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().replace(',', "").parse::<f64>().ok().filter(|v| v.is_finite())
}

/// The last standalone number in `text`, thousands separators removed.
pub fn extract_number(text: &str) -> Option<f64> {
    number_re()
        .captures_iter(text)
        .filter_map(|c| parse_number(&c[1]))
        .last()
}

/// The last standalone "yes" or "no" in `text`, lowercased.
pub fn extract_yes_no(text: &str) -> Option<&'static str> {
    yes_no_re()
        .captures_iter(text)
        .last()
        .map(|c| if c[1].eq_ignore_ascii_case("yes") { "yes" } else { "no" })
}

/// Grades one model reply. Math answers match within `tol·max(1, |label|)`;
/// yes/no answers match case-insensitively. No extractable answer counts as
/// wrong.
pub fn check_answer(task: &ReasoningTask, output: &str, tol: f64) -> bool {
    let Some(label) = task.label.as_deref() else {
        return false;
    };
    match task.kind {
        TaskKind::MathWord => match (parse_number(label), extract_number(output)) {
            (Some(l), Some(v)) => (v - l).abs() <= tol * l.abs().max(1.0),
            _ => false,
        },
        TaskKind::CommonSense => extract_yes_no(output) == Some(label.trim().to_lowercase().as_str()),
    }
}

fn answer_request(dialogue: &Dialogue, task: &ReasoningTask) -> ChatRequest {
    let prompt = fill(
        ANSWER_QUESTION,
        &[
            ("answer_rule", task.kind.answer_rule()),
            ("dialogue", &dialogue.transcript()),
            ("question", &task.question),
        ],
    );
    ChatRequest::single(prompt).with_temperature(0.0).with_seed(0)
}

/// Accuracy over `models`, one sample each at temperature 0. A failed call
/// counts as wrong and adds a `model-failed:<name>` flag.
pub fn assess(
    models: &[&dyn LlmBackend],
    record: &DatasetRecord,
    dialogue: &Dialogue,
    tol: f64,
) -> Result<DatasetRecord, RefineError> {
    if models.is_empty() {
        return Err(RefineError::InvalidParameter("at least one reasoning model is required".into()));
    }
    if record.task.label.is_none() {
        return Err(RefineError::InvalidTask(format!("record {} has no label", record.id)));
    }
    let req = answer_request(dialogue, &record.task);
    let outcomes: Vec<Result<bool, String>> = models
        .par_iter()
        .map(|m| match m.chat(&req) {
            Ok(out) => Ok(check_answer(&record.task, &out, tol)),
            Err(e) => {
                log::warn!("model {} failed on {}: {e}", m.name(), record.id);
                Err(m.name().to_string())
            }
        })
        .collect();
    let mut out = record.clone();
    let correct = outcomes.iter().filter(|o| matches!(o, Ok(true))).count();
    for name in outcomes.iter().filter_map(|o| o.as_ref().err()) {
        out.flags.push(format!("model-failed:{name}"));
    }
    out.acc = Some(correct as f64 / models.len() as f64);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Difficult,
    Retained,
}

/// Easy iff every model was right; Difficult iff `acc < threshold`.
pub fn classify(acc: f64, threshold: f64) -> Result<Difficulty, RefineError> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(RefineError::AccuracyOutOfRange(acc));
    }
    Ok(if acc == 1.0 {
        Difficulty::Easy
    } else if acc < threshold {
        Difficulty::Difficult
    } else {
        Difficulty::Retained
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultEntry {
    #[serde(flatten)]
    pub task: ReasoningTask,
    pub source_dialogue_id: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultKb {
    pub entries: Vec<DifficultEntry>,
}

impl DifficultKb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, question: &str) -> bool {
        self.entries.iter().any(|e| e.task.question == question)
    }

    /// Adds an entry unless its question is already present. Returns whether
    /// it was added.
    pub fn insert(&mut self, entry: DifficultEntry) -> Result<bool, RefineError> {
        if let Some(first) = self.entries.first() {
            if first.embedding.len() != entry.embedding.len() {
                return Err(RefineError::Dimension {
                    expected: first.embedding.len(),
                    actual: entry.embedding.len(),
                });
            }
        }
        if self.contains(&entry.task.question) {
            return Ok(false);
        }
        self.entries.push(entry);
        Ok(true)
    }
}

/// Entry whose embedding is most cosine-similar to `embedding`; ties go to
/// the lowest index.
pub fn match_difficult(embedding: &[f64], kb: &DifficultKb) -> Result<usize, RefineError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in kb.entries.iter().enumerate() {
        if e.embedding.len() != embedding.len() {
            return Err(RefineError::Dimension {
                expected: e.embedding.len(),
                actual: embedding.len(),
            });
        }
        let s = cosine_similarity(embedding, &e.embedding)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(RefineError::EmptyKb)
}

/// Reads a `Kind: ...` / `Question: ...` reply.
pub fn parse_generated_problem(raw: &str) -> Option<ReasoningTask> {
    let mut kind = None;
    let mut question: Option<String> = None;
    for line in raw.lines() {
        let line = line.trim().trim_start_matches('*').trim();
        let lower = line.to_lowercase();
        if let Some(q) = question.as_mut() {
            if !line.is_empty() {
                q.push(' ');
                q.push_str(line);
            }
        } else if let Some(rest) = lower.strip_prefix("kind:") {
            let rest = rest.trim_start_matches('*').trim();
            kind = if rest.starts_with("math") {
                Some(TaskKind::MathWord)
            } else if rest.starts_with("common") {
                Some(TaskKind::CommonSense)
            } else {
                None
            };
        } else if lower.starts_with("question:") {
            let q = line["question:".len()..].trim_start_matches('*').trim();
            question = Some(q.to_string());
        }
    }
    let question = question?.trim().to_string();
    let task = ReasoningTask {
        question,
        label: None,
        kind: kind?,
    };
    task.validate().ok().map(|_| task)
}

/// Asks the problem generator for a new question grounded in `dialogue`,
/// modelled on `exemplar` (or on nothing). One corrective re-ask.
pub fn regenerate_problem(
    generator: &dyn LlmBackend,
    dialogue: &Dialogue,
    exemplar: Option<&ReasoningTask>,
    seed: u64,
) -> Result<ReasoningTask, RefineError> {
    let (kind, problem) = match exemplar {
        Some(t) => (t.kind.tag(), t.question.as_str()),
        None => ("any", NO_REFERENCE_PROBLEM),
    };
    let prompt = fill(
        PROBLEM_GENERATION,
        &[("dialogue", &dialogue.transcript()), ("kind", kind), ("problem", problem)],
    );
    let mut req = ChatRequest::single(prompt).with_temperature(0.7).with_seed(seed);
    let first = generator.chat(&req)?;
    if let Some(task) = parse_generated_problem(&first) {
        return Ok(task);
    }
    req.messages.push(Message::assistant(first));
    req.messages.push(Message::user(PROBLEM_GENERATION_RETRY));
    let second = generator.chat(&req)?;
    parse_generated_problem(&second).ok_or(RefineError::Regeneration {
        attempts: 2,
        raw: second,
    })
}

/// Labels a task with one model's answer.
pub fn auto_label(model: &dyn LlmBackend, dialogue: &Dialogue, task: &ReasoningTask) -> Result<String, RefineError> {
    let out = model.chat(&answer_request(dialogue, task))?;
    match task.kind {
        TaskKind::MathWord => extract_number(&out).map(format_number),
        TaskKind::CommonSense => extract_yes_no(&out).map(String::from),
    }
    .ok_or(RefineError::Labeling(out))
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// What happens to regenerated tasks before they enter the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationPolicy {
    /// Items wait in the queue for a human verdict.
    #[default]
    Manual,
    /// Items are accepted as soon as they are enqueued.
    AutoAccept,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub difficulty_threshold: f64,
    pub max_iterations: usize,
    /// Relative tolerance for numeric answers.
    pub tolerance: f64,
    pub verification: VerificationPolicy,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            difficulty_threshold: 0.5,
            max_iterations: 10,
            tolerance: 1e-6,
            verification: VerificationPolicy::Manual,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.difficulty_threshold > 0.0 && self.difficulty_threshold < 1.0) {
            return Err(RefineError::InvalidParameter("difficulty_threshold must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(RefineError::InvalidParameter("max_iterations must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(RefineError::InvalidParameter("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Backends and lookups an iteration needs.
pub struct RefineAgents<'a> {
    /// Reasoning models; the first one also produces auto labels.
    pub models: &'a [&'a dyn LlmBackend],
    pub generator: &'a dyn LlmBackend,
    pub embedder: &'a dyn LlmBackend,
    pub dialogues: &'a BTreeMap<String, Dialogue>,
}

impl RefineAgents<'_> {
    fn dialogue(&self, id: &str) -> Result<&Dialogue, RefineError> {
        self.dialogues.get(id).ok_or_else(|| RefineError::MissingDialogue(id.to_string()))
    }
}

/// Mutable state carried across iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub dataset: Vec<DatasetRecord>,
    pub kb: DifficultKb,
    pub queue: Vec<VerificationItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub total: usize,
    pub easy: usize,
    pub difficult: usize,
    pub retained: usize,
    pub easy_ratio: f64,
    pub kb_added: usize,
    pub kb_size: usize,
    pub enqueued: usize,
    /// Verified replacements swapped into the dataset.
    pub replaced: usize,
    /// Easy records left alone because the knowledge base was empty.
    pub carried_without_kb: usize,
    /// Easy records whose regeneration or labelling failed.
    pub regeneration_failures: usize,
    pub pending_verification: usize,
}

/// Applies resolved, not yet applied queue items to the dataset. Accepted
/// and edited items replace the task and reset accuracy; rejected ones leave
/// the record as is so it is regenerated again.
pub fn apply_verdicts(state: &mut RefineState) -> usize {
    let mut replaced = 0;
    for item in state.queue.iter_mut().filter(|i| !i.applied) {
        let label = match item.status {
            VerificationStatus::Pending => continue,
            VerificationStatus::Rejected => None,
            VerificationStatus::Accepted => item.proposed_task.label.clone(),
            VerificationStatus::Edited => item.verdict_label.clone(),
        };
        item.applied = true;
        let Some(label) = label else { continue };
        if let Some(rec) = state.dataset.iter_mut().find(|r| r.id == item.record_id) {
            rec.task = ReasoningTask {
                label: Some(label),
                ..item.proposed_task.clone()
            };
            rec.acc = None;
            rec.flags.clear();
            replaced += 1;
        }
    }
    replaced
}

fn has_pending(queue: &[VerificationItem], record_id: &str) -> bool {
    queue
        .iter()
        .any(|i| i.record_id == record_id && i.status == VerificationStatus::Pending)
}

/// One assess / classify / regenerate / verify pass.
pub fn refine_iteration(
    state: &mut RefineState,
    agents: &RefineAgents<'_>,
    cfg: &RefineConfig,
    iteration: usize,
) -> Result<IterationReport, RefineError> {
    cfg.validate()?;
    if state.dataset.is_empty() {
        return Err(RefineError::InvalidParameter("dataset is empty".into()));
    }
    let mut report = IterationReport {
        iteration,
        replaced: apply_verdicts(state),
        ..IterationReport::default()
    };

    let assessed: Vec<Result<DatasetRecord, RefineError>> = state
        .dataset
        .par_iter()
        .map(|r| match r.acc {
            Some(_) => Ok(r.clone()),
            None => assess(agents.models, r, agents.dialogue(&r.dialogue_id)?, cfg.tolerance),
        })
        .collect();
    state.dataset = assessed.into_iter().collect::<Result<_, _>>()?;

    let mut easy = Vec::new();
    for (idx, r) in state.dataset.iter().enumerate() {
        let class = classify(r.acc.expect("assessed"), cfg.difficulty_threshold)?;
        match class {
            Difficulty::Easy => {
                report.easy += 1;
                easy.push(idx);
            }
            Difficulty::Difficult => {
                report.difficult += 1;
                if !state.kb.contains(&r.task.question) {
                    let embedding = agents.embedder.embed(&r.task.question)?.values;
                    let added = state.kb.insert(DifficultEntry {
                        task: r.task.clone(),
                        source_dialogue_id: r.dialogue_id.clone(),
                        embedding,
                    })?;
                    report.kb_added += usize::from(added);
                }
            }
            Difficulty::Retained => report.retained += 1,
        }
    }
    report.total = state.dataset.len();
    report.easy_ratio = report.easy as f64 / report.total as f64;
    report.kb_size = state.kb.len();

    for idx in easy {
        let rec = &state.dataset[idx];
        if has_pending(&state.queue, &rec.id) {
            continue;
        }
        if state.kb.is_empty() {
            report.carried_without_kb += 1;
            continue;
        }
        let dialogue = agents.dialogue(&rec.dialogue_id)?;
        // Queue length keeps ids and seeds distinct across resumed runs.
        let serial = state.queue.len() + 1;
        let seed = derive_seed(cfg.seed, &format!("regen-{iteration}-{serial}-{}", rec.id));
        let proposal = (|| -> Result<ReasoningTask, RefineError> {
            let emb = agents.embedder.embed(&dialogue.joined_text())?.values;
            let exemplar = &state.kb.entries[match_difficult(&emb, &state.kb)?].task;
            let mut task = regenerate_problem(agents.generator, dialogue, Some(exemplar), seed)?;
            task.label = Some(auto_label(agents.models[0], dialogue, &task)?);
            Ok(task)
        })();
        let task = match proposal {
            Ok(t) => t,
            Err(e @ RefineError::Gateway(GatewayError::BudgetExhausted { .. })) => return Err(e),
            Err(e) => {
                log::warn!("regeneration for {} failed: {e}", rec.id);
                report.regeneration_failures += 1;
                continue;
            }
        };
        let mut item = VerificationItem::new(
            format!("v-{}-{serial}", rec.id),
            rec.id.clone(),
            rec.dialogue_id.clone(),
            task,
        );
        if cfg.verification == VerificationPolicy::AutoAccept {
            item.status = VerificationStatus::Accepted;
            item.note = Some("auto-accepted".into());
        }
        state.queue.push(item);
        report.enqueued += 1;
    }
    report.replaced += apply_verdicts(state);
    report.pending_verification = state
        .queue
        .iter()
        .filter(|i| i.status == VerificationStatus::Pending)
        .count();
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub reports: Vec<IterationReport>,
    /// The iteration cap was reached with easy records remaining.
    pub truncated: bool,
}

/// Iterates until an assessment finds no easy record or the cap is reached.
pub fn refine_until_hard(
    state: &mut RefineState,
    agents: &RefineAgents<'_>,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    cfg.validate()?;
    let mut out = RefineOutcome::default();
    for iteration in 1..=cfg.max_iterations {
        let report = refine_iteration(state, agents, cfg, iteration)?;
        log::info!("iteration {iteration}: easy ratio {:.4}", report.easy_ratio);
        let done = report.easy == 0;
        out.reports.push(report);
        if done {
            return Ok(out);
        }
    }
    out.truncated = true;
    Ok(out)
}

/// Builds an initial record per dialogue: a generated question without an
/// exemplar, labelled by `labeler`. Dialogues whose generation fails are
/// skipped and returned by id.
pub fn derive_initial_tasks(
    generator: &dyn LlmBackend,
    labeler: &dyn LlmBackend,
    dialogues: &[Dialogue],
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<String>), RefineError> {
    let mut records = Vec::with_capacity(dialogues.len());
    let mut skipped = Vec::new();
    for d in dialogues {
        let attempt = regenerate_problem(generator, d, None, derive_seed(seed, &d.id)).and_then(|mut t| {
            t.label = Some(auto_label(labeler, d, &t)?);
            Ok(t)
        });
        match attempt {
            Ok(task) => records.push(DatasetRecord {
                id: format!("r-{}", d.id.trim_start_matches("d-")),
                dialogue_id: d.id.clone(),
                task,
                acc: None,
                flags: Vec::new(),
            }),
            Err(e @ RefineError::Gateway(GatewayError::BudgetExhausted { .. })) => return Err(e),
            Err(e) => {
                log::warn!("no task for {}: {e}", d.id);
                skipped.push(d.id.clone());
            }
        }
    }
    Ok((records, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;

    fn math(q: &str, label: &str) -> ReasoningTask {
        ReasoningTask { question: q.into(), label: Some(label.into()), kind: TaskKind::MathWord }
    }

    fn yes_no(label: &str) -> ReasoningTask {
        ReasoningTask { question: "ok?".into(), label: Some(label.into()), kind: TaskKind::CommonSense }
    }

    #[test]
    fn answer_checking() {
        let t = math("q", "120");
        assert!(check_answer(&t, "The answer is 120.", 1e-6));
        assert!(check_answer(&t, "120.0", 1e-6));
        assert!(check_answer(&t, "first 3, then 1,200 minus 1080 gives 120", 1e-6));
        assert!(!check_answer(&t, "121", 1e-6));
        assert!(!check_answer(&t, "no idea", 1e-6));
        assert!(check_answer(&math("q", "-2.5"), "It is -2.5", 1e-6));
        assert!(!check_answer(&yes_no("yes"), "No.", 1e-6));
        assert!(check_answer(&yes_no("Yes"), "yes", 1e-6));
        assert!(!check_answer(&yes_no("yes"), "yesterday", 1e-6));
        assert!(!check_answer(&ReasoningTask { label: None, ..yes_no("yes") }, "yes", 1e-6));
    }

    #[test]
    fn task_validation() {
        assert!(math("q", "1,200").validate().is_ok());
        assert!(math("q", "many").validate().is_err());
        assert!(yes_no("maybe").validate().is_err());
        assert!(math("  ", "1").validate().is_err());
    }

    #[test]
    fn classification() {
        let got: Vec<_> = [0.0, 0.25, 0.4, 0.5, 0.75, 1.0].iter().map(|a| classify(*a, 0.5).unwrap()).collect();
        use Difficulty::*;
        assert_eq!(got, vec![Difficult, Difficult, Difficult, Retained, Retained, Easy]);
        assert!(classify(1.1, 0.5).is_err());
        assert!(classify(-0.1, 0.5).is_err());
    }

    fn entry(q: &str, e: Vec<f64>) -> DifficultEntry {
        DifficultEntry { task: math(q, "1"), source_dialogue_id: "d".into(), embedding: e }
    }

    #[test]
    fn kb_matching() {
        let mut kb = DifficultKb::default();
        assert!(matches!(match_difficult(&[1.0, 0.0], &kb), Err(RefineError::EmptyKb)));
        kb.insert(entry("a", vec![1.0, 0.0])).unwrap();
        kb.insert(entry("b", vec![0.0, 1.0])).unwrap();
        assert_eq!(match_difficult(&[0.9, 0.1], &kb).unwrap(), 0);
        assert_eq!(match_difficult(&[0.0, 1.0], &kb).unwrap(), 1);
        assert!(!kb.insert(entry("a", vec![0.5, 0.5])).unwrap());
        assert!(kb.insert(entry("c", vec![1.0])).is_err());
        let mut twins = DifficultKb::default();
        twins.insert(entry("x", vec![1.0, 1.0])).unwrap();
        twins.insert(entry("y", vec![1.0, 1.0])).unwrap();
        assert_eq!(match_difficult(&[1.0, 1.0], &twins).unwrap(), 0);
    }

    #[test]
    fn problem_parsing() {
        let t = parse_generated_problem("Kind: math\nQuestion: How much is left?").unwrap();
        assert_eq!((t.kind, t.question.as_str(), t.label), (TaskKind::MathWord, "How much is left?", None));
        let t = parse_generated_problem("**Kind:** Common-sense\n**Question:** Is it allowed?\n").unwrap();
        assert_eq!(t.kind, TaskKind::CommonSense);
        assert_eq!(t.question, "Is it allowed?");
        assert!(parse_generated_problem("Kind: poetry\nQuestion: x").is_none());
        assert!(parse_generated_problem("just text").is_none());
    }

    fn dialogue() -> Dialogue {
        serde_json::from_str(
            r#"{"id":"d1","scenario":"s","persona_id":"p","action_seq_id":"a","dia_len":1,"seed":0,
                "turns":[{"speaker":"user","text":"hi"},{"speaker":"assistant","text":"hello"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn regeneration_retries_once() {
        let d = dialogue();
        let gen = MockBackend::sequence("g", ["garbage", "Kind: math\nQuestion: Total?"]);
        let t = regenerate_problem(&gen, &d, Some(&math("old", "1")), 1).unwrap();
        assert_eq!(t.question, "Total?");
        assert_eq!(gen.requests()[1].messages.len(), 3);
        let gen = MockBackend::sequence("g", ["garbage", "still garbage"]);
        assert!(matches!(regenerate_problem(&gen, &d, None, 1), Err(RefineError::Regeneration { .. })));
    }

    #[test]
    fn assessment_counts_and_flags() {
        let d = dialogue();
        let rec = DatasetRecord { id: "r".into(), dialogue_id: "d1".into(), task: math("q", "7"), acc: None, flags: vec![] };
        let right = MockBackend::sequence("right", ["7"]);
        let right2 = MockBackend::sequence("right2", ["It is 7."]);
        let wrong = MockBackend::sequence("wrong", ["8"]);
        let out = assess(&[&right, &right2, &wrong], &rec, &d, 1e-6).unwrap();
        assert!((out.acc.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let failing: Vec<MockBackend> = (0..3).map(|i| MockBackend::new(&format!("f{i}"))).collect();
        let refs: Vec<&dyn LlmBackend> = failing.iter().map(|m| m as &dyn LlmBackend).collect();
        let out = assess(&refs, &rec, &d, 1e-6).unwrap();
        assert_eq!(out.acc, Some(0.0));
        assert_eq!(out.flags.len(), 3);
        assert!(assess(&[], &rec, &d, 1e-6).is_err());
    }
}
