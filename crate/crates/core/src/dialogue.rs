//! User/assistant interaction and proxy scoring.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionError, ActionSequence, Retriever};
use crate::gateway::{ChatRequest, GatewayError, LlmBackend, Message};
use crate::hashing::{derive_seed, hex64, stable_hash64};
use crate::persona::Scenario;
use crate::prompts::{
    fill, score_prompt, ASSISTANT_INTERACT, SCORE_COHERENCE_HEAD, SCORE_DIVERSITY_HEAD,
    SCORE_FLUENCY_HEAD, SCORE_REASK, USER_INTERACT,
};

#[derive(Debug, thiserror::Error)]
pub enum DialogueError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{expected:?} turn requested but {actual:?} is due")]
    OutOfOrder { expected: Speaker, actual: Speaker },
    #[error("{0:?} produced an empty utterance")]
    EmptyUtterance(Speaker),
    #[error("could not parse score from {0:?}")]
    ScoreParse(String),
    #[error("{dimension} score unparseable after re-ask: {raw:?}")]
    Scoring { dimension: &'static str, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] ActionError),
    #[error("dialogue aborted after {} turns: {source}", partial.turns.len())]
    Aborted {
        partial: Box<Dialogue>,
        #[source]
        source: Box<DialogueError>,
    },
}

impl DialogueError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            Self::Gateway(e) => Some(e),
            Self::Retrieval(e) => e.gateway_error(),
            Self::Aborted { source, .. } => source.gateway_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub scenario: String,
    pub persona_id: String,
    pub action_seq_id: String,
    pub turns: Vec<Turn>,
    pub dia_len: u32,
    pub seed: u64,
    #[serde(default)]
    pub terminated_early: bool,
}

impl Dialogue {
    pub fn next_speaker(&self) -> Speaker {
        if self.turns.len().is_multiple_of(2) {
            Speaker::User
        } else {
            Speaker::Assistant
        }
    }

    pub fn user_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::User).count()
    }

    /// All turns joined by newlines; the text that gets embedded.
    pub fn joined_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Transcript with role labels, as shown to evaluators.
    pub fn transcript(&self) -> String {
        render_history(&self.turns)
    }

    /// Alternation starting with the user, 1-based indices, non-empty text
    /// and the round cap.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Assistant };
            if t.speaker != expected {
                return Err(format!("turn {} spoken by {:?}", i + 1, t.speaker));
            }
            if t.index as usize != i + 1 {
                return Err(format!("turn {} has index {}", i + 1, t.index));
            }
            if t.text.trim().is_empty() {
                return Err(format!("turn {} is empty", i + 1));
            }
        }
        if self.user_turns() > self.dia_len as usize {
            return Err(format!("{} rounds exceed cap {}", self.user_turns(), self.dia_len));
        }
        Ok(())
    }
}

/// Concrete prompt additions decoded from continuous prompt parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSettings {
    /// Extra requirements appended to both interaction prompts.
    pub multi_turn: Vec<String>,
    /// Style constraints attached to every individual reply.
    pub single_turn: Vec<String>,
    pub temperature: f64,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            multi_turn: Vec::new(),
            single_turn: Vec::new(),
            temperature: 0.7,
        }
    }
}

impl PromptSettings {
    fn extra_block(&self) -> String {
        let mut out = String::new();
        if !self.multi_turn.is_empty() {
            out.push_str("\n**Additional Requirements:**\n");
            for f in &self.multi_turn {
                out.push_str("\n- ");
                out.push_str(f);
            }
            out.push('\n');
        }
        if !self.single_turn.is_empty() {
            out.push_str("\nFor your next reply: ");
            out.push_str(&self.single_turn.join("; "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOptions {
    /// A user utterance containing any of these (case-insensitive) ends the
    /// dialogue after the assistant's reply.
    pub closing_phrases: Vec<String>,
}

impl Default for DialogueOptions {
    fn default() -> Self {
        Self {
            closing_phrases: [
                "thank you, that's all",
                "thanks, that's all",
                "that's all i need",
                "that's all for now",
                "no further questions",
                "goodbye",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl DialogueOptions {
    pub fn is_closing(&self, utterance: &str) -> bool {
        let norm = utterance.to_lowercase().replace('\u{2019}', "'");
        self.closing_phrases.iter().any(|p| norm.contains(&p.to_lowercase()))
    }
}

pub fn render_history(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| match t.speaker {
            Speaker::User => format!("User: {}", t.text),
            Speaker::Assistant => format!("Assistant: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn leak_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*\**\s*(user|assistant)\s*\**\s*[:：]\s*\**\s*").expect("static regex"))
}

/// Removes leading "User:" / "Assistant:" labels the model was told not to
/// emit, repeatedly, and trims.
pub fn strip_role_leakage(text: &str) -> String {
    let mut s = text.trim();
    while let Some(m) = leak_re().find(s) {
        if m.end() == 0 {
            break;
        }
        s = s[m.end()..].trim_start();
    }
    s.trim().to_string()
}

/// Everything a dialogue needs besides the per-dialogue inputs.
pub struct DialogueAgents<'a> {
    pub user: &'a dyn LlmBackend,
    pub assistant: &'a dyn LlmBackend,
    pub retriever: &'a Retriever,
    pub scenario: &'a Scenario,
}

fn push_turn(dialogue: &Dialogue, speaker: Speaker, raw: String) -> Result<Turn, DialogueError> {
    let text = strip_role_leakage(&raw);
    if text.is_empty() {
        return Err(DialogueError::EmptyUtterance(speaker));
    }
    Ok(Turn {
        speaker,
        text,
        index: dialogue.turns.len() as u32 + 1,
    })
}

pub fn user_turn(
    agents: &DialogueAgents<'_>,
    dialogue: &Dialogue,
    memory: &str,
    prompts: &PromptSettings,
) -> Result<Turn, DialogueError> {
    let due = dialogue.next_speaker();
    if due != Speaker::User {
        return Err(DialogueError::OutOfOrder {
            expected: Speaker::User,
            actual: due,
        });
    }
    let prompt = fill(
        USER_INTERACT,
        &[
            ("area_name", &agents.scenario.name),
            ("memory", memory),
            ("dia_len", &dialogue.dia_len.to_string()),
            ("extra", &prompts.extra_block()),
            ("history", &render_history(&dialogue.turns)),
        ],
    );
    let seed = derive_seed(dialogue.seed, &format!("turn-{}", dialogue.turns.len() + 1));
    let req = ChatRequest::single(prompt)
        .with_temperature(prompts.temperature)
        .with_seed(seed);
    push_turn(dialogue, Speaker::User, agents.user.chat(&req)?)
}

pub fn assistant_turn(
    agents: &DialogueAgents<'_>,
    dialogue: &Dialogue,
    prompts: &PromptSettings,
) -> Result<Turn, DialogueError> {
    let due = dialogue.next_speaker();
    if due != Speaker::Assistant {
        return Err(DialogueError::OutOfOrder {
            expected: Speaker::Assistant,
            actual: due,
        });
    }
    let last_user = dialogue
        .turns
        .iter()
        .rev()
        .find(|t| t.speaker == Speaker::User)
        .map_or("", |t| t.text.as_str());
    let refs = agents.retriever.reference_block(last_user)?;
    let prompt = fill(
        ASSISTANT_INTERACT,
        &[
            ("area_name", &agents.scenario.name),
            ("ref", &refs),
            ("extra", &prompts.extra_block()),
            ("history", &render_history(&dialogue.turns)),
        ],
    );
    let seed = derive_seed(dialogue.seed, &format!("turn-{}", dialogue.turns.len() + 1));
    let req = ChatRequest::single(prompt)
        .with_temperature(prompts.temperature)
        .with_seed(seed);
    push_turn(dialogue, Speaker::Assistant, agents.assistant.chat(&req)?)
}

/// Alternates user and assistant turns until `dia_len` rounds or a closing
/// user utterance (which still gets an assistant reply).
pub fn run_dialogue(
    agents: &DialogueAgents<'_>,
    actions: &ActionSequence,
    prompts: &PromptSettings,
    dia_len: u32,
    seed: u64,
    opts: &DialogueOptions,
) -> Result<Dialogue, DialogueError> {
    if dia_len == 0 {
        return Err(DialogueError::InvalidParameter("dia_len must be at least 1".into()));
    }
    let id = format!(
        "d-{}",
        &hex64(stable_hash64(format!("{}:{seed}", actions.id).as_bytes()))[..12]
    );
    let mut dialogue = Dialogue {
        id,
        scenario: agents.scenario.name.clone(),
        persona_id: actions.persona.id(),
        action_seq_id: actions.id.clone(),
        turns: Vec::with_capacity(2 * dia_len as usize),
        dia_len,
        seed,
        terminated_early: false,
    };
    let abort = |dialogue: Dialogue, e: DialogueError| DialogueError::Aborted {
        partial: Box::new(dialogue),
        source: Box::new(e),
    };
    for round in 1..=dia_len {
        let turn = match user_turn(agents, &dialogue, &actions.final_memory.text, prompts) {
            Ok(t) => t,
            Err(e) => return Err(abort(dialogue, e)),
        };
        let closing = opts.is_closing(&turn.text);
        dialogue.turns.push(turn);
        match assistant_turn(agents, &dialogue, prompts) {
            Ok(t) => dialogue.turns.push(t),
            Err(e) => return Err(abort(dialogue, e)),
        }
        if closing {
            dialogue.terminated_early = round < dia_len;
            break;
        }
    }
    Ok(dialogue)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub coherence: u8,
    pub fluency: u8,
    pub diversity: u8,
    pub mean: f64,
}

impl QualityScore {
    pub fn new(coherence: u8, fluency: u8, diversity: u8) -> Self {
        Self {
            coherence,
            fluency,
            diversity,
            mean: (f64::from(coherence) + f64::from(fluency) + f64::from(diversity)) / 3.0,
        }
    }
}

fn standalone_integers(raw: &str) -> Vec<u64> {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i).copied();
        let after2 = chars.get(i + 1).copied();
        // Skip pieces of decimals like 4.5 and words like "v2".
        let glued_before = matches!(before, Some(c) if c == '.' || c.is_alphabetic());
        let glued_after = matches!(after, Some(c) if c.is_alphabetic())
            || (after == Some('.') && after2.is_some_and(|c| c.is_ascii_digit()));
        if !glued_before && !glued_after {
            let digits: String = chars[start..i].iter().collect();
            if let Ok(v) = digits.parse() {
                out.push(v);
            }
        }
    }
    out
}

/// Reads a 1–5 score. Strict path: the trimmed reply is exactly one integer
/// in range. Fallback: the first standalone integer in range.
pub fn parse_score(raw: &str) -> Result<u8, DialogueError> {
    let trimmed = raw.trim();
    if let Ok(v) = trimmed.parse::<u8>() {
        if (1..=5).contains(&v) {
            return Ok(v);
        }
        return Err(DialogueError::ScoreParse(raw.to_string()));
    }
    standalone_integers(trimmed)
        .into_iter()
        .find(|v| (1..=5).contains(v))
        .map(|v| v as u8)
        .ok_or_else(|| DialogueError::ScoreParse(raw.to_string()))
}

/// Scores one dimension, re-asking once if the reply cannot be parsed.
fn score_dimension(
    gateway: &dyn LlmBackend,
    dimension: &'static str,
    head: &str,
    transcript: &str,
    seed: u64,
) -> Result<u8, DialogueError> {
    let mut req = ChatRequest::single(score_prompt(head, transcript))
        .with_temperature(0.0)
        .with_seed(seed);
    let first = gateway.chat(&req)?;
    if let Ok(v) = parse_score(&first) {
        return Ok(v);
    }
    req.messages.push(Message::assistant(first));
    req.messages.push(Message::user(SCORE_REASK));
    let second = gateway.chat(&req)?;
    parse_score(&second).map_err(|_| DialogueError::Scoring {
        dimension,
        raw: second,
    })
}

pub fn proxy_score(gateway: &dyn LlmBackend, dialogue: &Dialogue) -> Result<QualityScore, DialogueError> {
    if dialogue.turns.is_empty() {
        return Err(DialogueError::InvalidParameter("cannot score an empty dialogue".into()));
    }
    let transcript = dialogue.transcript();
    let c = score_dimension(gateway, "coherence", SCORE_COHERENCE_HEAD, &transcript, dialogue.seed)?;
    let f = score_dimension(gateway, "fluency", SCORE_FLUENCY_HEAD, &transcript, dialogue.seed)?;
    let d = score_dimension(gateway, "diversity", SCORE_DIVERSITY_HEAD, &transcript, dialogue.seed)?;
    Ok(QualityScore::new(c, f, d))
}
