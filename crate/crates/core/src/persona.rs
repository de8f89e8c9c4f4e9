//! Candidate users for a scenario.
//!
//! The generator model is asked for a Python-style list literal. Replies are
//! never executed: [`parse_candidate_list`] extracts the outermost list,
//! rewrites Python literal syntax to JSON and validates every entry.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ChatRequest, GatewayError, LlmBackend, Message};
use crate::prompts::{fill, USER_GENERATOR, USER_GENERATOR_RETRY};

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("entry {index}: {reason}")]
    InvalidEntry { index: usize, reason: String },
    #[error("no list literal found")]
    NoList,
    #[error("list literal is not valid: {0}")]
    Syntax(String),
    #[error("could not parse candidates after {attempts} attempts: {last}")]
    Generation {
        attempts: usize,
        last: String,
        raw: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("pool file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub knowledge_refs: Vec<String>,
}

impl Scenario {
    pub fn new(name: impl Into<String>) -> Result<Self, PersonaError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(PersonaError::InvalidParameter("scenario name is empty".into()));
        }
        Ok(Self {
            name,
            keywords: Vec::new(),
            knowledge_refs: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateUser {
    pub identity: String,
    pub reason: String,
    pub questions: Vec<String>,
}

impl CandidateUser {
    pub fn validate(&self) -> Result<(), String> {
        if self.identity.trim().is_empty() {
            return Err("empty identity".into());
        }
        if self.reason.trim().is_empty() {
            return Err("empty reason".into());
        }
        if self.questions.is_empty() {
            return Err("no questions".into());
        }
        if self.questions.iter().any(|q| q.trim().is_empty()) {
            return Err("empty question".into());
        }
        Ok(())
    }

    /// Stable id derived from the persona's content.
    pub fn id(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        format!("u-{}", &crate::hashing::hex64(crate::hashing::stable_hash64(text.as_bytes()))[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub scenario: Scenario,
    pub users: Vec<CandidateUser>,
    pub seed: u64,
}

impl CandidatePool {
    /// Uniform draw from the pool, reproducible from `seed`.
    pub fn select(&self, seed: u64) -> &CandidateUser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        &self.users[rng.random_range(0..self.users.len())]
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "type": "header",
            "schema_version": 1,
            "scenario": self.scenario,
            "seed": self.seed,
        });
        writeln!(w, "{header}")?;
        for u in &self.users {
            writeln!(w, "{}", serde_json::to_string(u)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, PersonaError> {
        let mut lines = r.lines();
        let header: Value = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(|e| PersonaError::Io(e.to_string()))?)
                .map_err(|e| PersonaError::Io(format!("header: {e}")))?,
            None => return Err(PersonaError::Io("empty pool file".into())),
        };
        let scenario: Scenario = serde_json::from_value(header["scenario"].clone())
            .map_err(|e| PersonaError::Io(format!("header scenario: {e}")))?;
        let seed = header["seed"].as_u64().unwrap_or(0);
        let mut users = Vec::new();
        for (index, line) in lines.enumerate() {
            let line = line.map_err(|e| PersonaError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let user: CandidateUser =
                serde_json::from_str(&line).map_err(|e| PersonaError::InvalidEntry {
                    index,
                    reason: e.to_string(),
                })?;
            user.validate()
                .map_err(|reason| PersonaError::InvalidEntry { index, reason })?;
            users.push(user);
        }
        Ok(Self { scenario, users, seed })
    }

    pub fn load(path: &Path) -> Result<Self, PersonaError> {
        let f = std::fs::File::open(path).map_err(|e| PersonaError::Io(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Drops code fences and returns the text between the first `[` and its
/// matching `]`, honouring quoted strings.
fn outer_list(raw: &str) -> Option<&str> {
    let start = raw.find('[')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrites a Python literal to JSON: single-quoted strings become
/// double-quoted, `True`/`False`/`None` become JSON keywords, and trailing
/// commas are dropped.
fn python_literal_to_json(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' | '\'' => {
                let q = c;
                out.push('"');
                i += 1;
                while i < chars.len() && chars[i] != q {
                    match chars[i] {
                        '\\' if i + 1 < chars.len() => {
                            let next = chars[i + 1];
                            if next == '\'' {
                                out.push('\'');
                            } else {
                                out.push('\\');
                                out.push(next);
                            }
                            i += 2;
                            continue;
                        }
                        '"' => out.push_str("\\\""),
                        '\n' => out.push_str("\\n"),
                        '\t' => out.push_str("\\t"),
                        ch => out.push(ch),
                    }
                    i += 1;
                }
                out.push('"');
                i += 1;
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(',');
                }
                i += 1;
            }
            c if c.is_alphabetic() => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push_str(match word.as_str() {
                    "True" => "true",
                    "False" => "false",
                    "None" => "null",
                    other => other,
                });
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    match obj.get(key) {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Number(n)) => n.to_string(),
        _ => String::new(),
    }
}

pub fn parse_candidate_list(raw: &str) -> Result<Vec<CandidateUser>, PersonaError> {
    let list = outer_list(raw).ok_or(PersonaError::NoList)?;
    let json = python_literal_to_json(list);
    let entries: Vec<Value> =
        serde_json::from_str(&json).map_err(|e| PersonaError::Syntax(e.to_string()))?;
    entries
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let obj = entry.as_object().ok_or_else(|| PersonaError::InvalidEntry {
                index,
                reason: "not a mapping".into(),
            })?;
            let questions = match obj.get("questions") {
                Some(Value::Array(items)) => items
                    .iter()
                    .map(|q| q.as_str().map(|s| s.trim().to_string()).unwrap_or_default())
                    .collect(),
                Some(Value::String(s)) => vec![s.trim().to_string()],
                _ => Vec::new(),
            };
            let user = CandidateUser {
                identity: text_field(obj, "identity"),
                reason: text_field(obj, "reason"),
                questions,
            };
            user.validate()
                .map_err(|reason| PersonaError::InvalidEntry { index, reason })?;
            Ok(user)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonaOptions {
    pub max_parse_retries: usize,
    pub temperature: f64,
}

impl Default for PersonaOptions {
    fn default() -> Self {
        Self {
            max_parse_retries: 2,
            temperature: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub pool: CandidatePool,
    pub retries: usize,
}

/// Asks the generator for `num` candidate users, re-prompting with the parse
/// error when the reply cannot be read.
pub fn generate_candidates(
    gateway: &dyn LlmBackend,
    scenario: &Scenario,
    num: usize,
    seed: u64,
    opts: PersonaOptions,
) -> Result<Generated, PersonaError> {
    if num == 0 {
        return Err(PersonaError::InvalidParameter("num must be at least 1".into()));
    }
    let prompt = fill(USER_GENERATOR, &[("num", &num.to_string()), ("area", &scenario.name)]);
    let mut req = ChatRequest::single(prompt)
        .with_temperature(opts.temperature)
        .with_seed(seed);
    let mut last_err = String::new();
    let mut last_raw = String::new();
    for attempt in 0..=opts.max_parse_retries {
        let raw = gateway.chat(&req)?;
        match parse_candidate_list(&raw) {
            Ok(users) if !users.is_empty() => {
                return Ok(Generated {
                    pool: CandidatePool {
                        scenario: scenario.clone(),
                        users,
                        seed,
                    },
                    retries: attempt,
                })
            }
            Ok(_) => last_err = "empty list".into(),
            Err(e) => last_err = e.to_string(),
        }
        log::warn!("candidate list unparseable on attempt {}: {last_err}", attempt + 1);
        req.messages.push(Message::assistant(raw.clone()));
        req.messages.push(Message::user(fill(USER_GENERATOR_RETRY, &[("error", &last_err)])));
        last_raw = raw;
    }
    Err(PersonaError::Generation {
        attempts: opts.max_parse_retries + 1,
        last: last_err,
        raw: last_raw,
    })
}
