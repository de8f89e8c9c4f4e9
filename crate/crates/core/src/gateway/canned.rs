//! Built-in offline responder that recognises the pipeline's prompt
//! templates and produces plausible, deterministic replies. It lets every
//! CLI stage run end to end without a model server.

use regex::Regex;

use super::{ChatRequest, GatewayError};
use crate::hashing::stable_hash64;
use crate::metrics::{distinct_n, tokenize};

const IDENTITIES: &[&str] = &[
    "sales engineer",
    "junior accountant",
    "field technician",
    "project manager",
    "research scientist",
    "regional director",
    "procurement officer",
    "graduate intern",
];

const REASONS: &[&str] = &[
    "attended a client workshop in another city",
    "travelled to a supplier audit",
    "presented at an industry conference",
    "visited a branch office for onboarding",
    "joined a three-day training course",
];

const EXPENSES: &[(&str, u32, u32)] = &[
    ("hotel", 280, 620),
    ("train ticket", 90, 560),
    ("flight", 450, 1800),
    ("taxi", 25, 140),
    ("meal", 30, 160),
    ("conference fee", 300, 1200),
    ("parking", 10, 60),
];

const TOPICS: &[&str] = &[
    "hotel cost limits",
    "taxi receipt requirements",
    "meal allowance rules",
    "flight class eligibility",
    "conference fee claims",
    "missing invoice handling",
    "per diem calculation",
    "reimbursement deadline",
];

const CLOSING: &str = "Thank you, that's all.";

pub struct CannedResponder {
    salt: u64,
    num_re: Regex,
    area_re: Regex,
}

impl CannedResponder {
    pub fn for_model(name: &str) -> impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync {
        let this = Self {
            salt: stable_hash64(name.as_bytes()),
            num_re: Regex::new(r"construct (\d+) entries").expect("static regex"),
            area_re: Regex::new(r"related to \**(.+?)\**[,.]").expect("static regex"),
        };
        move |req| Ok(this.respond(req))
    }

    fn rng(&self, req: &ChatRequest, extra: &str) -> u64 {
        let mut bytes = req.last_user_content().as_bytes().to_vec();
        bytes.extend_from_slice(&req.seed.unwrap_or(0).to_be_bytes());
        bytes.extend_from_slice(&self.salt.to_be_bytes());
        bytes.extend_from_slice(extra.as_bytes());
        stable_hash64(&bytes)
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let prompt = req.last_user_content();
        let area = self
            .area_re
            .captures(prompt)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| "business travel reimbursement".into());
        if prompt.contains("including identity, reason, and questions") {
            let num = self
                .num_re
                .captures(prompt)
                .and_then(|c| c[1].parse::<usize>().ok())
                .unwrap_or(1);
            self.personas(req, num, &area)
        } else if prompt.contains("carry out this operation and record the expenses") {
            self.action(req)
        } else if prompt.contains("organize and form new memories") {
            self.memory(prompt)
        } else if prompt.contains("you are a user seeking consultation") {
            self.user_turn(req, prompt)
        } else if prompt.contains("assistant.") && prompt.contains("**Assistant Dialogue Requirements:**") {
            self.assistant_turn(req)
        } else if prompt.starts_with("You are a dialogue quality evaluator") {
            self.score(req, prompt)
        } else if prompt.starts_with("Summarize the topic") {
            let h = self.rng(req, "topic");
            TOPICS[(h % TOPICS.len() as u64) as usize].to_string()
        } else if prompt.starts_with("You are a problem generation model") {
            self.problem(req)
        } else if prompt.starts_with("Read the dialogue and answer the question") {
            self.answer(req, prompt)
        } else if prompt.starts_with("Your reply") || prompt.starts_with("Your previous reply") {
            // Corrective re-prompts: answer the original instruction again.
            let first = req.messages.first().map(|m| m.content.clone()).unwrap_or_default();
            let mut inner = req.clone();
            inner.messages = vec![super::Message::user(first)];
            self.respond(&inner)
        } else {
            "OK.".into()
        }
    }

    fn expense(&self, h: u64) -> (&'static str, u32) {
        let (item, lo, hi) = EXPENSES[(h % EXPENSES.len() as u64) as usize];
        let amount = lo + ((h >> 16) % u64::from(hi - lo + 1)) as u32;
        (item, amount)
    }

    fn personas(&self, req: &ChatRequest, num: usize, area: &str) -> String {
        let entries: Vec<serde_json::Value> = (0..num)
            .map(|i| {
                let h = self.rng(req, &format!("persona{i}"));
                let identity = IDENTITIES[(h % IDENTITIES.len() as u64) as usize];
                let reason = REASONS[((h >> 8) % REASONS.len() as u64) as usize];
                let (item, amount) = self.expense(h >> 4);
                serde_json::json!({
                    "identity": format!("{identity} #{}", i + 1),
                    "reason": format!("{reason} and needs {area}"),
                    "questions": [
                        format!("Is a {item} of {amount} within the allowed limit?"),
                        format!("Which receipts are required for the {item}?"),
                    ],
                })
            })
            .collect();
        serde_json::to_string(&entries).expect("json")
    }

    fn action(&self, req: &ChatRequest) -> String {
        let h = self.rng(req, "action");
        let (a, x) = self.expense(h);
        let (b, y) = self.expense(h >> 24);
        format!("Completed one session of the trip. Expenses: {a} {x}; {b} {y}.")
    }

    fn memory(&self, prompt: &str) -> String {
        let section = |start: &str, end: &str| -> String {
            prompt
                .split_once(start)
                .map(|(_, rest)| rest.split_once(end).map_or(rest, |(s, _)| s))
                .unwrap_or("")
                .trim()
                .to_string()
        };
        let act = section("This is your current action:", "This is your previous memory:");
        let prev = section("This is your previous memory:", "You need to organize");
        format!("{prev}\nRecorded: {act}")
    }

    fn history_rounds(prompt: &str) -> usize {
        prompt
            .split_once("**Dialogue History:**")
            .map(|(_, h)| h.lines().filter(|l| l.starts_with("User:")).count())
            .unwrap_or(0)
    }

    fn user_turn(&self, req: &ChatRequest, prompt: &str) -> String {
        let rounds = Self::history_rounds(prompt);
        let h = self.rng(req, "user");
        let (item, amount) = self.expense(h);
        let memory_numbers: Vec<&str> = prompt
            .split(|c: char| !c.is_ascii_digit())
            .filter(|s| s.len() >= 2)
            .collect();
        let figure = memory_numbers
            .get((h % memory_numbers.len().max(1) as u64) as usize)
            .copied()
            .map(str::to_string)
            .unwrap_or_else(|| amount.to_string());
        let close_at = 3 + (h % 3) as usize;
        match rounds {
            0 => format!("Hi, I recently travelled for work and paid {figure} for a {item}; can this be reimbursed?"),
            r if r + 1 >= close_at => format!("Understood, I will submit the {item} receipt. {CLOSING}"),
            _ => format!("I also spent {amount} on a {item}, is there a cap for that?"),
        }
    }

    fn assistant_turn(&self, req: &ChatRequest) -> String {
        let h = self.rng(req, "assistant");
        let (item, amount) = self.expense(h);
        let cap = amount + (h % 50) as u32;
        match h % 3 {
            0 => format!("Yes, the {item} can be processed up to {cap}; please attach the original invoice."),
            1 => format!("The policy caps {item} claims at {cap}, so {amount} can be reimbursed in full."),
            _ => format!("Only {} of the {item} is eligible, since the limit per day is lower.", amount / 2),
        }
    }

    fn score(&self, req: &ChatRequest, prompt: &str) -> String {
        let dialogue = prompt.split_once("Dialogue content below:").map_or("", |(_, d)| d);
        let tokens = tokenize(dialogue);
        let d1 = distinct_n(&tokens, 1).unwrap_or(0.0);
        let base = if prompt.contains("lexical and stylistic diversity") {
            1.0 + (d1 * 5.0).floor()
        } else {
            3.0 + (self.rng(req, "score") % 3) as f64
        };
        (base.clamp(1.0, 5.0) as u8).to_string()
    }

    fn problem(&self, req: &ChatRequest) -> String {
        let h = self.rng(req, "problem");
        let (a, x) = self.expense(h);
        let (b, y) = self.expense(h >> 20);
        if h.is_multiple_of(2) {
            format!(
                "Kind: math\nQuestion: If the {a} of {x} is capped at 80 percent and the {b} of {y} is fully covered, how much is reimbursed in total?"
            )
        } else {
            format!(
                "Kind: common-sense\nQuestion: Given the receipts described, can the {a} be claimed without the {b} invoice?"
            )
        }
    }

    fn answer(&self, req: &ChatRequest, prompt: &str) -> String {
        let h = self.rng(req, "answer");
        if prompt.contains("yes or no") {
            if h.is_multiple_of(2) { "yes" } else { "no" }.into()
        } else {
            format!("{}", 100 + h % 900)
        }
    }
}
