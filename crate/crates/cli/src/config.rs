//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use dialforge::gateway::{BackendConfig, Gateway};
use dialforge::hashing::{hex64, stable_hash64};
use dialforge::refinery::RefineConfig;
use dialforge::trilevel::TrilevelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Counts {
    pub personas: usize,
    pub action_rounds: u32,
    pub dia_len: u32,
    pub dialogues: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            personas: 5,
            action_rounds: 4,
            dia_len: 5,
            dialogues: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backends {
    pub generator: BackendConfig,
    pub user: BackendConfig,
    pub assistant: BackendConfig,
    pub evaluator: BackendConfig,
    pub reasoning: Vec<BackendConfig>,
    pub problem_generator: BackendConfig,
    pub embedder: BackendConfig,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            generator: BackendConfig::mock_builtin("generator"),
            user: BackendConfig::mock_builtin("user"),
            assistant: BackendConfig::mock_builtin("assistant"),
            evaluator: BackendConfig::mock_builtin("evaluator"),
            reasoning: (1..=3).map(|i| BackendConfig::mock_builtin(&format!("reasoner-{i}"))).collect(),
            problem_generator: BackendConfig::mock_builtin("problem-generator"),
            embedder: BackendConfig::mock_builtin("embedder"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub personas: u64,
    pub actions: u64,
    pub dialogues: u64,
    pub trilevel: u64,
    pub refine: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            personas: 7,
            actions: 100,
            dialogues: 200,
            trilevel: 0,
            refine: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: String,
    /// Directory of `.txt` reference documents.
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Top documents retrieved per query.
    pub top_r: usize,
    pub counts: Counts,
    pub seeds: Seeds,
    pub backends: Backends,
    pub trilevel: TrilevelConfig,
    pub refine: RefineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "business travel reimbursement".into(),
            corpus: None,
            output_dir: PathBuf::from("dialforge-out"),
            top_r: 3,
            counts: Counts::default(),
            seeds: Seeds::default(),
            backends: Backends::default(),
            trilevel: TrilevelConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::User(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && p.as_os_str() != "builtin" {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(c) = self.corpus.as_mut() {
            fix(c);
        }
        for b in self.backends_mut() {
            if let Some(s) = b.script.as_mut() {
                fix(s);
            }
        }
    }

    fn backends_mut(&mut self) -> impl Iterator<Item = &mut BackendConfig> {
        let b = &mut self.backends;
        [
            &mut b.generator,
            &mut b.user,
            &mut b.assistant,
            &mut b.evaluator,
            &mut b.problem_generator,
            &mut b.embedder,
        ]
        .into_iter()
        .chain(b.reasoning.iter_mut())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.scenario.trim().is_empty() {
            return Err(CliError::User("scenario must not be empty".into()));
        }
        if self.top_r == 0 {
            return Err(CliError::User("top_r must be at least 1".into()));
        }
        if self.backends.reasoning.is_empty() {
            return Err(CliError::User("at least one reasoning backend is required".into()));
        }
        let b = &self.backends;
        for cfg in [&b.generator, &b.user, &b.assistant, &b.evaluator, &b.problem_generator, &b.embedder]
            .into_iter()
            .chain(&b.reasoning)
        {
            cfg.validate().map_err(|e| CliError::User(e.to_string()))?;
            if let Some(script) = &cfg.script {
                if script.as_os_str() != "builtin" && !script.exists() {
                    return Err(CliError::User(format!("mock script {} does not exist", script.display())));
                }
            }
        }
        self.trilevel.validate().map_err(|e| CliError::User(e.to_string()))?;
        self.refine.validate().map_err(|e| CliError::User(e.to_string()))?;
        Ok(())
    }

    /// The corpus directory, which must exist.
    pub fn corpus_dir(&self) -> Result<&Path, CliError> {
        let dir = self
            .corpus
            .as_deref()
            .ok_or_else(|| CliError::User("no corpus configured (set `corpus` or pass --corpus)".into()))?;
        if !dir.is_dir() {
            return Err(CliError::User(format!("corpus {} is not a directory", dir.display())));
        }
        Ok(dir)
    }

    /// Hash of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex64(stable_hash64(&json))
    }
}

pub fn build(cfg: &BackendConfig) -> Result<Gateway, CliError> {
    cfg.build().map_err(|e| CliError::User(e.to_string()))
}
