//! Nested optimization of the loss graph and prompt parameters.
//!
//! Three levels are interleaved:
//!
//! - outer: evolutionary search over [`MetricGraph`]s, scored by mean proxy
//!   quality of an evaluation batch (higher is better);
//! - middle: zeroth-order descent on θ, the multi-turn prompt parameters,
//!   minimizing the graph evaluated on dialogue-level contexts;
//! - inner: zeroth-order descent on φ, the single-turn parameters, minimizing
//!   the graph on turn-level contexts.
//!
//! The generation side is abstracted behind [`Pipeline`] so that the loop can
//! run against the LLM-backed [`LlmPipeline`] or the closed-form
//! [`SyntheticPipeline`].

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionSequence, Retriever};
use crate::dialogue::{
    proxy_score, run_dialogue, Dialogue, DialogueAgents, DialogueError, DialogueOptions,
    PromptSettings,
};
use crate::gateway::{CallBudget, GatewayError, LlmBackend};
use crate::graph::{
    init_graph, select_parent, spawn_offspring, GraphConfig, GraphError, MetricContext,
    MetricGraph, Population, Strategy, StrategyWeights,
};
use crate::hashing::derive_seed;
use crate::metrics::{context_from_documents, ContextOptions, MetricError};
use crate::persona::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum TrilevelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("run aborted in generation {}: {source}", partial.generations.len())]
    Aborted {
        partial: Box<TrilevelReport>,
        #[source]
        source: Box<TrilevelError>,
    },
}

impl TrilevelError {
    pub fn is_budget_exhausted(&self) -> bool {
        let gw = match self {
            Self::Gateway(e) => Some(e),
            Self::Dialogue(e) => e.gateway_error(),
            Self::Aborted { source, .. } => return source.is_budget_exhausted(),
            _ => None,
        };
        matches!(gw, Some(GatewayError::BudgetExhausted { .. }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Upper end of the temperature knob; `temperature = MAX_TEMPERATURE * sigmoid(x)`.
pub const MAX_TEMPERATURE: f64 = 1.2;

/// Optional prompt fragments, one parameter coordinate each. θ carries one
/// extra trailing coordinate for the temperature knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentBank {
    pub multi_turn: Vec<String>,
    pub single_turn: Vec<String>,
}

impl Default for FragmentBank {
    fn default() -> Self {
        Self {
            multi_turn: [
                "Refer to concrete figures from the memory or the references whenever they matter.",
                "Move the conversation toward a new sub-topic once the current question is settled.",
                "Ask for or give a short justification before accepting a conclusion.",
                "Keep the conversation focused on the user's original goal.",
            ]
            .map(String::from)
            .to_vec(),
            single_turn: [
                "keep it under three sentences",
                "vary your wording from earlier turns",
                "state one specific number if relevant",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl FragmentBank {
    pub fn theta_dim(&self) -> usize {
        self.multi_turn.len() + 1
    }

    pub fn phi_dim(&self) -> usize {
        self.single_turn.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl PromptParams {
    pub fn zeros(bank: &FragmentBank) -> Self {
        Self {
            theta: vec![0.0; bank.theta_dim()],
            phi: vec![0.0; bank.phi_dim()],
        }
    }

    pub fn check(&self, bank: &FragmentBank) -> Result<(), TrilevelError> {
        for (v, expected) in [(&self.theta, bank.theta_dim()), (&self.phi, bank.phi_dim())] {
            if v.len() != expected {
                return Err(TrilevelError::Dimension {
                    expected,
                    actual: v.len(),
                });
            }
        }
        if self.theta.iter().chain(&self.phi).any(|x| !x.is_finite()) {
            return Err(TrilevelError::NonFinite("prompt parameter"));
        }
        Ok(())
    }
}

/// Samples concrete prompt settings. Fragment `i` is kept when a uniform draw
/// falls below `sigmoid(coordinate i)`; draws are taken multi-turn first, then
/// single-turn, from a stream seeded by `seed`.
pub fn decode_prompts(
    params: &PromptParams,
    bank: &FragmentBank,
    seed: u64,
) -> Result<PromptSettings, TrilevelError> {
    params.check(bank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |frags: &[String], coords: &[f64]| -> Vec<String> {
        frags
            .iter()
            .zip(coords)
            .filter(|&(_, &x)| rng.random::<f64>() < sigmoid(x))
            .map(|(f, _)| f.clone())
            .collect()
    };
    let multi_turn = pick(&bank.multi_turn, &params.theta[..bank.multi_turn.len()]);
    let single_turn = pick(&bank.single_turn, &params.phi);
    let knob = params.theta[bank.multi_turn.len()];
    Ok(PromptSettings {
        multi_turn,
        single_turn,
        temperature: MAX_TEMPERATURE * sigmoid(knob),
    })
}

/// One two-point estimate with its ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoEstimate {
    pub gradient: Vec<f64>,
    pub direction: Vec<f64>,
    pub base_loss: f64,
    pub perturbed_loss: f64,
}

/// `((loss(z + mu·u) − loss(z)) / mu) · u` for a given direction `u`.
pub fn zo_estimate_along<F>(mut loss: F, params: &[f64], mu: f64, u: &[f64]) -> Result<ZoEstimate, TrilevelError>
where
    F: FnMut(&[f64]) -> Result<f64, TrilevelError>,
{
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(TrilevelError::InvalidParameter(format!("mu must be positive, got {mu}")));
    }
    if u.len() != params.len() {
        return Err(TrilevelError::Dimension {
            expected: params.len(),
            actual: u.len(),
        });
    }
    let base_loss = loss(params)?;
    let shifted: Vec<f64> = params.iter().zip(u).map(|(z, d)| z + mu * d).collect();
    let perturbed_loss = loss(&shifted)?;
    if !base_loss.is_finite() || !perturbed_loss.is_finite() {
        return Err(TrilevelError::NonFinite("loss"));
    }
    let scale = (perturbed_loss - base_loss) / mu;
    let gradient: Vec<f64> = u.iter().map(|d| scale * d).collect();
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(TrilevelError::NonFinite("gradient estimate"));
    }
    Ok(ZoEstimate {
        gradient,
        direction: u.to_vec(),
        base_loss,
        perturbed_loss,
    })
}

pub fn gaussian_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Two-point estimate along a standard normal direction drawn from `seed`.
pub fn zo_estimate<F>(loss: F, params: &[f64], mu: f64, seed: u64) -> Result<ZoEstimate, TrilevelError>
where
    F: FnMut(&[f64]) -> Result<f64, TrilevelError>,
{
    zo_estimate_along(loss, params, mu, &gaussian_direction(params.len(), seed))
}

pub fn zo_gradient<F>(loss: F, params: &[f64], mu: f64, seed: u64) -> Result<Vec<f64>, TrilevelError>
where
    F: FnMut(&[f64]) -> Result<f64, TrilevelError>,
{
    Ok(zo_estimate(loss, params, mu, seed)?.gradient)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoConfig {
    pub mu_theta: f64,
    pub mu_phi: f64,
    pub eta_theta: f64,
    pub eta_phi: f64,
    /// Dialogues per loss evaluation.
    pub samples: usize,
    pub inner_steps: usize,
    pub middle_steps: usize,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            mu_theta: 0.05,
            mu_phi: 0.05,
            eta_theta: 0.1,
            eta_phi: 0.1,
            samples: 3,
            inner_steps: 3,
            middle_steps: 3,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<(), TrilevelError> {
        let radii = [self.mu_theta, self.mu_phi];
        if radii.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(TrilevelError::InvalidParameter("perturbation radii must be positive".into()));
        }
        if [self.eta_theta, self.eta_phi].iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(TrilevelError::InvalidParameter("step sizes must be non-negative".into()));
        }
        if self.samples == 0 {
            return Err(TrilevelError::InvalidParameter("samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// What one loss evaluation produces.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    /// Mean over dialogues of per-dialogue turn-level contexts.
    pub turn_level: MetricContext,
    /// Context over the batch, one document per dialogue.
    pub dialogue_level: MetricContext,
    pub dialogues: Vec<Dialogue>,
}

/// Generation and scoring backend for the optimizer.
pub trait Pipeline: Sync {
    /// Produces `n` dialogues under `params`. Equal seeds must yield equal
    /// batches for equal parameters; this is what makes the two evaluations
    /// of one estimate share their random numbers.
    fn generate(&self, params: &PromptParams, bank: &FragmentBank, seed: u64, n: usize) -> Result<Batch, TrilevelError>;

    /// Mean proxy quality (1–5) of a batch.
    fn quality(&self, params: &PromptParams, batch: &Batch, seed: u64) -> Result<f64, TrilevelError>;

    /// Gateway calls consumed so far.
    fn calls_used(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Inner,
    Middle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub level: Level,
    /// Seed of the Gaussian direction.
    pub direction_seed: u64,
    /// Generation seeds actually passed to the pipeline for the base and the
    /// perturbed evaluation.
    pub base_seed: u64,
    pub perturbed_seed: u64,
    pub base_loss: f64,
    pub perturbed_loss: f64,
    /// θ or φ after the step.
    pub params: Vec<f64>,
}

fn graph_loss(
    graph: &MetricGraph,
    pipeline: &dyn Pipeline,
    params: &PromptParams,
    bank: &FragmentBank,
    seed: u64,
    n: usize,
    level: Level,
) -> Result<f64, TrilevelError> {
    let batch = pipeline.generate(params, bank, seed, n)?;
    let ctx = match level {
        Level::Inner => &batch.turn_level,
        Level::Middle => &batch.dialogue_level,
    };
    let loss = graph.evaluate(ctx)?;
    if !loss.is_finite() {
        return Err(TrilevelError::NonFinite("loss"));
    }
    Ok(loss)
}

fn zo_step(
    graph: &MetricGraph,
    params: &PromptParams,
    bank: &FragmentBank,
    zo: &ZoConfig,
    pipeline: &dyn Pipeline,
    seed: u64,
    level: Level,
) -> Result<(PromptParams, StepRecord), TrilevelError> {
    zo.validate()?;
    params.check(bank)?;
    let (current, mu, eta) = match level {
        Level::Inner => (&params.phi, zo.mu_phi, zo.eta_phi),
        Level::Middle => (&params.theta, zo.mu_theta, zo.eta_theta),
    };
    let gen_seed = derive_seed(seed, "generation");
    let direction_seed = derive_seed(seed, "direction");
    let mut seeds = Vec::with_capacity(2);
    let est = zo_estimate(
        |z| {
            let mut trial = params.clone();
            match level {
                Level::Inner => trial.phi = z.to_vec(),
                Level::Middle => trial.theta = z.to_vec(),
            }
            seeds.push(gen_seed);
            graph_loss(graph, pipeline, &trial, bank, gen_seed, zo.samples, level)
        },
        current,
        mu,
        direction_seed,
    )?;
    let updated: Vec<f64> = current.iter().zip(&est.gradient).map(|(z, g)| z - eta * g).collect();
    if updated.iter().any(|x| !x.is_finite()) {
        return Err(TrilevelError::NonFinite("updated parameters"));
    }
    let mut next = params.clone();
    match level {
        Level::Inner => next.phi = updated.clone(),
        Level::Middle => next.theta = updated.clone(),
    }
    let record = StepRecord {
        level,
        direction_seed,
        base_seed: seeds[0],
        perturbed_seed: seeds[1],
        base_loss: est.base_loss,
        perturbed_loss: est.perturbed_loss,
        params: updated,
    };
    Ok((next, record))
}

/// One descent step on φ against the turn-level loss, θ held fixed.
pub fn inner_phi_step(
    graph: &MetricGraph,
    params: &PromptParams,
    bank: &FragmentBank,
    zo: &ZoConfig,
    pipeline: &dyn Pipeline,
    seed: u64,
) -> Result<(PromptParams, StepRecord), TrilevelError> {
    zo_step(graph, params, bank, zo, pipeline, seed, Level::Inner)
}

/// One descent step on θ against the dialogue-level loss, φ held fixed.
pub fn middle_theta_step(
    graph: &MetricGraph,
    params: &PromptParams,
    bank: &FragmentBank,
    zo: &ZoConfig,
    pipeline: &dyn Pipeline,
    seed: u64,
) -> Result<(PromptParams, StepRecord), TrilevelError> {
    zo_step(graph, params, bank, zo, pipeline, seed, Level::Middle)
}

/// Alternates `middle_steps` rounds of (`inner_steps` φ steps, one θ step).
pub fn tune_params(
    graph: &MetricGraph,
    start: &PromptParams,
    bank: &FragmentBank,
    zo: &ZoConfig,
    pipeline: &dyn Pipeline,
    seed: u64,
) -> Result<(PromptParams, Vec<StepRecord>), TrilevelError> {
    let mut params = start.clone();
    let mut steps = Vec::with_capacity(zo.middle_steps * (zo.inner_steps + 1));
    for m in 0..zo.middle_steps {
        for i in 0..zo.inner_steps {
            let (p, rec) = inner_phi_step(graph, &params, bank, zo, pipeline, derive_seed(seed, &format!("phi-{m}-{i}")))?;
            params = p;
            steps.push(rec);
        }
        let (p, rec) = middle_theta_step(graph, &params, bank, zo, pipeline, derive_seed(seed, &format!("theta-{m}")))?;
        params = p;
        steps.push(rec);
    }
    Ok((params, steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrilevelConfig {
    pub generations: usize,
    pub offspring: usize,
    pub seed: u64,
    pub zo: ZoConfig,
    pub graph: GraphConfig,
    pub weights: StrategyWeights,
    pub bank: FragmentBank,
    /// Dialogues in each fitness evaluation batch.
    pub eval_samples: usize,
}

impl Default for TrilevelConfig {
    fn default() -> Self {
        Self {
            generations: 5,
            offspring: 8,
            seed: 0,
            zo: ZoConfig::default(),
            graph: GraphConfig::default(),
            weights: StrategyWeights::default(),
            bank: FragmentBank::default(),
            eval_samples: 3,
        }
    }
}

impl TrilevelConfig {
    pub fn validate(&self) -> Result<(), TrilevelError> {
        if self.generations == 0 || self.offspring == 0 || self.eval_samples == 0 {
            return Err(TrilevelError::InvalidParameter(
                "generations, offspring and eval_samples must be positive".into(),
            ));
        }
        self.zo.validate()?;
        self.graph.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub graph: MetricGraph,
    pub graph_id: String,
    #[serde(flatten)]
    pub strategy: Strategy,
    /// True for the previous parent carried into this generation unchanged.
    pub carried: bool,
    pub fitness: Option<f64>,
    pub params: PromptParams,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub eval_seed: u64,
    pub members: Vec<MemberRecord>,
    pub parent_index: usize,
    pub best_graph: MetricGraph,
    pub best_fitness: f64,
    pub best_params: PromptParams,
    pub calls_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrilevelReport {
    pub seed: u64,
    pub generations: Vec<GenerationRecord>,
    /// Parent fitness after each completed generation.
    pub fitness_history: Vec<f64>,
    pub truncated: bool,
    pub calls_used: u64,
}

impl TrilevelReport {
    pub fn best(&self) -> Option<&GenerationRecord> {
        self.generations.last()
    }

    /// One JSON object per generation.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for g in &self.generations {
            serde_json::to_writer(&mut w, g)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Candidate {
    graph: MetricGraph,
    strategy: Strategy,
    start: PromptParams,
}

fn evaluate_candidate(
    cand: &Candidate,
    cfg: &TrilevelConfig,
    pipeline: &dyn Pipeline,
    tune_seed: u64,
    eval_seed: u64,
) -> Result<MemberRecord, TrilevelError> {
    let (params, steps) = tune_params(&cand.graph, &cand.start, &cfg.bank, &cfg.zo, pipeline, tune_seed)?;
    let batch = pipeline.generate(&params, &cfg.bank, eval_seed, cfg.eval_samples)?;
    let fitness = pipeline.quality(&params, &batch, eval_seed)?;
    if !fitness.is_finite() {
        return Err(TrilevelError::NonFinite("fitness"));
    }
    Ok(MemberRecord {
        graph_id: cand.graph.id(),
        graph: cand.graph.clone(),
        strategy: cand.strategy,
        carried: false,
        fitness: Some(fitness),
        params,
        steps,
    })
}

/// Runs the evolutionary loop. Each generation evaluates its offspring in
/// parallel, keeps the previous parent alongside them, and picks the fittest
/// as the next parent. Offspring start from the parent's tuned parameters.
///
/// Budget exhaustion ends the run early with `truncated` set; other failures
/// return [`TrilevelError::Aborted`] carrying the completed generations.
pub fn run_trilevel(cfg: &TrilevelConfig, pipeline: &dyn Pipeline) -> Result<TrilevelReport, TrilevelError> {
    cfg.validate()?;
    let mut report = TrilevelReport {
        seed: cfg.seed,
        generations: Vec::with_capacity(cfg.generations),
        fitness_history: Vec::with_capacity(cfg.generations),
        truncated: false,
        calls_used: 0,
    };
    let mut candidates = Vec::with_capacity(cfg.offspring);
    for i in 0..cfg.offspring {
        candidates.push(Candidate {
            graph: init_graph(&cfg.graph, derive_seed(cfg.seed, &format!("init-{i}")))?,
            strategy: Strategy::Initial,
            start: PromptParams::zeros(&cfg.bank),
        });
    }
    let mut carried: Option<MemberRecord> = None;

    for generation in 0..cfg.generations {
        let eval_seed = derive_seed(cfg.seed, &format!("eval-{generation}"));
        let results: Vec<Result<MemberRecord, TrilevelError>> = candidates
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let tune_seed = derive_seed(cfg.seed, &format!("tune-{generation}-{i}"));
                evaluate_candidate(c, cfg, pipeline, tune_seed, eval_seed)
            })
            .collect();

        let mut members: Vec<MemberRecord> = carried.take().into_iter().collect();
        let mut failure = None;
        for r in results {
            match r {
                Ok(m) => members.push(m),
                Err(e) if e.is_budget_exhausted() => report.truncated = true,
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        report.calls_used = pipeline.calls_used();
        if let Some(e) = failure {
            return Err(TrilevelError::Aborted {
                partial: Box::new(report),
                source: Box::new(e),
            });
        }
        if members.is_empty() {
            break;
        }

        let mut pop = Population {
            members: Vec::with_capacity(members.len()),
            generation,
        };
        for m in &members {
            pop.push(m.graph.clone(), m.fitness);
        }
        let parent_index = select_parent(&pop)?;
        let parent = members[parent_index].clone();
        let best_fitness = parent.fitness.expect("evaluated member");
        log::info!(
            "generation {generation}: best fitness {best_fitness:.4} from {}",
            parent.graph
        );
        report.fitness_history.push(best_fitness);
        report.generations.push(GenerationRecord {
            generation,
            eval_seed,
            members,
            parent_index,
            best_graph: parent.graph.clone(),
            best_fitness,
            best_params: parent.params.clone(),
            calls_used: report.calls_used,
        });
        if report.truncated {
            break;
        }

        candidates = (0..cfg.offspring)
            .map(|i| {
                let seed = derive_seed(cfg.seed, &format!("spawn-{generation}-{i}"));
                let (graph, strategy) = spawn_offspring(&parent.graph, cfg.weights, &cfg.graph, seed)?;
                Ok(Candidate {
                    graph,
                    strategy,
                    start: parent.params.clone(),
                })
            })
            .collect::<Result<_, GraphError>>()?;
        carried = Some(MemberRecord {
            carried: true,
            steps: Vec::new(),
            ..parent
        });
    }
    Ok(report)
}

/// Closed-form stand-in for the dialogue pipeline.
///
/// Quality is `1 + 4·exp(−‖θ − target‖² / (2·dim θ))`. The dialogue-level
/// context moves with it (`distinct-*` rise, `length-penalty` falls as θ
/// approaches the target); the turn-level context tracks the distance of φ
/// to `phi_target`. Seeded Gaussian noise of scale `noise` is added to each
/// context entry, so equal seeds give equal batches.
#[derive(Debug, Default)]
pub struct SyntheticPipeline {
    pub theta_target: Vec<f64>,
    pub phi_target: Vec<f64>,
    pub noise: f64,
    calls: AtomicU64,
}

impl SyntheticPipeline {
    pub fn new(theta_target: Vec<f64>, phi_target: Vec<f64>, noise: f64) -> Self {
        Self {
            theta_target,
            phi_target,
            noise,
            calls: AtomicU64::new(0),
        }
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn true_quality(&self, theta: &[f64]) -> f64 {
        let d = Self::sq_dist(theta, &self.theta_target);
        1.0 + 4.0 * (-d / (2.0 * theta.len().max(1) as f64)).exp()
    }

    fn check_dims(&self, params: &PromptParams) -> Result<(), TrilevelError> {
        for (v, t) in [(&params.theta, &self.theta_target), (&params.phi, &self.phi_target)] {
            if v.len() != t.len() {
                return Err(TrilevelError::Dimension {
                    expected: t.len(),
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }
}

impl Pipeline for SyntheticPipeline {
    fn generate(&self, params: &PromptParams, bank: &FragmentBank, seed: u64, n: usize) -> Result<Batch, TrilevelError> {
        params.check(bank)?;
        self.check_dims(params)?;
        self.calls.fetch_add(n as u64, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            self.noise * z
        };
        let q = (self.true_quality(&params.theta) - 1.0) / 4.0;
        let dt = Self::sq_dist(&params.theta, &self.theta_target) / params.theta.len().max(1) as f64;
        let dp = Self::sq_dist(&params.phi, &self.phi_target) / params.phi.len().max(1) as f64;
        use crate::graph::LeafId::*;
        let dialogue_level = MetricContext::new()
            .with(Distinct1, q + noise())
            .with(Distinct2, q * q + noise())
            .with(TfidfDiversity, 0.5 * q + noise())
            .with(EmbeddingDiversity, 0.3 + 0.2 * q + noise())
            .with(LengthPenalty, dt + noise());
        let qp = 1.0 / (1.0 + dp);
        let turn_level = MetricContext::new()
            .with(Distinct1, qp + noise())
            .with(Distinct2, qp * qp + noise())
            .with(TfidfDiversity, 0.5 * qp + noise())
            .with(EmbeddingDiversity, 0.3 + 0.2 * qp + noise())
            .with(LengthPenalty, dp + noise());
        Ok(Batch {
            turn_level,
            dialogue_level,
            dialogues: Vec::new(),
        })
    }

    fn quality(&self, params: &PromptParams, _batch: &Batch, _seed: u64) -> Result<f64, TrilevelError> {
        self.check_dims(params)?;
        Ok(self.true_quality(&params.theta))
    }

    fn calls_used(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Generates dialogues with real (or mock) agents and scores them with the
/// proxy evaluator.
pub struct LlmPipeline<'a> {
    pub user: &'a dyn LlmBackend,
    pub assistant: &'a dyn LlmBackend,
    pub evaluator: &'a dyn LlmBackend,
    pub embedder: &'a dyn LlmBackend,
    pub retriever: &'a Retriever,
    pub scenario: &'a Scenario,
    /// Action sequences to draw users from; sample `i` of a batch seeded
    /// with `s` uses entry `(s + i) mod len`.
    pub sequences: &'a [ActionSequence],
    pub dia_len: u32,
    pub dialogue_opts: DialogueOptions,
    pub context_opts: ContextOptions,
    pub budget: Option<Arc<CallBudget>>,
}

impl LlmPipeline<'_> {
    fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TrilevelError> {
        texts
            .iter()
            .map(|t| Ok(self.embedder.embed(t)?.values))
            .collect()
    }

    fn contexts(&self, dialogues: &[Dialogue]) -> Result<(MetricContext, MetricContext), TrilevelError> {
        let docs: Vec<String> = dialogues.iter().map(Dialogue::joined_text).collect();
        let turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
        let dialogue_level = context_from_documents(&docs, &self.embed_all(&docs)?, turns, self.context_opts)?;
        let mut per_dialogue = Vec::with_capacity(dialogues.len());
        for d in dialogues {
            let texts: Vec<String> = d.turns.iter().map(|t| t.text.clone()).collect();
            per_dialogue.push(context_from_documents(&texts, &self.embed_all(&texts)?, texts.len(), self.context_opts)?);
        }
        let turn_level = MetricContext::mean(&per_dialogue).ok_or(TrilevelError::InvalidParameter("empty batch".into()))?;
        Ok((turn_level, dialogue_level))
    }
}

impl Pipeline for LlmPipeline<'_> {
    fn generate(&self, params: &PromptParams, bank: &FragmentBank, seed: u64, n: usize) -> Result<Batch, TrilevelError> {
        if self.sequences.is_empty() {
            return Err(TrilevelError::InvalidParameter("no action sequences".into()));
        }
        let agents = DialogueAgents {
            user: self.user,
            assistant: self.assistant,
            retriever: self.retriever,
            scenario: self.scenario,
        };
        let mut dialogues = Vec::with_capacity(n);
        for i in 0..n {
            let settings = decode_prompts(params, bank, derive_seed(seed, &format!("decode-{i}")))?;
            let idx = (seed % self.sequences.len() as u64) as usize;
            let seq = &self.sequences[(idx + i) % self.sequences.len()];
            let dialogue = run_dialogue(
                &agents,
                seq,
                &settings,
                self.dia_len,
                derive_seed(seed, &format!("dialogue-{i}")),
                &self.dialogue_opts,
            )?;
            dialogues.push(dialogue);
        }
        let (turn_level, dialogue_level) = self.contexts(&dialogues)?;
        Ok(Batch {
            turn_level,
            dialogue_level,
            dialogues,
        })
    }

    fn quality(&self, _params: &PromptParams, batch: &Batch, _seed: u64) -> Result<f64, TrilevelError> {
        if batch.dialogues.is_empty() {
            return Err(TrilevelError::InvalidParameter("empty batch".into()));
        }
        let mut total = 0.0;
        for d in &batch.dialogues {
            total += proxy_score(self.evaluator, d)?.mean;
        }
        Ok(total / batch.dialogues.len() as f64)
    }

    fn calls_used(&self) -> u64 {
        self.budget.as_ref().map_or(0, |b| b.used())
    }
}
