//! Subcommand implementations. Each returns the JSON summary it printed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use dialforge::actions::{ingest_corpus, simulate, ActionOptions, ActionSequence, Retriever};
use dialforge::dialogue::{run_dialogue, Dialogue, DialogueAgents, DialogueOptions, PromptSettings};
use dialforge::gateway::{Budgeted, CallBudget, Gateway, LlmBackend};
use dialforge::hashing::derive_seed;
use dialforge::metrics::{dataset_stats, ContextOptions};
use dialforge::persona::{generate_candidates, CandidateUser, PersonaOptions, Scenario};
use dialforge::refinery::{
    derive_initial_tasks, refine_until_hard, DatasetRecord, DifficultEntry, DifficultKb, RefineAgents, RefineState,
    VerificationPolicy,
};
use dialforge::reports::{similarity_report, topic_report};
use dialforge::store::{self, read_jsonl, Store, VerificationStatus};
use dialforge::trilevel::{decode_prompts, run_trilevel, LlmPipeline, TrilevelReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::Command;
use crate::config::{build, RunConfig};
use crate::error::CliError;

pub const REPORTS_DIR: &str = "reports";

/// Resolved inputs shared by every command.
pub struct Context {
    pub cfg: RunConfig,
    pub store: Store,
}

impl Context {
    pub fn open(cfg: RunConfig) -> Result<Self, CliError> {
        let store = Store::open(&cfg.output_dir)
            .map_err(|e| CliError::User(format!("cannot open store {}: {e}", cfg.output_dir.display())))?;
        Ok(Self { cfg, store })
    }

    fn scenario(&self) -> Result<Scenario, CliError> {
        Scenario::new(self.cfg.scenario.clone()).map_err(|e| CliError::User(e.to_string()))
    }

    fn retriever(&self, embedder: Gateway) -> Result<Retriever, CliError> {
        let (kb, warnings) = ingest_corpus(self.cfg.corpus_dir()?).map_err(|e| CliError::User(e.to_string()))?;
        for w in warnings {
            log::warn!("{w}");
        }
        Retriever::build(embedder, kb, self.cfg.top_r).map_err(CliError::pipeline)
    }

    fn action_sequences(&self) -> Result<Vec<ActionSequence>, CliError> {
        let seqs: Vec<ActionSequence> = self.store.load(store::ACTIONS).map_err(CliError::pipeline)?;
        if seqs.is_empty() {
            return Err(CliError::User("no action sequences in the store; run simulate-actions first".into()));
        }
        Ok(seqs)
    }

    fn dialogues(&self, dataset: Option<&Path>) -> Result<Vec<Dialogue>, CliError> {
        let dialogues: Vec<Dialogue> = match dataset {
            Some(path) => read_jsonl(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?,
            None => self.store.load(store::DIALOGUES).map_err(CliError::pipeline)?,
        };
        if dialogues.is_empty() {
            return Err(CliError::User("no dialogues to report on".into()));
        }
        Ok(dialogues)
    }

    fn write_report<T: Serialize>(&self, kind: &str, report: &T) -> Result<PathBuf, CliError> {
        let dir = self.cfg.output_dir.join(REPORTS_DIR);
        fs::create_dir_all(&dir).map_err(CliError::pipeline)?;
        let path = dir.join(format!("{kind}.json"));
        fs::write(&path, serde_json::to_vec_pretty(report).map_err(CliError::pipeline)?).map_err(CliError::pipeline)?;
        Ok(path)
    }
}

/// Seeds a command will use, for the manifest.
pub fn seeds_used(cmd: &Command, cfg: &RunConfig) -> Value {
    let s = &cfg.seeds;
    match cmd {
        Command::GenUsers { .. } => json!({ "personas": s.personas }),
        Command::SimulateActions { .. } => json!({ "actions": s.actions }),
        Command::GenDialogues { .. } => json!({ "dialogues": s.dialogues }),
        Command::EvolveMetric { .. } => json!({ "trilevel": cfg.trilevel.seed }),
        Command::RefineDataset { .. } => json!({ "refine": cfg.refine.seed }),
        _ => json!({}),
    }
}

pub fn run(cmd: &Command, ctx: &Context) -> Result<Value, CliError> {
    match cmd {
        Command::GenUsers { .. } => gen_users(ctx),
        Command::SimulateActions { .. } => simulate_actions(ctx),
        Command::GenDialogues { evolved, .. } => gen_dialogues(ctx, *evolved),
        Command::EvolveMetric { budget, .. } => evolve_metric(ctx, *budget),
        Command::RefineDataset { auto_accept, .. } => refine_dataset(ctx, *auto_accept),
        Command::Stats { dataset } => stats(ctx, dataset.as_deref()),
        Command::ReportSimilarity { dataset } => report_similarity(ctx, dataset.as_deref()),
        Command::ReportTopics { dataset } => report_topics(ctx, dataset.as_deref()),
        Command::Serve { .. } => unreachable!("serve is dispatched separately"),
    }
}

fn gen_users(ctx: &Context) -> Result<Value, CliError> {
    let num = ctx.cfg.counts.personas;
    if num == 0 {
        return Err(CliError::User("--num must be at least 1".into()));
    }
    let generator = build(&ctx.cfg.backends.generator)?;
    let scenario = ctx.scenario()?;
    let generated = generate_candidates(generator.as_ref(), &scenario, num, ctx.cfg.seeds.personas, PersonaOptions::default())
        .map_err(CliError::pipeline)?;
    for user in &generated.pool.users {
        let mut record = serde_json::to_value(user).map_err(CliError::pipeline)?;
        record["id"] = Value::String(user.id());
        ctx.store.append_value(store::PERSONAS, record).map_err(CliError::pipeline)?;
    }
    Ok(json!({ "personas": generated.pool.users.len(), "retries": generated.retries }))
}

fn simulate_actions(ctx: &Context) -> Result<Value, CliError> {
    let rounds = ctx.cfg.counts.action_rounds;
    if rounds == 0 {
        return Err(CliError::User("--rounds must be at least 1".into()));
    }
    let personas: Vec<CandidateUser> = ctx.store.load(store::PERSONAS).map_err(CliError::pipeline)?;
    if personas.is_empty() {
        return Err(CliError::User("no personas in the store; run gen-users first".into()));
    }
    let b = &ctx.cfg.backends;
    let (user, embedder) = (build(&b.user)?, build(&b.embedder)?);
    let retriever = ctx.retriever(embedder)?;
    let scenario = ctx.scenario()?;
    let mut ids = Vec::with_capacity(personas.len());
    for (i, persona) in personas.iter().enumerate() {
        let seed = derive_seed(ctx.cfg.seeds.actions, &format!("persona-{i}"));
        let seq = simulate(user.as_ref(), persona, &scenario, &retriever, rounds, seed, ActionOptions::default())
            .map_err(CliError::pipeline)?;
        ids.push(ctx.store.append(store::ACTIONS, &seq).map_err(CliError::pipeline)?);
    }
    Ok(json!({ "sequences": ids.len(), "rounds": rounds }))
}

fn latest_run(store: &Store) -> Result<Option<TrilevelReport>, CliError> {
    let runs: Vec<TrilevelReport> = store.load(store::RUNS).map_err(CliError::pipeline)?;
    Ok(runs.into_iter().rev().find(|r| !r.generations.is_empty()))
}

fn gen_dialogues(ctx: &Context, evolved: bool) -> Result<Value, CliError> {
    let count = ctx.cfg.counts.dialogues;
    let dia_len = ctx.cfg.counts.dia_len;
    if count == 0 || dia_len == 0 {
        return Err(CliError::User("--count and --dia-len must be at least 1".into()));
    }
    let seqs = ctx.action_sequences()?;
    let params = if evolved {
        let run = latest_run(&ctx.store)?
            .ok_or_else(|| CliError::User("no completed evolve-metric run in the store".into()))?;
        run.best().map(|g| g.best_params.clone())
    } else {
        None
    };
    let b = &ctx.cfg.backends;
    let (user, assistant) = (build(&b.user)?, build(&b.assistant)?);
    let retriever = ctx.retriever(build(&b.embedder)?)?;
    let scenario = ctx.scenario()?;
    let agents = DialogueAgents {
        user: user.as_ref(),
        assistant: assistant.as_ref(),
        retriever: &retriever,
        scenario: &scenario,
    };
    let opts = DialogueOptions::default();
    let mut turns = 0;
    let mut early = 0;
    for i in 0..count {
        let seed = derive_seed(ctx.cfg.seeds.dialogues, &format!("dialogue-{i}"));
        let settings = match &params {
            Some(p) => decode_prompts(p, &ctx.cfg.trilevel.bank, derive_seed(seed, "decode")).map_err(|e| {
                CliError::User(format!("evolved parameters do not fit the configured fragment bank: {e}"))
            })?,
            None => PromptSettings::default(),
        };
        let d = run_dialogue(&agents, &seqs[i % seqs.len()], &settings, dia_len, seed, &opts).map_err(CliError::pipeline)?;
        turns += d.turns.len();
        early += usize::from(d.terminated_early);
        ctx.store.append(store::DIALOGUES, &d).map_err(CliError::pipeline)?;
    }
    Ok(json!({ "dialogues": count, "turns": turns, "terminated_early": early, "evolved": evolved }))
}

fn evolve_metric(ctx: &Context, budget: Option<u64>) -> Result<Value, CliError> {
    if budget == Some(0) {
        return Err(CliError::User("--budget must be at least 1".into()));
    }
    let seqs = ctx.action_sequences()?;
    let calls = CallBudget::new(budget);
    let b = &ctx.cfg.backends;
    let wrap = |cfg| Ok::<_, CliError>(Budgeted::wrap(build(cfg)?, calls.clone()));
    let (user, assistant, evaluator, embedder) = (wrap(&b.user)?, wrap(&b.assistant)?, wrap(&b.evaluator)?, wrap(&b.embedder)?);
    let retriever = ctx.retriever(embedder.clone())?;
    let scenario = ctx.scenario()?;
    let pipeline = LlmPipeline {
        user: user.as_ref(),
        assistant: assistant.as_ref(),
        evaluator: evaluator.as_ref(),
        embedder: embedder.as_ref(),
        retriever: &retriever,
        scenario: &scenario,
        sequences: &seqs,
        dia_len: ctx.cfg.counts.dia_len,
        dialogue_opts: DialogueOptions::default(),
        context_opts: ContextOptions::default(),
        budget: Some(calls.clone()),
    };
    let report = run_trilevel(&ctx.cfg.trilevel, &pipeline).map_err(CliError::pipeline)?;
    if report.generations.is_empty() {
        return Err(CliError::Pipeline(format!(
            "call budget exhausted after {} calls before the first generation completed",
            report.calls_used
        )));
    }
    let run_id = ctx.store.append(store::RUNS, &report).map_err(CliError::pipeline)?;
    let dir = ctx.cfg.output_dir.join("runs");
    fs::create_dir_all(&dir).map_err(CliError::pipeline)?;
    let file = fs::File::create(dir.join(format!("{run_id}.jsonl"))).map_err(CliError::pipeline)?;
    report.write_manifest(std::io::BufWriter::new(file)).map_err(CliError::pipeline)?;
    let best = report.best().expect("non-empty generations");
    let graph_path = dir.join(format!("{run_id}.graph"));
    fs::write(&graph_path, format!("{}\n", best.best_graph)).map_err(CliError::pipeline)?;
    Ok(json!({
        "run_id": run_id,
        "generations": report.generations.len(),
        "best_fitness": best.best_fitness,
        "best_graph": best.best_graph.to_string(),
        "fitness_history": report.fitness_history,
        "truncated": report.truncated,
        "calls_used": report.calls_used,
    }))
}

fn refine_dataset(ctx: &Context, auto_accept: bool) -> Result<Value, CliError> {
    let mut rcfg = ctx.cfg.refine;
    if auto_accept {
        rcfg.verification = VerificationPolicy::AutoAccept;
    }
    let dialogues: Vec<Dialogue> = ctx.store.load(store::DIALOGUES).map_err(CliError::pipeline)?;
    if dialogues.is_empty() {
        return Err(CliError::User("no dialogues in the store; run gen-dialogues first".into()));
    }
    let b = &ctx.cfg.backends;
    let models: Vec<Gateway> = b.reasoning.iter().map(build).collect::<Result<_, _>>()?;
    let model_refs: Vec<&dyn LlmBackend> = models.iter().map(|m| m.as_ref()).collect();
    let (generator, embedder) = (build(&b.problem_generator)?, build(&b.embedder)?);

    let mut dataset: Vec<DatasetRecord> = ctx.store.load(store::DATASET).map_err(CliError::pipeline)?;
    let mut derived = 0;
    if dataset.is_empty() {
        let (records, skipped) = derive_initial_tasks(generator.as_ref(), model_refs[0], &dialogues, rcfg.seed)
            .map_err(CliError::pipeline)?;
        if !skipped.is_empty() {
            log::warn!("{} dialogues produced no task", skipped.len());
        }
        for r in &records {
            ctx.store.append(store::DATASET, r).map_err(CliError::pipeline)?;
        }
        derived = records.len();
        dataset = records;
    }
    let kb_entries: Vec<DifficultEntry> = ctx.store.load(store::KB).map_err(CliError::pipeline)?;
    let queue = ctx.store.queue(None).map_err(CliError::pipeline)?;
    let before = RefineState {
        dataset,
        kb: DifficultKb { entries: kb_entries },
        queue,
    };
    let mut state = before.clone();
    let by_id: BTreeMap<String, Dialogue> = dialogues.into_iter().map(|d| (d.id.clone(), d)).collect();
    let agents = RefineAgents {
        models: &model_refs,
        generator: generator.as_ref(),
        embedder: embedder.as_ref(),
        dialogues: &by_id,
    };
    let outcome = refine_until_hard(&mut state, &agents, &rcfg).map_err(CliError::pipeline)?;
    persist_refine(&ctx.store, &before, &state)?;
    let series: Vec<f64> = outcome.reports.iter().map(|r| r.easy_ratio).collect();
    let last = outcome.reports.last();
    Ok(json!({
        "derived": derived,
        "iterations": outcome.reports.len(),
        "easy_ratio": last.map_or(0.0, |r| r.easy_ratio),
        "easy_ratio_series": series,
        "kb_size": state.kb.len(),
        "pending_verification": last.map_or(0, |r| r.pending_verification),
        "truncated": outcome.truncated,
        "reports": outcome.reports,
    }))
}

/// Appends whatever the refinement changed: new or updated records and
/// queue items, and knowledge-base entries past the loaded prefix.
fn persist_refine(store: &Store, before: &RefineState, after: &RefineState) -> Result<(), CliError> {
    let old_records: HashMap<&str, &DatasetRecord> = before.dataset.iter().map(|r| (r.id.as_str(), r)).collect();
    for r in &after.dataset {
        if old_records.get(r.id.as_str()) != Some(&r) {
            store.append(store::DATASET, r).map_err(CliError::pipeline)?;
        }
    }
    for entry in &after.kb.entries[before.kb.len()..] {
        store.append(store::KB, entry).map_err(CliError::pipeline)?;
    }
    let old_items: HashMap<&str, _> = before.queue.iter().map(|i| (i.id.as_str(), i)).collect();
    for item in &after.queue {
        if old_items.get(item.id.as_str()) == Some(&item) {
            continue;
        }
        // A verdict recorded while refinement ran must not be overwritten.
        if let Some(old) = old_items.get(item.id.as_str()) {
            let current: Option<dialforge::store::VerificationItem> =
                store.get(store::QUEUE, &item.id).map_err(CliError::pipeline)?;
            if current.as_ref().is_some_and(|c| c != *old && old.status == VerificationStatus::Pending) {
                log::warn!("queue item {} changed during refinement; keeping the stored verdict", item.id);
                continue;
            }
        }
        store.append(store::QUEUE, item).map_err(CliError::pipeline)?;
    }
    Ok(())
}

fn stats(ctx: &Context, dataset: Option<&Path>) -> Result<Value, CliError> {
    let dialogues = ctx.dialogues(dataset)?;
    let report = dataset_stats(&dialogues).map_err(|e| CliError::User(e.to_string()))?;
    ctx.write_report("stats", &report)?;
    serde_json::to_value(report).map_err(CliError::pipeline)
}

fn report_similarity(ctx: &Context, dataset: Option<&Path>) -> Result<Value, CliError> {
    let dialogues = ctx.dialogues(dataset)?;
    if dialogues.len() < 2 {
        return Err(CliError::User("similarity needs at least 2 dialogues".into()));
    }
    let embedder = build(&ctx.cfg.backends.embedder)?;
    let report = similarity_report(&dialogues, embedder.as_ref()).map_err(CliError::pipeline)?;
    ctx.write_report("similarity", &report)?;
    serde_json::to_value(report).map_err(CliError::pipeline)
}

fn report_topics(ctx: &Context, dataset: Option<&Path>) -> Result<Value, CliError> {
    let dialogues = ctx.dialogues(dataset)?;
    let evaluator = build(&ctx.cfg.backends.evaluator)?;
    let report = topic_report(&dialogues, evaluator.as_ref()).map_err(CliError::pipeline)?;
    ctx.write_report("topics", &report)?;
    Ok(json!({
        "dialogues": report.entries.len(),
        "unique_topics": report.unique_topics,
        "max_repetition": report.max_repetition,
        "failures": report.failures,
    }))
}
