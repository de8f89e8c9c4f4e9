//! Command-line driver for the dialforge pipeline and its review API.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};

use crate::args::{Cli, Command};
use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("DIALFORGE_VERSION");
pub const MANIFESTS: &str = "manifests.jsonl";

/// Builds the effective config: defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = &g.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(c) = &g.corpus {
        cfg.corpus = Some(c.clone());
    }
    match &cli.command {
        Command::GenUsers { num, seed } => {
            set(&mut cfg.counts.personas, num);
            set(&mut cfg.seeds.personas, seed);
        }
        Command::SimulateActions { rounds, seed } => {
            set(&mut cfg.counts.action_rounds, rounds);
            set(&mut cfg.seeds.actions, seed);
        }
        Command::GenDialogues { count, dia_len, seed, .. } => {
            set(&mut cfg.counts.dialogues, count);
            set(&mut cfg.counts.dia_len, dia_len);
            set(&mut cfg.seeds.dialogues, seed);
        }
        Command::EvolveMetric { generations, offspring, seed, .. } => {
            set(&mut cfg.trilevel.generations, generations);
            set(&mut cfg.trilevel.offspring, offspring);
            set(&mut cfg.seeds.trilevel, seed);
        }
        Command::RefineDataset { max_iterations, seed, .. } => {
            set(&mut cfg.refine.max_iterations, max_iterations);
            set(&mut cfg.seeds.refine, seed);
        }
        _ => {}
    }
    cfg.trilevel.seed = cfg.seeds.trilevel;
    cfg.refine.seed = cfg.seeds.refine;
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = *v;
    }
}

fn write_manifest(cli: &Cli, cfg: &RunConfig, argv: &[String], outcome: &Value) -> std::io::Result<()> {
    let record = json!({
        "command": cli.command.name(),
        "version": VERSION,
        "argv": argv,
        "config_hash": cfg.hash(),
        "seeds": commands::seeds_used(&cli.command, cfg),
        "config": cfg,
        "finished_at": SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        "outcome": outcome,
    });
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut f = OpenOptions::new().create(true).append(true).open(cfg.output_dir.join(MANIFESTS))?;
    let mut line = serde_json::to_vec(&record)?;
    line.push(b'\n');
    f.write_all(&line)
}

fn summary(command: &str, result: &Result<Value, CliError>) -> Value {
    match result {
        Ok(Value::Object(fields)) => {
            let mut out = serde_json::Map::new();
            out.insert("command".into(), json!(command));
            out.insert("status".into(), json!("ok"));
            out.extend(fields.clone());
            Value::Object(out)
        }
        Ok(other) => json!({ "command": command, "status": "ok", "result": other }),
        Err(e) => json!({ "command": command, "status": "error", "exit_code": e.exit_code(), "error": e.to_string() }),
    }
}

/// Parses `argv`, runs the command, prints its summary line and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let name = cli.command.name();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            println!("{}", summary(name, &Err(e)));
            return 1;
        }
    };
    let ctx = match Context::open(cfg) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("{e}");
            println!("{}", summary(name, &Err(e)));
            return 1;
        }
    };
    if let Command::Serve { addr } = &cli.command {
        let result = serve(ctx, addr, &cli, &argv);
        if let Err(e) = &result {
            eprintln!("{e}");
        }
        println!("{}", summary(name, &result));
        return result.err().map_or(0, |e| e.exit_code());
    }
    let result = commands::run(&cli.command, &ctx);
    let line = summary(name, &result);
    if let Err(e) = write_manifest(&cli, &ctx.cfg, &argv, &line) {
        log::warn!("could not write manifest: {e}");
    }
    if let Err(e) = &result {
        eprintln!("{e}");
    }
    println!("{line}");
    result.err().map_or(0, |e| e.exit_code())
}

fn serve(ctx: Context, addr: &str, cli: &Cli, argv: &[String]) -> Result<Value, CliError> {
    let Context { cfg, store } = ctx;
    let started = json!({ "command": "serve", "status": "started", "addr": addr });
    if let Err(e) = write_manifest(cli, &cfg, argv, &started) {
        log::warn!("could not write manifest: {e}");
    }
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::pipeline)?;
    runtime
        .block_on(server::serve(store, addr))
        .map_err(|e| CliError::User(format!("cannot serve on {addr}: {e}")))?;
    Ok(json!({ "addr": addr }))
}
