//! The `dforge` command-line tool. `main.rs` only forwards to [`main_with_args`].
//!
//! Exit codes: 0 success, 1 partial (some items failed), 2 invalid input,
//! 3 infeasible result.

pub mod args;
pub mod commands;
pub mod config;
pub mod run;
pub mod synth;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde_json::{json, Value};

use args::{Cli, Command, Format};
use commands::Outcome;
use config::PipelineConfig;
use run::{RunContext, RunManifest, EXIT_INVALID_INPUT, MANIFEST_FILE};

pub const THREADS_ENV: &str = "DFORGE_THREADS";

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args(argv: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID_INPUT
            } else {
                0
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return EXIT_INVALID_INPUT;
    }
    match execute(cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID_INPUT
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{value}`"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<u8> {
    match &cli.command {
        Command::Config => {
            print!("{}", resolve_config(&cli)?.to_toml());
            Ok(0)
        }
        Command::Replay { manifest } => replay(manifest, &cli.out, cli.format),
        _ => {
            let cfg = resolve_config(&cli)?;
            let cwd = std::env::current_dir()?;
            let (code, _) = run_command(&cli.command, cfg, &cli.out, cli.format, argv, cwd)?;
            Ok(code)
        }
    }
}

fn dispatch(ctx: &mut RunContext, command: &Command) -> Result<Outcome> {
    match command {
        Command::Analyze { manifest } => commands::analyze(ctx, manifest),
        Command::Filter { manifest } => commands::filter(ctx, manifest),
        Command::Plan(a) => commands::plan(ctx, a),
        Command::Director(a) => commands::director(ctx, a),
        Command::Fuse { depth_dir } => commands::fuse(ctx, depth_dir),
        Command::Flowstats { inputs } => commands::flowstats(ctx, inputs),
        Command::Pickref { dir } => commands::pickref(ctx, dir),
        Command::Simulate(a) => commands::simulate(ctx, a),
        Command::Loss(a) => commands::loss(ctx, a),
        Command::Synth { kind } => Ok(Outcome {
            report: synth::synth(ctx, *kind)?,
            status: run::Status::Success,
        }),
        Command::Config | Command::Replay { .. } => {
            bail!("`{}` is not a pipeline command", command.name())
        }
    }
}

/// Runs one pipeline command into `out`, writing `<command>.json` and the
/// run manifest. Returns the exit code and the manifest.
pub fn run_command(
    command: &Command,
    config: PipelineConfig,
    out: &Path,
    format: Format,
    argv: Vec<String>,
    cwd: PathBuf,
) -> Result<(u8, RunManifest)> {
    let started = Instant::now();
    let mut ctx = RunContext::new(config, out.to_path_buf())?;
    let outcome = dispatch(&mut ctx, command)?;
    let report = serde_json::to_string_pretty(&outcome.report)? + "\n";
    ctx.write(&format!("{}.json", command.name()), report.as_bytes())?;
    match format {
        Format::Json => print!("{report}"),
        Format::Text => print!("{}", render_text(&outcome.report)),
    }
    if let run::Status::Partial(m) | run::Status::Infeasible(m) = &outcome.status {
        eprintln!("{}: {m}", command.name());
    }
    let code = outcome.status.exit_code();
    let manifest = ctx.into_manifest(argv, cwd, code, started.elapsed().as_millis());
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_json())?;
    Ok((code, manifest))
}

/// Re-runs a recorded command with its recorded configuration into `out`
/// and compares every output digest. Exit 0 when all match, 1 otherwise.
fn replay(manifest_path: &Path, out: &Path, format: Format) -> Result<u8> {
    let recorded = RunManifest::load(manifest_path)?;
    let cli =
        Cli::try_parse_from(&recorded.argv).context("recorded command line no longer parses")?;
    if matches!(cli.command, Command::Replay { .. } | Command::Config) {
        bail!(
            "manifest records `{}`, which cannot be replayed",
            cli.command.name()
        );
    }
    if recorded.config.hash() != recorded.config_hash {
        bail!("manifest config does not match its recorded hash");
    }
    let out = std::path::absolute(out)?;
    // Recorded input paths are relative to the original working directory.
    std::env::set_current_dir(&recorded.cwd).with_context(|| {
        format!(
            "entering recorded working directory {}",
            recorded.cwd.display()
        )
    })?;
    let (code, fresh) = run_command(
        &cli.command,
        recorded.config.clone(),
        &out,
        Format::Json,
        recorded.argv.clone(),
        recorded.cwd.clone(),
    )
    .map(|(c, m)| {
        // The replayed command printed its own report; separate ours.
        println!();
        (c, m)
    })?;
    let mut mismatches = Vec::new();
    for (name, digest) in &recorded.outputs {
        match fresh.outputs.get(name) {
            Some(d) if d == digest => {}
            Some(_) => mismatches.push(format!("{name}: digest differs")),
            None => mismatches.push(format!("{name}: not produced")),
        }
    }
    for name in fresh
        .outputs
        .keys()
        .filter(|n| !recorded.outputs.contains_key(*n))
    {
        mismatches.push(format!("{name}: not in the recorded run"));
    }
    let input_changes: Vec<String> = recorded
        .inputs
        .iter()
        .filter(|(p, d)| fresh.inputs.get(*p) != Some(d))
        .map(|(p, _)| p.clone())
        .collect();
    let identical = mismatches.is_empty() && code == recorded.exit_code;
    let report = json!({
        "replayed": cli.command.name(),
        "identical": identical,
        "exit_code": code,
        "recorded_exit_code": recorded.exit_code,
        "mismatches": mismatches,
        "changed_inputs": input_changes,
    });
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Text => print!("{}", render_text(&report)),
    }
    Ok(if identical { 0 } else { 1 })
}

/// `key: value` lines; nested structures are printed as compact JSON, with
/// arrays of objects one element per line.
pub fn render_text(report: &Value) -> String {
    let mut out = String::new();
    let Value::Object(map) = report else {
        return format!("{report}\n");
    };
    for (key, value) in map {
        match value {
            Value::Array(items) if items.iter().any(Value::is_object) => {
                out.push_str(&format!("{key}:\n"));
                for item in items {
                    out.push_str(&format!("  {item}\n"));
                }
            }
            Value::String(s) => out.push_str(&format!("{key}: {s}\n")),
            other => out.push_str(&format!("{key}: {other}\n")),
        }
    }
    out
}
