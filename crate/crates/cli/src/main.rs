//! `nanoworld`: scenarios, replay, lineage inspection, self-improvement
//! cycles, the kernel attack suite, and benchmarks.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad configuration,
//! 3 unknown entity, 4 kernel unreachable.

use clap::{Parser, Subcommand};
use nanoworld::aara::{self, LoopConfig};
use nanoworld::attack::{self, VerifierMode};
use nanoworld::bench::{self, BenchConfig};
use nanoworld::canonical;
use nanoworld::config::Config;
use nanoworld::gauntlet::GauntletConfig;
use nanoworld::kernel::transport::serve;
use nanoworld::kernel::{AutonomyLevel, KernelClient, KernelHandle, Request, Response, TcpKernel};
use nanoworld::lineage::{replay_check, LineageStore, ReplayError, RunId, Seed};
use nanoworld::registry::Registry;
use nanoworld::replay::Replayer;
use nanoworld::rsi::{self, RsiConfig};
use nanoworld::runtime::{Deployment, Runtime};
use nanoworld::scenarios::{self, ScenarioError};
use serde::Serialize;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "nanoworld", version, about = "Governed world-model runtime")]
struct Cli {
    /// Lineage directory (runs and outcomes are appended here).
    #[arg(long, global = true, env = "NANOWORLD_LINEAGE_DIR", default_value = ".nanoworld/lineage")]
    lineage_dir: PathBuf,
    /// Directory for report files.
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a deterministic scenario.
    Scenario {
        /// beam-design, thermal-runaway, cascade, or zero-shot-bootstrap
        name: String,
        /// `key = value` file overriding scenario defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-execute a recorded run and compare output digests.
    Replay { run_id: String },
    /// Print the provenance chain of a run, or list all runs.
    Lineage { run_id: Option<String> },
    /// Self-improvement cycles.
    Rsi {
        #[command(subcommand)]
        cmd: RsiCmd,
    },
    /// Run the sense-decide-act-learn loop on the plant.
    Loop {
        #[arg(long, default_value_t = 1_000)]
        ticks: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "A5", value_parser = parse_level)]
        level: AutonomyLevel,
        /// `inproc` or `host:port` of a served kernel.
        #[arg(long, default_value = "inproc")]
        kernel: String,
    },
    /// Run the kernel bypass corpus.
    Attack {
        #[arg(long, default_value = "inproc")]
        kernel: String,
        #[arg(long, default_value_t = 21)]
        seed: u64,
        /// Swap in an accept-everything token verifier (harness self-test).
        #[arg(long)]
        weakened: bool,
    },
    /// Measure latency, throughput, and training time.
    Bench {
        /// Small workloads for a fast smoke run.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Kernel process.
    Kernel {
        #[command(subcommand)]
        cmd: KernelCmd,
    },
}

#[derive(Subcommand)]
enum RsiCmd {
    /// One propose, evaluate, validate, apply cycle on a starting world.
    Run {
        /// `beam-offset` or `beam-offset:<fraction>`.
        #[arg(long, default_value = "beam-offset")]
        world: String,
        #[arg(long, default_value_t = 200)]
        generations: u32,
        #[arg(long, default_value_t = 30)]
        population: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "A5", value_parser = parse_level)]
        level: AutonomyLevel,
        #[arg(long, default_value = "inproc")]
        kernel: String,
    },
}

#[derive(Subcommand)]
enum KernelCmd {
    /// Serve the kernel over TCP until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7341")]
        listen: String,
        /// Must match the `--seed` of the clients.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "A5", value_parser = parse_level)]
        level: AutonomyLevel,
    },
}

fn parse_level(s: &str) -> Result<AutonomyLevel, String> {
    s.parse::<AutonomyLevel>().map_err(|e| e.to_string())
}

enum CliError {
    Failure(String),
    Config(String),
    Unknown(String),
    Unreachable(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Config(_) => 2,
            CliError::Unknown(_) => 3,
            CliError::Unreachable(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Failure(m) | CliError::Config(m) | CliError::Unknown(m) | CliError::Unreachable(m) => m,
        }
    }
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

/// Fields that depend on lineage numbering or kernel nonces; dropped from
/// report files so seeded runs write identical bytes.
const VOLATILE: [&str; 4] = ["run_id", "parent_run", "approval_id", "action_run"];

fn strip_volatile(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|k, _| !VOLATILE.contains(&k.as_str()));
            m.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

/// Write `<stem>.json` (canonical form) and `<stem>.txt` (table).
fn write_report<T: Serialize>(out: &Path, stem: &str, value: &T, table: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    let mut v = canonical::canonical_value(value);
    strip_volatile(&mut v);
    let json = canonical::to_canonical(&v);
    let write = |name: String, body: &str| {
        std::fs::write(out.join(&name), body).map_err(|e| CliError::Config(format!("{name}: {e}")))
    };
    write(format!("{stem}.json"), &(json + "\n"))?;
    write(format!("{stem}.txt"), table)?;
    Ok(())
}

fn open_lineage(dir: &Path) -> Result<Arc<LineageStore>, CliError> {
    LineageStore::open(dir)
        .map(Arc::new)
        .map_err(|e| CliError::Config(format!("lineage directory {}: {e}", dir.display())))
}

/// In-process kernel, or a TCP connection that answers a health probe.
fn kernel_client(spec: &str, seed: Seed, level: AutonomyLevel) -> Result<Arc<dyn KernelClient>, CliError> {
    if spec == "inproc" {
        return Ok(Arc::new(KernelHandle::spawn(Deployment::kernel_config(seed, level))));
    }
    let k = TcpKernel::connect(spec).map_err(|e| CliError::Unreachable(e.to_string()))?;
    match k.call(&Request::Health) {
        Ok(Response::Health(_)) => Ok(Arc::new(k)),
        Ok(other) => Err(CliError::Unreachable(format!("unexpected health reply {other:?}"))),
        Err(e) => Err(CliError::Unreachable(e.to_string())),
    }
}

fn deployment(rt: Runtime, kernel: &str, seed: Seed, level: AutonomyLevel) -> Result<Deployment, CliError> {
    let k = kernel_client(kernel, seed, level)?;
    Deployment::with_kernel(rt, k, seed, level).map_err(|e| CliError::Unreachable(e.to_string()))
}

fn cmd_scenario(cli: &Cli, name: &str, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let cfg = match config {
        None => Config::new(),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Config::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    let store = open_lineage(&cli.lineage_dir)?;
    let report = scenarios::run_scenario(name, &cfg, Seed(seed), &store).map_err(|e| match e {
        ScenarioError::Unknown(_) => CliError::Unknown(format!(
            "{e}; expected one of {}",
            scenarios::SCENARIOS.join(", ")
        )),
        ScenarioError::Config(_) => CliError::Config(e.to_string()),
        ScenarioError::Failed(_) => failure(e),
    })?;
    let table = report.render();
    print!("{table}");
    for (k, ms) in &report.timings_ms {
        println!("  {k} wall time {ms:.1} ms");
    }
    if let Some(id) = &report.run_id {
        println!("run {id}");
    }
    write_report(&cli.out, &format!("scenario-{name}"), &report, &table)
}

fn cmd_replay(cli: &Cli, run_id: &str) -> Result<(), CliError> {
    let store = open_lineage(&cli.lineage_dir)?;
    let reg = Registry::with_solvers();
    match replay_check(&store, &RunId(run_id.to_string()), &Replayer::new(&reg)) {
        Ok(c) if c.matches() => {
            println!("MATCH {} {}", c.run_id, c.stored.to_hex());
            Ok(())
        }
        Ok(c) => {
            println!("MISMATCH {} stored {} replayed {}", c.run_id, c.stored.to_hex(), c.replayed.to_hex());
            Err(failure("replayed outputs differ from the record"))
        }
        Err(e @ (ReplayError::UnknownRun(_) | ReplayError::VersionGone { .. })) => Err(CliError::Unknown(e.to_string())),
        Err(e @ ReplayError::NotReplayable(_)) => Err(CliError::Config(e.to_string())),
        Err(e) => Err(failure(e)),
    }
}

fn cmd_lineage(cli: &Cli, run_id: Option<&str>) -> Result<(), CliError> {
    let store = open_lineage(&cli.lineage_dir)?;
    let Some(id) = run_id else {
        for r in store.records() {
            println!("{:<24} {:<10} seed {}", r.run_id, r.kind, r.seed);
        }
        return Ok(());
    };
    let chain = store
        .chain(&RunId(id.to_string()))
        .map_err(|e| CliError::Unknown(e.to_string()))?;
    for (depth, r) in chain.iter().enumerate() {
        println!("{}{} [{}] seed {}", "  ".repeat(depth), r.run_id, r.kind, r.seed);
        let pad = "  ".repeat(depth + 1);
        println!("{pad}inputs  {}", r.inputs_digest.to_hex());
        println!("{pad}outputs {}", r.outputs_digest().to_hex());
        for (m, v) in &r.model_versions {
            println!("{pad}model   {m} v{v}");
        }
    }
    Ok(())
}

fn cmd_rsi(
    cli: &Cli,
    world: &str,
    generations: u32,
    population: usize,
    seed: u64,
    level: AutonomyLevel,
    kernel: &str,
) -> Result<(), CliError> {
    let store = open_lineage(&cli.lineage_dir)?;
    let rt = rsi::world_runtime(world, store).map_err(|e| CliError::Config(e.to_string()))?;
    let seed = Seed(seed);
    let mut dep = deployment(rt, kernel, seed, level)?;
    let cfg = RsiConfig {
        generations,
        population,
        world: world.to_string(),
        ..RsiConfig::beam()
    };
    let gcfg = GauntletConfig {
        level,
        ..GauntletConfig::default()
    };
    let report = rsi::rsi_cycle(&mut dep, &cfg, &gcfg, seed).map_err(failure)?;
    let table = report.render();
    print!("{table}");
    let ids = [
        ("cycle", report.run_id.clone()),
        ("gauntlet", report.gauntlet.as_ref().and_then(|g| g.run_id.clone())),
        ("canary", report.canary.as_ref().and_then(|c| c.run_id.clone())),
        ("promotion", report.canary.as_ref().and_then(|c| c.action_run.clone())),
    ];
    for (label, id) in ids {
        if let Some(id) = id {
            println!("{label} run {id}");
        }
    }
    write_report(&cli.out, "rsi", &report, &table)
}

fn cmd_loop(cli: &Cli, ticks: u64, seed: u64, level: AutonomyLevel, kernel: &str) -> Result<(), CliError> {
    let store = open_lineage(&cli.lineage_dir)?;
    let cfg = LoopConfig {
        ticks,
        seed: Seed(seed),
        level,
        ..LoopConfig::default()
    };
    let rt = aara::plant_runtime(store, &cfg).map_err(failure)?;
    let mut dep = deployment(rt, kernel, cfg.seed, level)?;
    let report = aara::run_loop(&mut dep, &cfg, None).map_err(failure)?;
    let table = report.render();
    print!("{table}");
    if let Some(id) = &report.run_id {
        println!("run {id}");
    }
    write_report(&cli.out, "loop", &report, &table)
}

fn cmd_attack(cli: &Cli, kernel: &str, seed: u64, weakened: bool) -> Result<(), CliError> {
    let seed = Seed(seed);
    let level = AutonomyLevel::A5;
    let k = kernel_client(kernel, seed, level)?;
    let factory = || {
        Deployment::with_kernel(
            attack::attack_runtime(Arc::new(LineageStore::new())),
            k.clone(),
            seed,
            level,
        )
    };
    let mode = if weakened { VerifierMode::Weakened } else { VerifierMode::Kernel };
    let report = attack::run_attacks(&factory, mode).map_err(|e| CliError::Unreachable(e.to_string()))?;
    let table = report.render();
    print!("{table}");
    write_report(&cli.out, "attack", &report, &table)?;
    match report.succeeded() {
        0 => Ok(()),
        n => Err(failure(format!("{n} bypass vectors succeeded"))),
    }
}

fn cmd_bench(cli: &Cli, quick: bool, seed: u64) -> Result<(), CliError> {
    let cfg = BenchConfig {
        seed: Seed(seed),
        ..if quick { BenchConfig::quick() } else { BenchConfig::default() }
    };
    let m = bench::run_bench(&cfg).map_err(failure)?;
    let table = m.render();
    print!("{table}");
    write_report(&cli.out, "bench", &m, &table)
}

fn cmd_kernel_serve(listen: &str, seed: u64, level: AutonomyLevel) -> Result<(), CliError> {
    let listener = TcpListener::bind(listen).map_err(|e| CliError::Unreachable(format!("{listen}: {e}")))?;
    let handle = KernelHandle::spawn(Deployment::kernel_config(Seed(seed), level));
    println!(
        "kernel listening on {} at {level}",
        listener.local_addr().map_err(failure)?
    );
    serve(listener, handle).map_err(|e| CliError::Unreachable(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Scenario { name, config, seed } => cmd_scenario(cli, name, config.as_deref(), *seed),
        Cmd::Replay { run_id } => cmd_replay(cli, run_id),
        Cmd::Lineage { run_id } => cmd_lineage(cli, run_id.as_deref()),
        Cmd::Rsi {
            cmd:
                RsiCmd::Run {
                    world,
                    generations,
                    population,
                    seed,
                    level,
                    kernel,
                },
        } => cmd_rsi(cli, world, *generations, *population, *seed, *level, kernel),
        Cmd::Loop {
            ticks,
            seed,
            level,
            kernel,
        } => cmd_loop(cli, *ticks, *seed, *level, kernel),
        Cmd::Attack { kernel, seed, weakened } => cmd_attack(cli, kernel, *seed, *weakened),
        Cmd::Bench { quick, seed } => cmd_bench(cli, *quick, *seed),
        Cmd::Kernel {
            cmd: KernelCmd::Serve { listen, seed, level },
        } => cmd_kernel_serve(listen, *seed, *level),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn volatile_keys_are_stripped_at_any_depth() {
        let mut v = serde_json::json!({
            "run_id": "scenario-1",
            "value": 2.0,
            "nested": [{ "approval_id": "x", "keep": true }],
            "canary": { "action_run": "action-3", "windows": [] }
        });
        strip_volatile(&mut v);
        assert_eq!(
            v,
            serde_json::json!({ "value": 2.0, "nested": [{ "keep": true }], "canary": { "windows": [] } })
        );
    }

    #[test]
    fn levels_parse_and_errors_map_to_codes() {
        assert_eq!(parse_level("A6"), Ok(AutonomyLevel::A6));
        assert!(parse_level("A7").is_err());
        let codes: Vec<u8> = [
            CliError::Failure(String::new()),
            CliError::Config(String::new()),
            CliError::Unknown(String::new()),
            CliError::Unreachable(String::new()),
        ]
        .iter()
        .map(CliError::code)
        .collect();
        assert_eq!(codes, [1, 2, 3, 4]);
    }

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
