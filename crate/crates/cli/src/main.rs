//! Command-line driver: workload generation, serving simulation, probing
//! attacks, and parameter sweeps. Every command is deterministic given its
//! config; all seeds live in the config document.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 scale-guard refusal.

mod config;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use kvsieve_core::sim::{
    attack_probe_loop, gen_workload, oracle_for, run_serving_full, score_recovery, sweep,
    write_aggregate_csv, write_metrics_csv, write_sweep_csv, Metrics, SweepAxis, WorkloadPair,
};
use kvsieve_core::{Error as CoreError, Request, SensitivityMask, SharingPolicy, TokenSeq};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SCALE: u8 = 4;

#[derive(Parser)]
#[command(name = "kvsieve", about = "Privacy-aware KV-cache sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a writer/reader workload as JSONL.
    GenWorkload {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the workload seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the serving simulation for every configured policy.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        /// Per-request metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Aggregate metrics CSV (defaults to `<out>.agg.csv`).
        #[arg(long)]
        aggregate_out: Option<PathBuf>,
        /// Pool snapshot JSONL written after the last policy run.
        #[arg(long)]
        pool_out: Option<PathBuf>,
    },
    /// Populate a pool from the workload and run the probing attack.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        /// Recovery report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis over a grid, one serving (or attack) run per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: Option<PathBuf>,
        /// Axis: match_rate, recompute_rate, segment_min_len, privacy_level,
        /// fn_rate, fp_rate, chunk_size.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: String,
        /// Override the workload seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Scale(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Scale(_) => EXIT_SCALE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Scale(m) => m,
        }
    }
}

fn from_core(err: CoreError) -> CliError {
    match err {
        CoreError::ScaleGuard(m) => CliError::Scale(format!("scale guard: {m}")),
        CoreError::Io(e) => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
    cfg.validate().map_err(from_core)?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn load_workload(path: &Path) -> Result<Vec<WorkloadPair>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Io(format!("cannot read workload {}: {e}", path.display())))?;
    let mut requests: Vec<Request> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("workload read error: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line).map_err(|e| {
            CliError::Config(format!("workload line {}: {e}", lineno + 1))
        })?;
        req.validate().map_err(from_core)?;
        requests.push(req);
    }
    if !requests.len().is_multiple_of(2) {
        return Err(CliError::Config(format!(
            "workload holds {} requests; expected writer/reader pairs",
            requests.len()
        )));
    }
    let mut pairs = Vec::with_capacity(requests.len() / 2);
    let mut iter = requests.into_iter();
    while let (Some(writer), Some(reader)) = (iter.next(), iter.next()) {
        let writer_truth = writer
            .mask_override
            .clone()
            .unwrap_or_else(|| SensitivityMask::all_clear(writer.tokens.len()));
        let reader_truth = reader
            .mask_override
            .clone()
            .unwrap_or_else(|| SensitivityMask::all_clear(reader.tokens.len()));
        pairs.push(WorkloadPair {
            writer,
            reader,
            writer_truth,
            reader_truth,
        });
    }
    Ok(pairs)
}

fn workload_jsonl(pairs: &[WorkloadPair]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    for pair in pairs {
        for req in [&pair.writer, &pair.reader] {
            serde_json::to_writer(&mut out, req)
                .map_err(|e| CliError::Io(format!("serialize workload: {e}")))?;
            out.push(b'\n');
        }
    }
    Ok(out)
}

fn cross_user_policy(cfg: &RunConfig) -> SharingPolicy {
    cfg.policies
        .iter()
        .copied()
        .find(|p| matches!(p, SharingPolicy::CrossUserSelective))
        .unwrap_or(SharingPolicy::CrossUserSelective)
}

fn cmd_gen_workload(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.workload.seed = seed;
    }
    let pairs = gen_workload(&cfg.workload).map_err(from_core)?;
    write_file(out, &workload_jsonl(&pairs)?)?;
    println!(
        "wrote {} requests ({} pairs) to {}",
        pairs.len() * 2,
        pairs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_serve(
    config: &Path,
    workload: &Path,
    out: &Path,
    aggregate_out: Option<PathBuf>,
    pool_out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let pairs = load_workload(workload)?;
    let serving = cfg.serving();
    let mut all: Vec<Metrics> = Vec::new();
    let mut last_pool = None;
    for &policy in &cfg.policies {
        let run = run_serving_full(&pairs, policy, &serving).map_err(from_core)?;
        println!(
            "{}: hit_rate {:.3}, mean match {:.3}, mean ttft {:.2} ms",
            policy,
            run.metrics.aggregate.hit_rate,
            run.metrics.aggregate.mean_match_rate,
            run.metrics.aggregate.mean_ttft_ms
        );
        all.push(run.metrics.clone());
        last_pool = Some(run.pool);
    }
    let mut csv = Vec::new();
    write_metrics_csv(&all, &mut csv).map_err(from_core)?;
    write_file(out, &csv)?;
    let agg_path = aggregate_out.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".agg.csv");
        PathBuf::from(p)
    });
    let mut agg = Vec::new();
    write_aggregate_csv(&all, &mut agg).map_err(from_core)?;
    write_file(&agg_path, &agg)?;
    if let (Some(path), Some(pool)) = (pool_out, last_pool) {
        let mut buf = Vec::new();
        pool.export_jsonl(&mut buf).map_err(from_core)?;
        write_file(&path, &buf)?;
    }
    Ok(())
}

fn cmd_attack(config: &Path, workload: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let pairs = load_workload(workload)?;
    let serving = cfg.serving();
    let policy = cross_user_policy(&cfg);
    let run = run_serving_full(&pairs, policy, &serving).map_err(from_core)?;
    let attack = cfg.attack_params();
    let hints: Vec<TokenSeq> = run.victims.iter().map(|(r, _)| r.tokens.clone()).collect();
    let mut oracle = oracle_for(&run.retriever, &run.pool, policy);
    let findings = attack_probe_loop(&mut oracle, &hints, &attack).map_err(from_core)?;
    let report = score_recovery(&findings, &run.pool, &run.victims);
    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::Io(format!("serialize report: {e}")))?;
    write_file(out, &json)?;
    println!(
        "direct recovery: {}/{} sensitive tokens ({:.4}%), {} non-sensitive exposed, {} probes{}",
        report.sensitive_recovered_exact,
        report.sensitive_tokens_total,
        report.direct_recovery_rate * 100.0,
        report.nonsensitive_recovered,
        report.probes_issued,
        if report.partial { " (budget exhausted, partial)" } else { "" }
    );
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    workload: Option<PathBuf>,
    axis: &str,
    grid: &str,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.workload.seed = seed;
    }
    let axis = SweepAxis::parse(axis).map_err(from_core)?;
    let grid: Vec<f64> = grid
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("bad grid value '{v}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Config("empty sweep grid".into()));
    }
    let pairs = match workload {
        Some(path) => load_workload(&path)?,
        None => gen_workload(&cfg.workload).map_err(from_core)?,
    };
    let policy = cross_user_policy(&cfg);
    let attack = cfg.attack_params();
    let rows = sweep(axis, &grid, &pairs, &cfg.serving(), policy, Some(&attack))
        .map_err(from_core)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv).map_err(from_core)?;
    write_file(out, &csv)?;
    for row in &rows {
        println!(
            "{} = {}: match {:.3}, ttft {:.2} ms{}",
            row.axis,
            row.value,
            row.aggregate.mean_match_rate,
            row.aggregate.mean_ttft_ms,
            row.direct_recovery_rate
                .map(|r| format!(", recovery {:.4}", r))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenWorkload { config, out, seed } => cmd_gen_workload(&config, &out, seed),
        Command::Serve {
            config,
            workload,
            out,
            aggregate_out,
            pool_out,
        } => cmd_serve(&config, &workload, &out, aggregate_out, pool_out),
        Command::Attack {
            config,
            workload,
            out,
        } => cmd_attack(&config, &workload, &out),
        Command::Sweep {
            config,
            workload,
            axis,
            grid,
            seed,
            out,
        } => cmd_sweep(&config, workload, &axis, &grid, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let mut stderr = std::io::stderr();
            let _ = writeln!(stderr, "error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
