use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use specpipe::engine::EngineStats;
use specpipe::scenarios::{run_scenario, SCENARIOS};
use specpipe::simulator::{
    run_detailed, write_csv, MetricsRow, RunOptions, SimConfig, SimError, System,
};
use specpipe::workload::{
    gen_adversarial, gen_kvswap, gen_offload, KvSwapParams, OffloadParams, SwapPolicy, Trace,
    TraceError,
};

#[derive(Parser)]
#[command(
    name = "specpipe",
    version,
    about = "Speculative pipelined encryption for confidential GPU transfers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload trace.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Simulate traces under one or more systems and write a metrics table.
    Sim(SimArgs),
    /// Run the built-in scenario checks.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum GenKind {
    /// Layer offloading: offloaded layers swapped in every iteration.
    Offload {
        #[arg(long, default_value_t = 4)]
        layers: u32,
        /// 1-based layer indices kept on the host.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 4])]
        offload: Vec<u32>,
        #[arg(long, default_value_t = 2)]
        iters: u32,
        #[arg(long, default_value_t = 4 << 20)]
        layer_bytes: u64,
        /// Compute time per layer in ns.
        #[arg(long, default_value_t = 100_000)]
        compute_ns: u64,
        #[arg(long)]
        prefetch: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// KV-cache swapping under a serving swap policy.
    Kvswap {
        #[arg(long, value_enum, default_value_t = SwapPolicy::Lifo)]
        policy: SwapPolicy,
        #[arg(long, default_value_t = 12)]
        requests: u32,
        #[arg(long, default_value_t = 4)]
        parallel: u32,
        #[arg(long, default_value_t = 4)]
        blocks_per_request: u32,
        #[arg(long, default_value_t = 1 << 20)]
        block_bytes: u64,
        #[arg(long, default_value_t = 4)]
        decode_steps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Permute swap-in order and inject writes into an existing trace.
    Adversarial {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, required = true, num_args = 1..)]
    trace: Vec<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [System::NoCc, System::SyncCc, System::SpecPipe])]
    systems: Vec<System>,
    #[arg(long, default_value_t = 4)]
    workers: u32,
    /// Cartesian sweep, e.g. `workers=1..8` or `window=8,16`.
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics output; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Per-event JSONL log of every run.
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Engine counters of speculative runs as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SCENARIOS))]
    scenario: Option<String>,
    /// Also corrupt an in-flight engine transfer in the replay scenario.
    #[arg(long)]
    inject_corruption: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Trace(_) => 3,
            CliError::Sim(e) if e.is_auth() => 4,
            CliError::Sim(SimError::Trace(_)) => 3,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SPECPIPE_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Gen { kind } => cmd_gen(kind),
        Command::Sim(args) => cmd_sim(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_gen(kind: GenKind) -> Result<(), CliError> {
    let (trace, out) = match kind {
        GenKind::Offload {
            layers,
            offload,
            iters,
            layer_bytes,
            compute_ns,
            prefetch,
            seed,
            out,
        } => {
            let p = OffloadParams {
                layers,
                offload,
                iterations: iters,
                layer_bytes,
                compute_per_layer: compute_ns,
                prefetch,
                seed,
            };
            (gen_offload(&p).map_err(usage)?, out)
        }
        GenKind::Kvswap {
            policy,
            requests,
            parallel,
            blocks_per_request,
            block_bytes,
            decode_steps,
            seed,
            out,
        } => {
            let p = KvSwapParams {
                requests,
                policy,
                parallel_size: parallel,
                blocks_per_request,
                kv_block_bytes: block_bytes,
                decode_steps,
                seed,
                ..KvSwapParams::default()
            };
            (gen_kvswap(&p).map_err(usage)?, out)
        }
        GenKind::Adversarial {
            base,
            rate,
            seed,
            out,
        } => {
            let base = Trace::load(&base)?;
            (gen_adversarial(&base, rate, seed).map_err(usage)?, out)
        }
    };
    trace.save(&out)?;
    info!("wrote {} events to {}", trace.events.len(), out.display());
    Ok(())
}

fn usage(e: TraceError) -> CliError {
    match e {
        TraceError::Params(m) => CliError::Usage(m),
        other => CliError::Trace(other),
    }
}

/// One axis of a cartesian sweep.
#[derive(Clone, Debug, PartialEq)]
struct Axis {
    key: String,
    values: Vec<u64>,
}

fn parse_axis(s: &str) -> Result<Axis, CliError> {
    let bad = || CliError::Usage(format!("bad sweep `{s}`; expected key=a..b or key=a,b,c"));
    let (key, spec) = s.split_once('=').ok_or_else(bad)?;
    if !["workers", "window", "depth", "max_nop_pad", "seed"].contains(&key) {
        return Err(CliError::Usage(format!("unknown sweep key `{key}`")));
    }
    let values: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(bad());
    }
    Ok(Axis {
        key: key.to_string(),
        values,
    })
}

fn apply(cfg: &mut SimConfig, key: &str, v: u64) {
    match key {
        "workers" => cfg.workers = v as u32,
        "window" => cfg.window = v as usize,
        "depth" => cfg.depth = v as usize,
        "max_nop_pad" => cfg.max_nop_pad = v,
        "seed" => cfg.seed = v,
        _ => unreachable!("checked by parse_axis"),
    }
}

/// Every combination of the sweep axes applied to `base`.
fn expand(base: &SimConfig, axes: &[Axis]) -> Vec<SimConfig> {
    let mut out = vec![base.clone()];
    for axis in axes {
        out = out
            .iter()
            .flat_map(|c| {
                axis.values.iter().map(move |&v| {
                    let mut c = c.clone();
                    apply(&mut c, &axis.key, v);
                    c
                })
            })
            .collect();
    }
    out
}

#[derive(Serialize)]
struct StatsRow {
    trace: String,
    config_hash: String,
    workers: u32,
    stats: EngineStats,
}

struct RunOutput {
    row: MetricsRow,
    stats: Option<StatsRow>,
    events: Vec<serde_json::Value>,
}

fn trace_name(p: &Path) -> String {
    let name = p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    name.trim_end_matches(".gz")
        .trim_end_matches(".jsonl")
        .to_string()
}

fn simulate(
    name: &str,
    trace: &Trace,
    cfg: &SimConfig,
    event_log: bool,
) -> Result<RunOutput, SimError> {
    let opts = RunOptions {
        event_log,
        keep_payloads: false,
    };
    let r = run_detailed(trace, cfg, opts)?;
    info!(
        "{name} {} w{}: {:.1}",
        cfg.system.name(),
        cfg.workers,
        r.metrics.throughput
    );
    let row = MetricsRow::new(name, cfg, &r.metrics);
    let stats = r.engine_stats.map(|stats| StatsRow {
        trace: name.to_string(),
        config_hash: row.config_hash.clone(),
        workers: cfg.workers,
        stats,
    });
    let events = r
        .event_log
        .into_iter()
        .map(|mut v| {
            if let Some(obj) = v.as_object_mut() {
                obj.insert("run".into(), serde_json::json!(row.config_hash));
                obj.insert("system".into(), serde_json::json!(cfg.system.name()));
            }
            v
        })
        .collect();
    Ok(RunOutput { row, stats, events })
}

fn cmd_sim(args: SimArgs) -> Result<(), CliError> {
    let axes = args
        .sweep
        .iter()
        .map(|s| parse_axis(s))
        .collect::<Result<Vec<_>, _>>()?;
    let traces = args
        .trace
        .iter()
        .map(|p| Ok((trace_name(p), Trace::load(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut jobs = Vec::new();
    for (ti, _) in traces.iter().enumerate() {
        for &system in &args.systems {
            let mut base = SimConfig::with(system, args.workers);
            base.seed = args.seed;
            for cfg in expand(&base, &axes) {
                jobs.push((ti, cfg));
            }
        }
    }
    let logging = args.event_log.is_some();
    let run_one =
        |(ti, cfg): &(usize, SimConfig)| simulate(&traces[*ti].0, &traces[*ti].1, cfg, logging);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<RunOutput, SimError>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<RunOutput, SimError>> = jobs.iter().map(run_one).collect();
    let outputs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<MetricsRow> = outputs.iter().map(|o| o.row.clone()).collect();
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    match args.format {
        Format::Csv => write_csv(sink, &rows).map_err(|e| CliError::Failed(e.to_string()))?,
        Format::Json => {
            let mut sink = sink;
            serde_json::to_writer_pretty(&mut sink, &rows).map_err(io::Error::from)?;
            writeln!(sink)?;
        }
    }
    if let Some(p) = &args.event_log {
        let mut w = BufWriter::new(File::create(p)?);
        for v in outputs.iter().flat_map(|o| &o.events) {
            serde_json::to_writer(&mut w, v).map_err(io::Error::from)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    if let Some(p) = &args.stats {
        let stats: Vec<&StatsRow> = outputs.iter().filter_map(|o| o.stats.as_ref()).collect();
        let mut w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(&mut w, &stats).map_err(io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let names: Vec<&str> = match &args.scenario {
        Some(s) => vec![s.as_str()],
        None => SCENARIOS.to_vec(),
    };
    let mut failed = 0;
    for name in names {
        let check = run_scenario(name, args.inject_corruption).expect("validated by clap");
        println!(
            "{:<10} {:<4} {}",
            check.name,
            if check.pass { "PASS" } else { "FAIL" },
            check.detail
        );
        failed += usize::from(!check.pass);
    }
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} scenario(s) failed")));
    }
    Ok(())
}
