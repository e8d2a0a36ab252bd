use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use reedsb_core::leaderboard::{self, Leaderboard};
use reedsb_core::logstore::{validate_log, write_log, Codec, StreamInfo, SyntheticConfig};
use reedsb_core::planner::{self, Packing, SavingsModel, SensorRate, Table};
use reedsb_core::plugin::{connect_and_run, parse_plugin_list, Builtin, PluginError};
use reedsb_core::pluginproto::TaskKind;
use reedsb_core::presets::parse_selection;
use reedsb_core::scheduler::{self, Launcher, Mode, RunConfig, RunReport};
use reedsb_core::units::{group_thousands, parse_bytes, parse_duration};

/// Exit status of a bundled plugin that aborted on purpose.
const PLUGIN_ABORT_STATUS: u8 = 3;

#[derive(Parser)]
#[command(name = "reedsb", version, about = "Decode-once evaluation harness for perception algorithms")]
struct Cli {
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sensor log.
    GenLog(GenLogArgs),
    /// Check a log's structure and index.
    ValidateLog { path: PathBuf },
    /// Evaluate plugins on a log.
    Run(RunArgs),
    /// Run parallel and naive modes and compare their cost.
    Compare(RunArgs),
    /// Serve leaderboards over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Add run reports to a leaderboard store.
    Ingest {
        #[arg(long)]
        store: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Print the ranking for one task and preset.
    Leaderboard {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        preset: u16,
        #[arg(long, default_value = "detection")]
        task: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Data-logistics and decode-cost calculators.
    Plan {
        /// Print tables as CSV.
        #[arg(long, global = true)]
        csv: bool,
        #[command(subcommand)]
        which: PlanCommand,
    },
    /// Run a bundled plugin against a harness socket.
    #[command(hide = true)]
    Plugin {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `KIND [FLAGS...]`, e.g. `sleeper --ms 25`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, required = true)]
        kind: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Scene,
    Raw16,
}

#[derive(Args)]
struct GenLogArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Log length, e.g. `10s`.
    #[arg(long, conflicts_with = "frames")]
    duration: Option<String>,
    /// Exact number of camera frames.
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    objects: u16,
    #[arg(long)]
    no_ground_truth: bool,
    /// Add a 10 Hz lidar stream with this many points per sweep.
    #[arg(long)]
    lidar_points: Option<u32>,
    #[arg(long, value_enum, default_value = "scene")]
    codec: CodecArg,
    #[arg(long, default_value_t = 3208)]
    width: u32,
    #[arg(long, default_value_t = 2200)]
    height: u32,
    #[arg(long, default_value_t = 10)]
    bit_depth: u8,
    /// Camera rate in Hz.
    #[arg(long, default_value_t = 91.0)]
    rate: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Naive,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    log: PathBuf,
    /// `;`-separated plugins, e.g. `echo:4;oracle;jitter --mean 20ms --std 5ms`.
    #[arg(long, allow_hyphen_values = true)]
    plugins: String,
    /// `all` or comma-separated preset ids.
    #[arg(long, default_value = "all")]
    presets: String,
    /// Ignored by `compare`, which runs both.
    #[arg(long, value_enum, default_value = "parallel")]
    mode: ModeArg,
    #[arg(long, default_value_t = 8)]
    slots: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "1s")]
    slice: String,
    /// Artificial decode cost per frame, e.g. `5ms`.
    #[arg(long, default_value = "0s")]
    decode_cost: String,
    #[arg(long, default_value = "30s")]
    release_timeout: String,
    #[arg(long)]
    max_frames: Option<u64>,
    /// Run bundled plugins as threads instead of child processes.
    #[arg(long)]
    in_process: bool,
    /// Report path; defaults to `reedsb-<kind>-<run id>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PackingArg {
    Packed,
    Word16,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Camera data rate.
    Camera {
        #[arg(long, default_value_t = 3208)]
        width: u32,
        #[arg(long, default_value_t = 2200)]
        height: u32,
        #[arg(long, default_value_t = 10)]
        bit_depth: u8,
        #[arg(long, default_value_t = 91.0)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        channels: u8,
        #[arg(long, value_enum, default_value = "packed")]
        packing: PackingArg,
    },
    /// Lidar data rate.
    Lidar {
        #[arg(long, default_value_t = 4.8e6)]
        points_per_second: f64,
        #[arg(long, default_value_t = 16.0)]
        bytes_per_point: f64,
    },
    /// How long the loggers can record.
    Budget {
        /// Per-sensor rates in bytes per second, e.g. `3.368GB`; repeatable.
        #[arg(long = "rate", required = true)]
        rates: Vec<String>,
        #[arg(long)]
        capacity: String,
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
    },
    /// Time to copy a volume at a given rate.
    Dump {
        #[arg(long)]
        bytes: String,
        /// Bytes per second, e.g. `170.7MB`.
        #[arg(long)]
        rate: String,
    },
    /// Decode operations and volume saved by decoding once.
    Savings {
        #[arg(long)]
        volume: String,
        #[arg(long)]
        m: u64,
        #[arg(long)]
        p: u64,
        #[arg(long, default_value_t = 1)]
        n: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            if json {
                eprintln!("{}", json!({ "error": message }));
            } else {
                eprintln!("error: {message}");
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let json = cli.json;
    match cli.command {
        Command::GenLog(args) => gen_log(args, json),
        Command::ValidateLog { path } => {
            let report = validate_log(&path)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{}: {} streams, {} records, {} index entries, {} violations",
                    path.display(),
                    report.streams.len(),
                    report.records,
                    report.index_entries,
                    report.violations.len()
                );
                for v in &report.violations {
                    println!("  {}: {}", v.kind, v.detail);
                }
            }
            if report.is_valid() {
                Ok(ExitCode::SUCCESS)
            } else {
                bail!("{} violations in {}", report.violations.len(), path.display())
            }
        }
        Command::Run(args) => run(args, json),
        Command::Compare(args) => compare(args, json),
        Command::Serve { store, addr } => {
            let board = Arc::new(RwLock::new(Leaderboard::open(&store)?));
            let listener = std::net::TcpListener::bind(addr).with_context(|| format!("bind {addr}"))?;
            let local = listener.local_addr()?;
            if json {
                println!("{}", json!({ "listening": local.to_string() }));
            } else {
                println!("listening on http://{local}");
            }
            std::io::stdout().flush()?;
            leaderboard::serve(board, listener)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest { store, reports } => {
            let mut board = Leaderboard::open(&store)?;
            let mut ingested = Vec::new();
            for path in &reports {
                let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                let report = leaderboard::parse_report(&text).with_context(|| path.display().to_string())?;
                let n = board.ingest(&report, leaderboard::unix_now())?;
                ingested.push(json!({ "run_id": report.run_id, "entries": n }));
                if !json {
                    println!("{} {n}", report.run_id);
                }
            }
            if json {
                println!("{}", json!({ "ingested": ingested }));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Leaderboard { store, preset, task, limit } => {
            let task = TaskKind::parse(&task).ok_or_else(|| anyhow!("unknown task {task:?}"))?;
            let board = Leaderboard::open(&store)?;
            let standings = board.standings(task, preset, limit)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&standings)?);
            } else {
                println!("rank  algorithm             run               accuracy  mean_ms   std_ms   feasible");
                for (i, e) in standings.entries.iter().enumerate() {
                    println!(
                        "{:<5} {:<21} {:<17} {:<9.4} {:<9.3} {:<8.3} {}",
                        i + 1,
                        e.algorithm,
                        e.run_id,
                        e.accuracy,
                        e.mean_ns / 1e6,
                        e.std_ns / 1e6,
                        e.feasible
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plan { csv, which } => plan(which, json, csv),
        Command::Plugin { socket, name, log, seed, kind } => {
            let builtin = Builtin::parse(&kind).map_err(|e| anyhow!(e))?;
            let mut algorithm = builtin.instantiate(log.as_deref(), seed).map_err(|e| anyhow!(e))?;
            match connect_and_run(&socket, &name, algorithm.as_mut()) {
                Ok(_) => Ok(ExitCode::SUCCESS),
                Err(PluginError::Aborted(_)) => Ok(ExitCode::from(PLUGIN_ABORT_STATUS)),
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn gen_log(args: GenLogArgs, json: bool) -> Result<ExitCode> {
    let codec = match args.codec {
        CodecArg::Scene => Codec::Scene,
        CodecArg::Raw16 => Codec::Raw16,
    };
    if args.rate.is_nan() || args.rate <= 0.0 {
        bail!("--rate must be positive");
    }
    let mut config = SyntheticConfig::new(args.seed, Duration::ZERO);
    config.camera = StreamInfo {
        native_width: args.width,
        native_height: args.height,
        bit_depth: args.bit_depth,
        rate_mhz: (args.rate * 1000.0).round() as u32,
        ..StreamInfo::mono_camera(0, codec)
    };
    config.object_count = args.objects;
    config.ground_truth = !args.no_ground_truth;
    config.lidar_points = args.lidar_points;
    config = match (args.frames, args.duration) {
        (Some(0), _) => bail!("empty log"),
        (Some(n), _) => config.with_frames(n),
        (None, Some(d)) => SyntheticConfig {
            duration_ns: parse_duration(&d).map_err(|e| anyhow!(e))?.as_nanos() as u64,
            ..config
        },
        (None, None) => bail!("one of --duration or --frames is required"),
    };
    let summary = write_log(&config, &args.out)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        let records: Vec<String> = summary
            .records_per_stream
            .iter()
            .map(|(sid, n)| format!("stream {sid}: {n}"))
            .collect();
        println!("{} ({} bytes; {})", summary.path.display(), summary.bytes, records.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let plugins = parse_plugin_list(&args.plugins).map_err(|e| anyhow!(e))?;
    let presets = parse_selection(&args.presets).map_err(|e| anyhow!(e))?;
    let duration_ns = |flag: &str, text: &str| -> Result<u64> {
        parse_duration(text)
            .map(|d| d.as_nanos() as u64)
            .map_err(|e| anyhow!("--{flag}: {e}"))
    };
    let launcher = if args.in_process {
        Launcher::InProcess
    } else {
        Launcher::Process {
            exe: std::env::current_exe().context("locating the reedsb executable")?,
        }
    };
    let config = RunConfig {
        presets: presets.iter().map(|p| p.preset_id).collect(),
        mode: match args.mode {
            ModeArg::Parallel => Mode::Parallel,
            ModeArg::Naive => Mode::Naive,
        },
        slice_ns: duration_ns("slice", &args.slice)?,
        slot_count: args.slots,
        seed: args.seed,
        decode_cost_ns: duration_ns("decode-cost", &args.decode_cost)?,
        release_timeout_ms: duration_ns("release-timeout", &args.release_timeout)? / 1_000_000,
        max_frames: args.max_frames,
        launcher,
        ..RunConfig::new(&args.log, plugins)
    };
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn counters_path(report: &Path) -> PathBuf {
    report.with_extension("counters.csv")
}

fn write_run(report: &RunReport, path: &Path) -> Result<PathBuf> {
    write_json(path, report)?;
    let csv = counters_path(path);
    std::fs::write(&csv, report.counters.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    Ok(csv)
}

fn summarize(report: &RunReport) {
    let failed = report
        .entries
        .iter()
        .filter(|e| e.status == scheduler::EntryStatus::Failed)
        .count();
    eprintln!(
        "run {}: {} frames, {} decodes, {} entries ({failed} failed), {:.2} s",
        report.run_id,
        report.frames,
        report.counters.decode_count,
        report.entries.len(),
        report.wall_clock_ns as f64 / 1e9
    );
    for f in &report.counters.failures {
        eprintln!("  failure: {} {}", f.plugin, f.reason);
    }
}

fn run(args: RunArgs, json: bool) -> Result<ExitCode> {
    let config = run_config(&args)?;
    let outcome = scheduler::run(&config)?;
    let report = &outcome.report;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("reedsb-run-{}.json", report.run_id)));
    let csv = write_run(report, &path)?;
    if json {
        println!(
            "{}",
            json!({
                "report": path,
                "counters": csv,
                "run_id": report.run_id,
                "complete": report.complete,
                "failures": report.counters.failures.len(),
            })
        );
    } else {
        summarize(report);
        println!("{}", path.display());
    }
    if report.complete {
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("run incomplete, partial report at {}", path.display())
    }
}

fn compare(args: RunArgs, json: bool) -> Result<ExitCode> {
    let config = run_config(&args)?;
    let (comparison, parallel, naive) = scheduler::compare_modes(&config)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("reedsb-compare-{}.json", config.run_id())));
    let parallel_path = path.with_extension("parallel.json");
    let naive_path = path.with_extension("naive.json");
    write_run(&parallel.report, &parallel_path)?;
    write_run(&naive.report, &naive_path)?;
    write_json(&path, &comparison)?;
    if json {
        println!(
            "{}",
            json!({
                "report": path,
                "parallel": parallel_path,
                "naive": naive_path,
                "decode_ratio": comparison.decode_ratio,
                "partial": comparison.partial,
            })
        );
    } else {
        eprintln!(
            "decodes: parallel {} naive {} (ratio {}); wall clock ratio {:.2}{}",
            comparison.parallel.decode_count,
            comparison.naive.decode_count,
            group_thousands(comparison.decode_ratio, 3),
            comparison.wall_clock_ratio,
            if comparison.partial { "; partial" } else { "" }
        );
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn bytes_arg(flag: &str, text: &str) -> Result<f64> {
    parse_bytes(text).map_err(|e| anyhow!("--{flag}: {e}"))
}

fn plan(which: PlanCommand, json: bool, csv: bool) -> Result<ExitCode> {
    let mut table = Table::default();
    let value = match which {
        PlanCommand::Camera { width, height, bit_depth, rate, channels, packing } => {
            let sensor = SensorRate {
                width,
                height,
                bit_depth,
                rate_hz: rate,
                channels,
                packing: match packing {
                    PackingArg::Packed => Packing::Packed,
                    PackingArg::Word16 => Packing::Word16,
                },
            };
            let bytes = planner::camera_rate(&sensor);
            table.push("camera rate (B/s)", group_thousands(bytes, 0));
            table.push("camera rate (GB/s)", group_thousands(bytes / 1e9, 3));
            table.push("camera rate (GiB/s)", group_thousands(bytes / (1u64 << 30) as f64, 3));
            json!({ "sensor": sensor, "bytes_per_second": bytes })
        }
        PlanCommand::Lidar { points_per_second, bytes_per_point } => {
            let bytes = planner::lidar_rate(points_per_second, bytes_per_point);
            table.push("lidar rate (B/s)", group_thousands(bytes, 0));
            table.push("lidar rate (MB/s)", group_thousands(bytes / 1e6, 3));
            json!({ "points_per_second": points_per_second, "bytes_per_point": bytes_per_point, "bytes_per_second": bytes })
        }
        PlanCommand::Budget { rates, capacity, ratio } => {
            let rates = rates.iter().map(|r| bytes_arg("rate", r)).collect::<Result<Vec<_>>>()?;
            let capacity = bytes_arg("capacity", &capacity)?;
            let secs = planner::logging_budget(&rates, capacity, ratio)?;
            table.push("aggregate rate (GB/s)", group_thousands(rates.iter().sum::<f64>() / 1e9, 3));
            table.push("logging duration (s)", group_thousands(secs, 1));
            table.push("logging duration (min)", group_thousands(secs / 60.0, 1));
            json!({ "rates": rates, "capacity_bytes": capacity, "compression_ratio": ratio, "seconds": secs })
        }
        PlanCommand::Dump { bytes, rate } => {
            let bytes = bytes_arg("bytes", &bytes)?;
            let rate = bytes_arg("rate", &rate)?;
            let secs = planner::transfer_time(bytes, rate)?;
            table.push("dump time (s)", group_thousands(secs, 0));
            table.push("dump time (h)", group_thousands(secs / 3600.0, 1));
            json!({ "bytes": bytes, "rate": rate, "seconds": secs })
        }
        PlanCommand::Savings { volume, m, p, n } => {
            let report = planner::decode_savings(SavingsModel {
                n,
                m,
                p,
                volume_bytes: bytes_arg("volume", &volume)?,
            })?;
            table = report.table();
            serde_json::to_value(&report)?
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else if csv {
        print!("{}", table.to_csv());
    } else {
        print!("{}", table.to_text());
    }
    Ok(ExitCode::SUCCESS)
}
