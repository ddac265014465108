use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use pilotrep::trace::DEFAULT_RETIRE_TIME;
use pilotrep::{
    build_lifetime_dist, compute_failure_curve, detect_dataset, determine_valleys,
    filter_dataset, generate_synthetic, parse_trace, run_simulation, DetectorConfig,
    FailureRateCurve, SimConfig, SimInput, SimReport, SyntheticTraceSpec,
};

#[derive(Parser)]
#[command(name = "pilotrep", version, about = "Replicated task placement on pilot jobs")]
struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace from a JSON spec.
    Gen {
        /// Synthetic trace spec (JSON).
        spec: PathBuf,
    },
    /// Validate a trace and summarize it as JSON.
    Ingest {
        trace: PathBuf,
        /// Also write the lifetime histogram here.
        #[arg(long)]
        dist_out: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        bin_width: i64,
    },
    /// Detect termination bursts; writes the halt windows as JSON.
    Detect {
        trace: PathBuf,
        /// Detector config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the trace without pilots ending inside halt windows.
        #[arg(long)]
        filtered_out: Option<PathBuf>,
    },
    /// Measure failure-rate curves; writes one CSV per redundancy into --out.
    Curves {
        trace: PathBuf,
        #[arg(long)]
        lease: i64,
        #[arg(long, default_value_t = 1)]
        r_min: usize,
        #[arg(long, default_value_t = 12)]
        r_max: usize,
        #[arg(long, default_value_t = 12_000)]
        interval: i64,
        #[arg(long, default_value_t = 6_000)]
        cadence: i64,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Cut a valley table out of curves sharing one lease.
    Valleys {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        availability: f64,
        #[arg(long, default_value_t = DEFAULT_RETIRE_TIME)]
        retire_time: i64,
    },
    /// Replay a trace; writes the report CSV to --out and JSON beside it.
    Simulate {
        config: PathBuf,
        /// Trace to split into training and test spans, replacing the
        /// config's data source.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a report JSON.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

/// Exit codes by failure kind.
mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const CONFIG: u8 = 4;
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pilotrep::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return exit::USAGE;
        }
        if let Some(e) = cause.downcast_ref::<io::Error>() {
            if e.kind() == io::ErrorKind::NotFound {
                return exit::USAGE;
            }
        }
        if cause.is::<serde_json::Error>() {
            return exit::PARSE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) if io.kind() == io::ErrorKind::NotFound => exit::USAGE,
                E::Parse { .. } | E::Validation { .. } | E::Json(_) | E::Csv(_) => exit::PARSE,
                E::MissingValleyTable { .. } | E::InvalidParameter(_) | E::Contract(_) => {
                    exit::CONFIG
                }
                _ => exit::OTHER,
            };
        }
    }
    exit::OTHER
}

fn require_inputs<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn require_out(out: &Option<PathBuf>) -> anyhow::Result<&Path> {
    out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `out`, or stdout when none was given.
fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn render_table(report: &SimReport) -> String {
    let mut s = format!(
        "{:>6} {:>7} {:>7} {:>9} {:>6} {:>9} {:>8} {:>8} {:>8}\n",
        "avail", "lease_s", "alg", "attempted", "held", "fail", "redund", "util", "util/smp"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for c in &report.cells {
        s.push_str(&format!(
            "{:>6} {:>7} {:>7} {:>9} {:>6} {:>9} {:>8} {:>8} {:>8}\n",
            c.availability,
            c.lease_s,
            c.algorithm.to_string(),
            c.attempted,
            c.held,
            f(c.failure_rate),
            f(c.mean_redundancy),
            f(c.utilization),
            f(c.utilization_per_sample),
        ));
    }
    s
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting thread pool")?;
    }

    match &cli.command {
        Command::Gen { spec } => {
            require_inputs([spec])?;
            let out = require_out(&cli.out)?;
            let mut spec: SyntheticTraceSpec = serde_json::from_str(&read_text(spec)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let ds = generate_synthetic(&spec)?;
            info!("generated {} pilots", ds.len());
            ds.save(out)?;
        }
        Command::Ingest { trace, dist_out, bin_width } => {
            require_inputs([trace])?;
            let ds = parse_trace(trace)?;
            let (expected, unexpected) = ds.count_by_expectation();
            let summary = serde_json::json!({
                "records": ds.len(),
                "expected": expected,
                "unexpected": unexpected,
                "first_start": ds.first_start(),
                "last_start": ds.last_start(),
                "last_end": ds.last_end(),
                "retire_time": ds.retire_time(),
                "kill_time": ds.kill_time(),
            });
            emit(&cli.out, &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
            if let Some(p) = dist_out {
                write_text(p, &build_lifetime_dist(&ds, *bin_width)?.to_json())?;
            }
        }
        Command::Detect { trace, config, filtered_out } => {
            require_inputs([trace].into_iter().chain(config))?;
            let out = require_out(&cli.out)?;
            let mut det: DetectorConfig = match config {
                Some(p) => serde_json::from_str(&read_text(p)?)?,
                None => DetectorConfig::default(),
            };
            det.validate()?;
            if let Some(seed) = cli.seed {
                det.forest.seed = seed;
            }
            let ds = parse_trace(trace)?;
            let halts = detect_dataset(&ds, &det)?;
            info!("{} halt windows", halts.windows().len());
            write_text(out, &format!("{}\n", halts.to_json()))?;
            if let Some(p) = filtered_out {
                let kept = filter_dataset(&ds, &halts);
                info!("kept {} of {} pilots", kept.len(), ds.len());
                kept.save(p)?;
            }
        }
        Command::Curves { trace, lease, r_min, r_max, interval, cadence, reps } => {
            require_inputs([trace])?;
            let out = require_out(&cli.out)?;
            if *r_min == 0 || r_min > r_max {
                return Err(usage("redundancy range must satisfy 1 <= r-min <= r-max"));
            }
            let ds = parse_trace(trace)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let seed = cli.seed.unwrap_or(0);
            for r in *r_min..=*r_max {
                let curve = compute_failure_curve(
                    &ds,
                    *lease,
                    r,
                    *interval,
                    *cadence,
                    *reps,
                    pilotrep::valley::curve_seed(seed, *lease, r),
                )?;
                let path = out.join(format!("curve_lease{lease}_r{r}.csv"));
                let mut w = BufWriter::new(File::create(&path)?);
                curve.write_csv(&mut w)?;
                w.flush()?;
                info!("wrote {}", path.display());
            }
        }
        Command::Valleys { curves, availability, retire_time } => {
            require_inputs(curves)?;
            let out = require_out(&cli.out)?;
            let parsed = curves
                .iter()
                .map(|p| {
                    FailureRateCurve::read_csv(File::open(p)?)
                        .with_context(|| format!("reading {}", p.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let table = determine_valleys(&parsed, *availability, *retire_time)?;
            if table.is_empty() {
                log::warn!("no redundancy level produced a valley");
            }
            write_text(out, &format!("{}\n", table.to_json()))?;
        }
        Command::Simulate { config, trace, json } => {
            require_inputs([config].into_iter().chain(trace))?;
            let out = require_out(&cli.out)?;
            let mut cfg = SimConfig::from_json(&read_text(config)?)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let input = match (trace, &cfg.data) {
                (Some(t), _) => {
                    let fraction = match &cfg.data {
                        Some(pilotrep::DataSource::Split { train_fraction, .. }) => *train_fraction,
                        _ => 0.75,
                    };
                    SimInput::split(parse_trace(t)?, fraction)?
                }
                (None, Some(source)) => {
                    let paths: Vec<PathBuf> = match source {
                        pilotrep::DataSource::Split { trace, .. } => vec![trace.clone()],
                        pilotrep::DataSource::Separate { train, test } => {
                            vec![train.clone(), test.clone()]
                        }
                    };
                    require_inputs(&paths)?;
                    SimInput::load(source)?
                }
                (None, None) => bail!(usage("no trace given: pass --trace or set data in the config")),
            };
            let report = run_simulation(&cfg, &input)?;
            info!(
                "{} samples replayed, {} skipped by halts",
                report.samples, report.halted_samples
            );
            write_text(out, &report.to_csv_string())?;
            let json_path = json.clone().unwrap_or_else(|| out.with_extension("json"));
            write_text(&json_path, &format!("{}\n", report.to_json()))?;
        }
        Command::Report { report, format } => {
            require_inputs([report])?;
            let report: SimReport = serde_json::from_str(&read_text(report)?)?;
            let text = match format {
                Format::Csv => report.to_csv_string(),
                Format::Table => render_table(&report),
            };
            emit(&cli.out, &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
