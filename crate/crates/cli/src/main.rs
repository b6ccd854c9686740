//! `alsim`: run, batch and compare resuscitation team simulations from the
//! command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alsim::events::to_jsonl;
use alsim::metrics::{
    compare_arms, edge_list, fipa_distribution, parse_log, write_comparison_csv, write_distribution_csv,
    write_graph_csv, write_runs_csv, Comparison, METRIC_KEYS,
};
use alsim::{monte_carlo, run, Batch, ProtocolVariant, ScenarioConfig, SimError, Violation};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "alsim", version, about = "Simulate ALS resuscitation team communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a scenario file and list every problem found.
    Validate { scenario: PathBuf },
    /// Run one seeded simulation and write its event log and summary.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<ProtocolVariant>,
        /// Also write the sender/receiver edge list of spoken messages.
        #[arg(long)]
        emit_graph: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run consecutive seeds and write per-run rows plus an aggregate.
    Batch {
        scenario: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<ProtocolVariant>,
        #[command(flatten)]
        workers: Workers,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run two arms over the same seeds and compare them metric by metric.
    Compare {
        /// One scenario, or two (arm A then arm B).
        #[arg(num_args = 1..=2, required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, value_parser = parse_protocol)]
        arm_a: Option<ProtocolVariant>,
        #[arg(long, value_parser = parse_protocol)]
        arm_b: Option<ProtocolVariant>,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        workers: Workers,
        #[command(flatten)]
        out: OutDir,
    },
    /// Tally performatives and categories in an existing event log.
    Distribution {
        events: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
}

#[derive(Args, Debug)]
struct OutDir {
    /// Directory for output files; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Workers {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallelism: u64,
}

fn parse_protocol(s: &str) -> Result<ProtocolVariant, String> {
    ProtocolVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ProtocolVariant::ALL.iter().map(|v| v.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Why the command stopped, mapped onto the process exit status.
#[derive(Debug)]
enum Failure {
    Invalid(Vec<Violation>),
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidScenario(v) => Failure::Invalid(v),
            SimError::Argument(_) | SimError::Io(_) | SimError::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn load(path: &Path, protocol: Option<ProtocolVariant>) -> Result<ScenarioConfig, Failure> {
    let mut sc = ScenarioConfig::load(path).map_err(|e| io(path, e))?;
    if let Some(p) = protocol {
        sc.protocol.variant = p;
    }
    Ok(sc.validated()?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| io(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    let mut f = create(dir, name)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| io(&dir.join(name), e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(dir, name, &(text + "\n"))
}

fn validate(path: &Path) -> Result<(), Failure> {
    let sc = ScenarioConfig::load(path).map_err(|e| io(path, e))?;
    let violations = alsim::validate_scenario(&sc);
    if violations.is_empty() {
        println!("{}: ok", path.display());
        Ok(())
    } else {
        Err(Failure::Invalid(violations))
    }
}

fn run_one(path: &Path, seed: u64, protocol: Option<ProtocolVariant>, graph: bool, out: &Path) -> Result<(), Failure> {
    let sc = load(path, protocol)?;
    let output = run(&sc, seed, true)?;
    let events = output.events.unwrap_or_default();
    write_text(out, "events.jsonl", &to_jsonl(&events))?;
    write_json(out, "summary.json", &output.result)?;
    if graph {
        let team: Vec<String> = sc.team.iter().map(|a| a.id.clone()).collect();
        let f = create(out, "graph.csv")?;
        write_graph_csv(&edge_list(&events, &team), f)?;
    }
    let r = &output.result;
    println!(
        "seed {seed} {}: {} after {} s, no-flow {} s, {} messages",
        r.protocol,
        r.outcome.as_str(),
        r.total_seconds,
        r.no_flow_seconds,
        r.total_messages
    );
    Ok(())
}

fn report_faults(batch: &Batch) -> Result<(), Failure> {
    let faults = &batch.summary.faults;
    for (seed, f) in faults {
        eprintln!("seed {seed}: {f}");
    }
    if faults.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} runs faulted", faults.len(), batch.summary.n_runs)))
    }
}

fn batch(path: &Path, runs: u64, seed: u64, protocol: Option<ProtocolVariant>, workers: usize, out: &Path) -> Result<(), Failure> {
    let sc = load(path, protocol)?;
    let b = monte_carlo(&sc, runs as usize, seed, workers)?;
    write_runs_csv(&b.runs, create(out, "batch.csv")?)?;
    write_json(out, "batch_summary.json", &b.summary)?;
    let s = &b.summary;
    println!(
        "{} runs: ROSC {:.1}%, total {:.1} s (median {:.0}), no-flow {:.1} s (median {:.0}), {:.1} messages",
        s.completed,
        100.0 * s.rosc_rate,
        s.total_seconds.mean,
        s.total_seconds.median,
        s.no_flow_seconds.mean,
        s.no_flow_seconds.median,
        s.mean_total_messages
    );
    report_faults(&b)
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    arm_a: &'a alsim::BatchSummary,
    arm_b: &'a alsim::BatchSummary,
    comparisons: &'a [Comparison],
}

fn compare(
    scenarios: &[PathBuf],
    arms: (Option<ProtocolVariant>, Option<ProtocolVariant>),
    runs: u64,
    seed: u64,
    workers: usize,
    out: &Path,
) -> Result<(), Failure> {
    let (a, b) = match (scenarios, arms) {
        ([one], (Some(pa), Some(pb))) => (load(one, Some(pa))?, load(one, Some(pb))?),
        ([_], _) => {
            return Err(Failure::Usage(
                "compare needs two scenarios, or one scenario with both --arm-a and --arm-b".into(),
            ))
        }
        ([sa, sb], (pa, pb)) => (load(sa, pa)?, load(sb, pb)?),
        _ => unreachable!("clap limits scenarios to one or two"),
    };
    let arm_a = monte_carlo(&a, runs as usize, seed, workers)?;
    let arm_b = monte_carlo(&b, runs as usize, seed, workers)?;
    let (ra, rb) = (arm_a.results(), arm_b.results());
    let rows = METRIC_KEYS
        .iter()
        .map(|m| compare_arms(&ra, &rb, m))
        .collect::<alsim::Result<Vec<_>>>()?;
    write_comparison_csv(&rows, create(out, "compare.csv")?)?;
    write_runs_csv(&arm_a.runs, create(out, "arm_a.csv")?)?;
    write_runs_csv(&arm_b.runs, create(out, "arm_b.csv")?)?;
    write_json(
        out,
        "compare_summary.json",
        &CompareSummary { arm_a: &arm_a.summary, arm_b: &arm_b.summary, comparisons: &rows },
    )?;
    println!("A = {}, B = {}, {} seeds from {seed}", a.protocol.variant, b.protocol.variant, runs);
    println!("{:<18} {:>10} {:>10} {:>10}  lower", "metric", "mean A", "mean B", "p");
    for c in &rows {
        println!("{:<18} {:>10.2} {:>10.2} {:>10.2e}  {}", c.metric, c.a.mean, c.b.mean, c.test.p_value, c.direction.as_str());
    }
    report_faults(&arm_a)?;
    report_faults(&arm_b)
}

fn distribution(path: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let log = parse_log(&text).map_err(|e| io(path, e))?;
    let report = fipa_distribution(&log).map_err(|e| io(path, e))?;
    write_distribution_csv(&report, create(out, "distribution.csv")?)?;
    println!("{} messages", report.total);
    for s in report.performatives.iter().chain(&report.fipa_categories) {
        println!("  {:<16} {:>6} {:>7.2}%", s.label, s.count, s.percent);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { scenario } => validate(&scenario),
        Command::Run { scenario, seed, protocol, emit_graph, out } => {
            run_one(&scenario, seed, protocol, emit_graph, &out.out)
        }
        Command::Batch { scenario, runs, seed, protocol, workers, out } => {
            batch(&scenario, runs, seed, protocol, workers.parallelism as usize, &out.out)
        }
        Command::Compare { scenarios, arm_a, arm_b, runs, seed, workers, out } => {
            compare(&scenarios, (arm_a, arm_b), runs, seed, workers.parallelism as usize, &out.out)
        }
        Command::Distribution { events, out } => distribution(&events, &out.out),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on bad arguments and 0 for --help
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(v) => {
                    eprintln!("scenario has {} problem(s):", v.len());
                    for x in v {
                        eprintln!("  {x}");
                    }
                }
                Failure::Usage(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
