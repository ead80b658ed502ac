use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use pcnlab::harness::{execute, explore, run_ideal, Report, Scenario};
use pcnlab::simnet::{ExploreBound, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Protocol,
    Ideal,
}

/// Run a payment-channel scenario on the simulated network.
#[derive(Debug, Parser)]
#[command(name = "pcnlab", version)]
struct Args {
    /// Scenario file in JSONL format.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario mode: fulgor or rayo.
    #[arg(long)]
    mode: Option<String>,
    /// `enumerate`, `seed:N` or `choices:a.b.c`.
    #[arg(long, default_value = "seed:0")]
    schedule: String,
    /// Override the proof backend: revealing or oracle.
    #[arg(long)]
    proof_backend: Option<String>,
    /// Write metrics JSON here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the message trace as JSONL here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Choice points explored exhaustively before falling back to sampling.
    #[arg(long, default_value_t = ExploreBound::default().max_events)]
    max_events: usize,
    #[arg(long, value_enum, default_value_t = Model::Protocol)]
    model: Model,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(json!(s)).map_err(|_| anyhow!("unknown value {s:?}"))
}

fn emit(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn report_violations(schedule: &str, report: &Report) {
    for v in &report.violations {
        eprintln!("violation under {schedule}: {v}");
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let args = Args::parse();
    let text = fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario = Scenario::from_jsonl(&text)?;
    if let Some(m) = &args.mode {
        scenario.header.mode = parse_enum(m)?;
    }
    if let Some(p) = &args.proof_backend {
        scenario.header.proof_backend = parse_enum(p)?;
    }

    if args.model == Model::Ideal {
        let metrics = run_ideal(&scenario)?;
        emit(&args.metrics, &metrics.to_json())?;
        return Ok(ExitCode::SUCCESS);
    }

    if args.schedule == "enumerate" {
        let bound = ExploreBound {
            max_events: args.max_events,
            ..ExploreBound::default()
        };
        let ex = explore(&scenario, &bound)?;
        if let Some(w) = &ex.warning {
            eprintln!("warning: {w}; sampled {} schedules", ex.runs.len());
        }
        let all: Vec<_> = ex.runs.iter().map(|(_, r)| &r.metrics).collect();
        emit(&args.metrics, &serde_json::to_string_pretty(&all)?)?;
        let bad = ex.runs.iter().find(|(_, r)| !r.report.ok());
        eprintln!(
            "schedules: {} exhaustive: {} violating: {}",
            ex.runs.len(),
            ex.exhaustive,
            ex.runs.iter().filter(|(_, r)| !r.report.ok()).count()
        );
        if let Some((s, r)) = bad {
            report_violations(&s.to_string(), &r.report);
            if let Some(t) = &args.trace {
                fs::write(t, execute(&scenario, s.clone())?.net.trace_jsonl())?;
            }
            return Ok(ExitCode::from(2));
        }
        return Ok(ExitCode::SUCCESS);
    }

    let schedule: Schedule = args
        .schedule
        .parse()
        .map_err(|e| anyhow!("bad --schedule {:?}: {e}", args.schedule))?;
    let ex = execute(&scenario, schedule)?;
    let report = ex.check();
    emit(&args.metrics, &ex.metrics().to_json())?;
    if let Some(t) = &args.trace {
        fs::write(t, ex.net.trace_jsonl())?;
    }
    if !report.ok() {
        report_violations(&args.schedule, &report);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
