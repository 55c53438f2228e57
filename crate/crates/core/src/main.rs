use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use winsched::harness::sim::{write_compare_csv, write_findings_csv, write_metrics_csv};
use winsched::harness::{self, ArrivalModel, LaxityDist, RunOptions, WorkloadSpec};
use winsched::model::{ceil_load, event_stream, EventKind, SystemState};
use winsched::oracle::opt_ffd_by_counts;
use winsched::tree_policy::ThresholdFn;
use winsched::PolicyConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_BREACH: u8 = 3;

#[derive(Parser)]
#[command(name = "winsched", version, about = "Windows scheduling with reallocations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random workload as XML.
    Generate {
        #[arg(long, default_value_t = 4000)]
        count: usize,
        #[arg(long, default_value = "normal")]
        dist: LaxityDist,
        #[arg(long, default_value = "uniform")]
        arrivals: ArrivalModel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one policy and write per-round metrics.
    Run {
        #[arg(long)]
        policy: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lazy repack trigger: `channels` or `ratio`.
        #[arg(long = "lazy-threshold", default_value = "channels")]
        threshold: ThresholdFn,
        #[arg(long)]
        no_big_channel: bool,
        #[arg(long)]
        strict_pow2: bool,
        #[arg(long)]
        slot_verify: bool,
        /// Fail verification on gaps across reallocations too.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        audit: bool,
        #[arg(long)]
        fail_on_breach: bool,
        /// Where to write violations and breaches (CSV).
        #[arg(long)]
        findings: Option<PathBuf>,
    },
    /// Run several policies on one workload and write a merged table.
    Compare {
        /// Comma-separated policy labels.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<PolicyConfig>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimum channel counts for a workload.
    OracleOpt {
        #[arg(long)]
        input: PathBuf,
    },
}

fn policy_config(name: &str, threshold: ThresholdFn, no_big: bool, strict_pow2: bool) -> Result<PolicyConfig, String> {
    match name.parse::<PolicyConfig>()? {
        PolicyConfig::Lazy { .. } if name == "lazy" => Ok(PolicyConfig::Lazy { threshold }),
        PolicyConfig::Classified { big_channel, .. } => {
            Ok(PolicyConfig::Classified { big_channel: big_channel && !no_big, strict_pow2 })
        }
        other => Ok(other),
    }
}

fn create(path: &PathBuf) -> io::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new)
}

fn execute(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Generate { count, dist, arrivals, seed, out } => {
            let spec = WorkloadSpec { count, laxity_dist: dist, arrival_model: arrivals, seed };
            let clients = harness::generate(&spec).map_err(|e| e.to_string())?;
            harness::write_workload_xml(&clients, &out).map_err(|e| e.to_string())?;
            println!("wrote {} clients to {}", clients.len(), out.display());
            Ok(0)
        }
        Command::Run {
            policy,
            input,
            out,
            threshold,
            no_big_channel,
            strict_pow2,
            slot_verify,
            strict,
            audit,
            fail_on_breach,
            findings,
        } => {
            let config = policy_config(&policy, threshold, no_big_channel, strict_pow2)?;
            let clients = harness::read_workload_xml(&input).map_err(|e| e.to_string())?;
            let opts = RunOptions { slot_verify, audit: audit || fail_on_breach, horizon: None };
            let res = harness::run(&config, &clients, &opts).map_err(|e| e.to_string())?;
            write_metrics_csv(create(&out).map_err(|e| e.to_string())?, &res.metrics).map_err(|e| e.to_string())?;
            if let Some(path) = findings {
                let mut rows = res.violation_rows();
                rows.extend(res.breach_rows());
                write_findings_csv(create(&path).map_err(|e| e.to_string())?, &rows).map_err(|e| e.to_string())?;
            }
            let s = &res.summary;
            println!(
                "{}: rounds={} cum_realloc={} max_channels={} max_amortized={:.4} max_ratio={:.4} max_objective={:.4}",
                s.policy, s.rounds, s.cum_realloc, s.max_channels, s.max_amortized, s.max_ratio, s.max_objective
            );
            if slot_verify {
                println!(
                    "transmissions={} violations={} boundary={}",
                    s.transmissions, s.violations, s.boundary_violations
                );
            }
            if opts.audit {
                println!("breaches={}", s.breaches);
            }
            let failing = if strict { s.violations } else { res.non_boundary_violations() };
            if failing > 0 {
                Ok(EXIT_VERIFY)
            } else if fail_on_breach && s.breaches > 0 {
                Ok(EXIT_BREACH)
            } else {
                Ok(0)
            }
        }
        Command::Compare { policies, input, out } => {
            let clients = harness::read_workload_xml(&input).map_err(|e| e.to_string())?;
            let runs = harness::compare(&policies, &clients, &RunOptions::default()).map_err(|e| e.to_string())?;
            write_compare_csv(create(&out).map_err(|e| e.to_string())?, &policies, &runs).map_err(|e| e.to_string())?;
            for r in &runs {
                let s = &r.summary;
                println!(
                    "{}: cum_realloc={} max_channels={} max_objective={:.4}",
                    s.policy, s.cum_realloc, s.max_channels, s.max_objective
                );
            }
            Ok(0)
        }
        Command::OracleOpt { input } => {
            let clients = harness::read_workload_xml(&input).map_err(|e| e.to_string())?;
            let laxity: std::collections::HashMap<_, _> = clients.iter().map(|c| (c.id, c.laxity)).collect();
            let mut state = SystemState::new();
            let (mut peak_opt, mut peak_ceil) = (0, 0);
            for ev in event_stream(&clients) {
                state.apply(&ev, laxity[&ev.client]);
                if ev.kind == EventKind::Arrival {
                    peak_opt = peak_opt.max(opt_ffd_by_counts(state.laxity_counts()).map_err(|e| e.to_string())?);
                    peak_ceil = peak_ceil.max(ceil_load(state.load()));
                }
            }
            println!("clients={} peak_opt={} peak_ceilH={}", clients.len(), peak_opt, peak_ceil);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
