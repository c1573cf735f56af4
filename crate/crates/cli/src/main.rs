//! Command-line driver: simulate workloads into trace files, analyze
//! traces into wait-time and client-attribution reports, dump traces as
//! text, and reduce profile/coverage data files into reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tracekit_core::attribution::{attribute_cpu, detect_servers, render_attribution};
use tracekit_core::profile::{
    call_graph, coverage_report, flat_profile, render_call_graph, render_flat_profile,
    CoverageCounts, ProfileData,
};
use tracekit_core::replay::{attribute_pids, AttributedEvent};
use tracekit_core::scenario::parse_scenario;
use tracekit_core::sim::{emit_samples, run_simulation, SamplingMode, SamplingPolicy, SimError};
use tracekit_core::trace::{decode_trace, dump_trace, TraceFile, DEFAULT_BLOCK_CAPACITY};
use tracekit_core::wait::{decompose_full, render_report};
use tracekit_core::Pid;

/// Exit code for input/usage errors (missing files, parse errors,
/// malformed traces).
const EXIT_INPUT: u8 = 2;
/// Exit code for domain errors (simulation deadlock, replay
/// inconsistency).
const EXIT_DOMAIN: u8 = 3;

#[derive(Parser)]
#[command(name = "tracekit", version, about = "Event-trace simulation and analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct FormatArg {
    /// Report format.
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file; write the binary trace and ground-truth JSON.
    Simulate {
        scenario: PathBuf,
        out_trace: PathBuf,
        out_truth: PathBuf,
        /// Seed for sampling randomness.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Events per trace block.
        #[arg(long, default_value_t = DEFAULT_BLOCK_CAPACITY)]
        block_capacity: usize,
        /// Sampling policy: fixed:<period_us> or jitter:<mean_us>:<half_width_us>.
        #[arg(long)]
        sampling: Option<String>,
        /// Where to write sampled profile data (requires --sampling).
        #[arg(long)]
        profile_out: Option<PathBuf>,
    },
    /// Decompose a trace into per-process wait breakdowns.
    Analyze {
        trace: PathBuf,
        report: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Attribute server CPU time to clients.
    Attribute {
        trace: PathBuf,
        report: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Print a trace as text, one line per event with its pid.
    Dump {
        trace: PathBuf,
        /// Write to a file instead of stdout.
        report: Option<PathBuf>,
    },
    /// Flat profile from a profile data file.
    ProfileFlat {
        profile_data: PathBuf,
        report: PathBuf,
        /// Flag this function as profiling overhead and report a
        /// compensated total.
        #[arg(long)]
        overhead_function: Option<String>,
    },
    /// Call-graph report from a profile data file.
    ProfileGraph {
        profile_data: PathBuf,
        report: PathBuf,
    },
    /// Coverage report from a coverage counts file.
    Coverage {
        counts: PathBuf,
        report: PathBuf,
    },
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn input_error(message: String) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message,
    }
}

fn domain_error(message: String) -> CliError {
    CliError {
        code: EXIT_DOMAIN,
        message,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("tracekit: {err}");
            ExitCode::from(err.code)
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            input_error(format!("file not found: {}", path.display()))
        } else {
            input_error(format!("cannot read {}: {e}", path.display()))
        }
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_input(path)?)
        .map_err(|_| input_error(format!("{} is not UTF-8 text", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))
}

fn parse_sampling(spec: &str, seed: u64) -> Result<SamplingPolicy, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || {
        input_error(format!(
            "bad --sampling '{spec}': expected fixed:<us> or jitter:<mean>:<half>"
        ))
    };
    let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
    match parts.as_slice() {
        ["fixed", period] => Ok(SamplingPolicy {
            mode: SamplingMode::Fixed {
                period_us: num(period)?,
            },
            seed,
        }),
        ["jitter", mean, half] => {
            let mean_period_us = num(mean)?;
            let half_width_us = num(half)?;
            if half_width_us >= mean_period_us {
                return Err(input_error(format!(
                    "bad --sampling '{spec}': half width must be below the mean"
                )));
            }
            Ok(SamplingPolicy {
                mode: SamplingMode::Jittered {
                    mean_period_us,
                    half_width_us,
                },
                seed,
            })
        }
        _ => Err(bad()),
    }
}

/// Decodes a trace file and attributes pids to its events.
fn load_trace(path: &Path) -> Result<(TraceFile, Vec<AttributedEvent>), CliError> {
    let bytes = read_input(path)?;
    let trace = TraceFile::from_bytes(&bytes)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let events = decode_trace(&bytes)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?
        .1;
    let attributed = attribute_pids(&trace.snapshot, &events)
        .map_err(|e| domain_error(format!("{}: {e}", path.display())))?;
    Ok((trace, attributed))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            scenario,
            out_trace,
            out_truth,
            seed,
            block_capacity,
            sampling,
            profile_out,
        } => {
            let text = read_text(&scenario)?;
            let parsed = parse_scenario(&text)
                .map_err(|e| input_error(format!("{}: {e}", scenario.display())))?;
            let run = run_simulation(&parsed, seed).map_err(|e| match e {
                SimError::Deadlock { .. } => domain_error(format!("simulation deadlock: {e}")),
                other => input_error(other.to_string()),
            })?;
            let trace = run.trace_file(block_capacity.max(1));
            write_output(&out_trace, &trace.to_bytes())?;
            let truth_json =
                serde_json::to_string_pretty(&run.truth).expect("ground truth serializes");
            write_output(&out_truth, truth_json.as_bytes())?;
            if let Some(spec) = sampling {
                let policy = parse_sampling(&spec, seed)?;
                let hist = emit_samples(&run, &policy, &run.symbols);
                let data = ProfileData::from_parts(&hist, &run.arcs, &run.symbols);
                let out = profile_out.ok_or_else(|| {
                    input_error("--sampling requires --profile-out <path>".to_string())
                })?;
                let json = serde_json::to_string_pretty(&data).expect("profile data serializes");
                write_output(&out, json.as_bytes())?;
            } else if profile_out.is_some() {
                return Err(input_error("--profile-out requires --sampling".to_string()));
            }
            println!(
                "simulated {} events in {} blocks over {} cpus",
                trace.event_count(),
                trace.blocks.len(),
                trace.snapshot.running.len()
            );
            Ok(())
        }
        Command::Analyze {
            trace,
            report,
            format,
        } => {
            let (trace_file, attributed) = load_trace(&trace)?;
            let (analysis, replay) = decompose_full(&trace_file.snapshot, &attributed)
                .map_err(|e| domain_error(format!("{}: {e}", trace.display())))?;
            let rendered = match format.format {
                Format::Text => render_report(&analysis, &replay.connections),
                Format::Json => {
                    serde_json::to_string_pretty(&analysis).expect("analysis serializes")
                }
            };
            write_output(&report, rendered.as_bytes())
        }
        Command::Attribute {
            trace,
            report,
            format,
        } => {
            let (trace_file, attributed) = load_trace(&trace)?;
            let replay = tracekit_core::replay::replay(&trace_file.snapshot, &attributed)
                .map_err(|e| domain_error(format!("{}: {e}", trace.display())))?;
            let servers = detect_servers(&replay);
            let profiles = attribute_cpu(&trace_file.snapshot, &replay, &attributed, &servers)
                .map_err(|e| domain_error(format!("{}: {e}", trace.display())))?;
            let rendered = match format.format {
                Format::Text => render_attribution(&profiles),
                Format::Json => {
                    serde_json::to_string_pretty(&profiles).expect("profiles serialize")
                }
            };
            write_output(&report, rendered.as_bytes())
        }
        Command::Dump { trace, report } => {
            let (trace_file, attributed) = load_trace(&trace)?;
            let annotations: BTreeMap<usize, Pid> = attributed
                .iter()
                .enumerate()
                .map(|(i, ev)| (i, ev.pid))
                .collect();
            let text = dump_trace(&trace_file, Some(&annotations));
            match report {
                Some(path) => write_output(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::ProfileFlat {
            profile_data,
            report,
            overhead_function,
        } => {
            let data: ProfileData = serde_json::from_str(&read_text(&profile_data)?)
                .map_err(|e| input_error(format!("{}: {e}", profile_data.display())))?;
            let symbols = data.symbol_table();
            let mut flat = flat_profile(&data.histogram(), &symbols, overhead_function.as_deref());
            let arcs = data.arc_table();
            if !arcs.is_empty() {
                let graph = call_graph(&flat, &arcs);
                flat.annotate_calls(&graph);
            }
            write_output(&report, render_flat_profile(&flat).as_bytes())
        }
        Command::ProfileGraph {
            profile_data,
            report,
        } => {
            let data: ProfileData = serde_json::from_str(&read_text(&profile_data)?)
                .map_err(|e| input_error(format!("{}: {e}", profile_data.display())))?;
            let symbols = data.symbol_table();
            let flat = flat_profile(&data.histogram(), &symbols, None);
            let graph = call_graph(&flat, &data.arc_table());
            write_output(&report, render_call_graph(&graph).as_bytes())
        }
        Command::Coverage { counts, report } => {
            let parsed: CoverageCounts = serde_json::from_str(&read_text(&counts)?)
                .map_err(|e| input_error(format!("{}: {e}", counts.display())))?;
            write_output(&report, coverage_report(&parsed).as_bytes())
        }
    }
}
