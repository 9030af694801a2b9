use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use beem_core::calibration::{error_rate_grid, CLASSICAL_GRID};
use beem_core::evaluation::format_table;
use beem_core::trace_io::{
    load_config, load_policies_config, load_report, load_synth_config, load_traces, report_to_string, save_report,
    save_traces,
};
use beem_core::{
    calibrate_classical, calibrate_error_rate, check_condition, evaluate, generate, standalone_error_rates, Dataset,
    Policy, WeightScheme,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "beem", version, about = "Ensemble early-exit decisions over multi-exit traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Choose exit thresholds on a validation trace file.
    Calibrate {
        #[arg(long)]
        val: PathBuf,
        /// `cost:LAMBDA`, `accuracy` (from the validation file) or `explicit:FILE` (JSON array).
        #[arg(long, default_value = "cost:0.1")]
        weights: String,
        #[arg(long, value_enum, default_value_t = Method::ErrorRate)]
        method: Method,
        /// Comma-separated threshold grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Error-rate bound; defaults to the final exit's validation error.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay one policy and report accuracy and speedup.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        policy_config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay several policies and print a table.
    Compare {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        policies_config: PathBuf,
        /// Also write the reports as a JSON array.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the performance condition for each exit.
    CheckTheorem {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        policy_config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show per-exit scores, predictions and confidences for one trace.
    Inspect {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        trace_id: String,
        #[arg(long)]
        policy_config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    ErrorRate,
    Classical,
}

/// Bad flag values; reported with exit status 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed } => {
            let mut cfg = load_synth_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = generate(&cfg)?;
            save_traces(&data, &out)?;
            eprintln!("wrote {} traces to {}", data.len(), out.display());
        }
        Command::Calibrate {
            val,
            weights,
            method,
            grid,
            p,
            out,
        } => {
            if p.is_some() && matches!(method, Method::Classical) {
                return Err(usage("--p only applies to --method error-rate"));
            }
            let data = load_traces(&val)?;
            let scheme = weight_scheme(&weights, &data)?;
            let report = match method {
                Method::ErrorRate => {
                    let grid = grid.unwrap_or_else(|| error_rate_grid(data.layers()));
                    calibrate_error_rate(&data, &scheme, &grid, p)?
                }
                Method::Classical => {
                    let grid = grid.unwrap_or_else(|| CLASSICAL_GRID.to_vec());
                    calibrate_classical(&data, &scheme, &grid)?
                }
            };
            save_report(&report, &out)?;
            eprintln!("thresholds {:?} (p = {})", report.thresholds, report.p);
        }
        Command::Evaluate {
            test,
            policy_config,
            out,
        } => {
            let data = load_traces(&test)?;
            let (policy, label) = policy_from(&policy_config, data.layers())?;
            let mut report = evaluate(&data, &policy)?;
            report.policy = label;
            emit(&report, out.as_deref())?;
        }
        Command::Compare {
            test,
            policies_config,
            out,
        } => {
            let data = load_traces(&test)?;
            let cfg = load_policies_config(&policies_config)?;
            let base = policies_config.parent();
            let reports = cfg
                .policies
                .iter()
                .map(|c| {
                    let policy = c.policy(data.layers(), base)?;
                    let mut r = evaluate(&data, &policy)?;
                    r.policy = c.label(&policy);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(path) = &out {
                save_report(&reports, path)?;
            }
            print!("{}", format_table(&reports));
        }
        Command::CheckTheorem {
            test,
            policy_config,
            out,
        } => {
            let data = load_traces(&test)?;
            let (policy, label) = policy_from(&policy_config, data.layers())?;
            let mut report = check_condition(&data, &policy)?;
            report.policy = label;
            emit(&report, out.as_deref())?;
        }
        Command::Inspect {
            test,
            trace_id,
            policy_config,
        } => {
            let data = load_traces(&test)?;
            let (policy, _) = policy_from(&policy_config, data.layers())?;
            let trace = data
                .find(&trace_id)
                .ok_or_else(|| anyhow!("no trace with id `{trace_id}` in {}", test.display()))?;
            print!("{}", inspect(trace, &policy, data.layers())?);
        }
    }
    Ok(())
}

fn weight_scheme(spec: &str, val: &Dataset) -> Result<WeightScheme> {
    let (kind, arg) = match spec.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (spec, None),
    };
    match (kind, arg) {
        ("cost", Some(l)) => {
            let lambda: f64 = l.parse().map_err(|_| usage(format!("bad cost lambda `{l}`")))?;
            Ok(WeightScheme::Cost { lambda })
        }
        ("accuracy", None) => {
            let acc = standalone_error_rates(val)?.iter().map(|q| 1.0 - q).collect();
            Ok(WeightScheme::Accuracy { acc })
        }
        ("explicit", Some(path)) => {
            let weights: Vec<f64> =
                load_report(path).with_context(|| format!("reading explicit weights from {path}"))?;
            Ok(WeightScheme::Explicit { weights })
        }
        _ => Err(usage(format!(
            "bad --weights `{spec}`; expected cost:LAMBDA, accuracy or explicit:FILE"
        ))),
    }
}

fn policy_from(path: &Path, layers: usize) -> Result<(Policy, String)> {
    let cfg = load_config(path)?;
    let policy = cfg.policy(layers, path.parent())?;
    let label = cfg.label(&policy);
    Ok((policy, label))
}

/// JSON to `out` if given, else stdout.
fn emit<T: serde::Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => save_report(report, path)?,
        None => print!("{}", report_to_string(report)?),
    }
    Ok(())
}

/// Up to six decimals, trailing zeros dropped.
fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn inspect(trace: &beem_core::SampleTrace, policy: &Policy, layers: usize) -> Result<String> {
    let d = policy.prepare(layers)?.decide(trace);
    let scores: Vec<String> = d.per_layer_scores.iter().map(|&s| num(s)).collect();
    let mut out = format!("trace {}  policy {policy}\n", trace.id());
    out.push_str(&format!("S = [{}]\n", scores.join(", ")));
    out.push_str(&format!("exit {}  label {}\n", d.exit_layer, d.label));
    out.push_str(&format!("{:>5}  {:>10}  {:>5}  {:>10}\n", "exit", "S", "pred", "conf"));
    for (i, r) in trace.records().iter().enumerate() {
        let s = d.per_layer_scores.get(i).map_or_else(|| "-".to_string(), |&s| num(s));
        out.push_str(&format!("{:>5}  {:>10}  {:>5}  {:>10}\n", i + 1, s, r.label(), num(r.confidence())));
    }
    if let Some(y) = trace.true_label() {
        out.push_str(&format!("true label {y}\n"));
    }
    Ok(out)
}
