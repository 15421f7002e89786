//! `qdetect`: solve, simulate and sweep the Bayesian disorder problem from a
//! JSON configuration.

mod config;
mod output;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use qdetect_core::reference::bt_expansion;
use qdetect_core::simulate::evaluate_policy;
use qdetect_core::solver::{default_pi_grid, value_iterate};
use qdetect_core::Error;

use config::{ConfigError, Loaded, RunConfig};
use output::{num, Sink};

#[derive(Parser)]
#[command(
    name = "qdetect",
    version,
    about = "Bayesian quickest detection of a simultaneous change"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the value function, thresholds and Bayes risks.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the Bayes risk of fixed thresholds by simulation.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep delay costs and compare with the small-cost expansion.
    Asymptotics {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated costs; defaults to 0.02, 0.04, ..., 0.2, 0.3, ..., 1.
        #[arg(long, value_delimiter = ',')]
        costs: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<selftest::Fault>,
    },
}

const EXIT_SELFTEST: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

enum Failure {
    Config(String),
    /// Numerical diagnostic; the summary is written before returning this.
    Numerical(String),
    Io(std::io::Error),
    Selftest,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidParameter { .. } | Error::ZeroDrift | Error::AbsoluteContinuity { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical diagnostic: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(Failure::Selftest) => ExitCode::from(EXIT_SELFTEST),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Solve { config, out } => {
            let l = load(&config)?;
            let mut sink = sink(&l, out.as_deref())?;
            cmd_solve(&l, &mut sink)
        }
        Command::Simulate { config, out } => {
            let l = load(&config)?;
            if l.config.simulation.thresholds.is_empty() {
                return Err(Failure::Config(
                    "simulation.thresholds: at least one threshold is required".into(),
                ));
            }
            let mut sink = sink(&l, out.as_deref())?;
            cmd_simulate(&l, &mut sink)
        }
        Command::Asymptotics { config, costs, out } => {
            let l = load(&config)?;
            let costs = costs.unwrap_or_else(default_costs);
            if costs.is_empty() || costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                return Err(Failure::Config(
                    "costs: every cost must be finite and > 0".into(),
                ));
            }
            let mut sink = sink(&l, out.as_deref())?;
            cmd_asymptotics(&l, &costs, &mut sink)
        }
        Command::Selftest {
            config,
            inject_fault,
        } => {
            let seed = match &config {
                Some(p) => {
                    let l = load(p)?;
                    l.config.numerics.master_seed
                }
                None => config::example_config().numerics.master_seed,
            };
            let checks = selftest::run(seed, inject_fault);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                Err(Failure::Selftest)
            } else {
                Ok(())
            }
        }
    }
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let l = RunConfig::from_path(path)?.load()?;
    set_workers(l.config.numerics.workers)?;
    for w in &l.warnings {
        eprintln!("warning: {w}");
    }
    Ok(l)
}

/// Sizes the worker pool from the config, then `QDETECT_WORKERS`.
fn set_workers(configured: Option<usize>) -> Result<(), Failure> {
    let n = match configured {
        Some(n) => Some(n),
        None => match std::env::var("QDETECT_WORKERS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|n| *n > 0)
                    .ok_or_else(|| {
                        Failure::Config(format!(
                            "QDETECT_WORKERS: expected a positive integer, got {s:?}"
                        ))
                    })?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // Only the first call in a process can size the pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn sink(l: &Loaded, out: Option<&Path>) -> Result<Sink, Failure> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| l.config.output.directory.clone())
        .ok_or_else(|| Failure::Config("output: pass --out or set output.directory".into()))?;
    Ok(Sink::new(
        &dir,
        &l.hash,
        l.config.numerics.master_seed,
        &l.config.output.formats,
        l.config.output.gnuplot,
    )?)
}

fn default_costs() -> Vec<f64> {
    let small = (1..=10).map(|i| 0.02 * i as f64);
    let large = (3..=10).map(|i| 0.1 * i as f64);
    small.chain(large).collect()
}

fn numerical(sink: &mut Sink, l: &Loaded, e: Error) -> Failure {
    let _ = sink.summary(json!({
        "status": "numerical_diagnostic",
        "diagnostic": e.to_string(),
        "warnings": l.warnings,
    }));
    Failure::Numerical(e.to_string())
}

fn cmd_solve(l: &Loaded, sink: &mut Sink) -> Result<(), Failure> {
    let start = Instant::now();
    let opts = l.config.options()?;
    let sol = match value_iterate(&l.model, &opts) {
        Ok(s) => s,
        Err(e) if is_config_error(&e) => return Err(Failure::Config(e.to_string())),
        Err(e) => return Err(numerical(sink, l, e)),
    };
    let v = &sol.value;
    let rows: Vec<Vec<String>> = (0..v.values.len())
        .map(|i| {
            vec![
                i.to_string(),
                num(v.node(i)),
                num(v.get(i)),
                num(v.stderr_at(i)),
            ]
        })
        .collect();
    sink.table("value", &["node", "phi", "v", "error"], &rows)?;

    let rows: Vec<Vec<String>> = sol
        .trace
        .records
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                num(r.phi),
                num(r.sup_diff),
                num(r.bound),
                num(r.phi_lo),
                num(r.phi_hi),
            ]
        })
        .collect();
    sink.table(
        "thresholds",
        &["n", "phi", "sup_diff", "bound", "phi_lo", "phi_hi"],
        &rows,
    )?;

    let mut risk = Vec::new();
    for pi in default_pi_grid().into_iter().chain([1.0]) {
        let u = if pi >= 1.0 {
            0.0
        } else {
            sol.risk(pi).map_err(|e| numerical(sink, l, e))?
        };
        risk.push(vec![num(pi), num(u)]);
    }
    sink.table("risk", &["pi", "U"], &risk)?;

    let mut warnings = l.warnings.clone();
    warnings.extend(sol.warnings.iter().cloned());
    let u_prior = if l.prior_mass >= 1.0 {
        0.0
    } else {
        sol.risk(l.prior_mass).map_err(|e| numerical(sink, l, e))?
    };
    sink.summary(json!({
        "status": "ok",
        "phi_inf": sol.phi_inf,
        "phi_bracket": [sol.phi_bracket.0, sol.phi_bracket.1],
        "n_star": sol.n_star,
        "iterations": sol.iterations,
        "early_exit": sol.early_exit,
        "certificate": sol.certificate,
        "risk_at_prior": u_prior,
        "prior_mass": l.prior_mass,
        "immediate_alarm": l.prior_mass >= 1.0 || l.prior_mass / (1.0 - l.prior_mass) >= sol.phi_inf,
        "grid": { "h": sol.fs.grid.h, "n_points": sol.fs.grid.n_points, "z_max": sol.fs.grid.z_max },
        "wronskian_dispersion": sol.fs.dispersion,
        "model": sol.model,
        "master_seed": l.config.numerics.master_seed,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "warnings": warnings,
    }))?;
    Ok(())
}

fn cmd_simulate(l: &Loaded, sink: &mut Sink) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = l.config.scenario(&l.model)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &t in &l.config.simulation.thresholds {
        let r = match evaluate_policy(&l.model, t, &cfg) {
            Ok(r) => r,
            Err(e) if is_config_error(&e) => return Err(Failure::Config(e.to_string())),
            Err(e) => return Err(numerical(sink, l, e)),
        };
        rows.push(vec![
            num(t),
            num(r.mean),
            num(r.stderr),
            r.censored_count.to_string(),
        ]);
        results.push(json!({ "threshold": t, "risk": r, "censor_warning": r.censor_warning() }));
    }
    sink.table(
        "risk",
        &["threshold", "risk", "stderr", "censored_count"],
        &rows,
    )?;
    sink.summary(json!({
        "status": "ok",
        "prior_mass": l.prior_mass,
        "results": results,
        "master_seed": l.config.numerics.master_seed,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "warnings": l.warnings,
    }))?;
    Ok(())
}

fn cmd_asymptotics(l: &Loaded, costs: &[f64], sink: &mut Sink) -> Result<(), Failure> {
    let start = Instant::now();
    let opts = l.config.options()?;
    let mut rows = Vec::new();
    for &c in costs {
        let m = l
            .model
            .with_cost(c)
            .map_err(|e| Failure::Config(e.to_string()))?;
        let bt = bt_expansion(c, &m).map_err(|e| Failure::Config(e.to_string()))?;
        let sol = value_iterate(&m, &opts).map_err(|e| numerical(sink, l, e))?;
        let mut row = vec![num(c), num(bt.phi_c), num(bt.f_c), num(sol.phi_inf)];
        for pi in [0.0, 0.5, 0.8] {
            row.push(num(sol.risk(pi).map_err(|e| numerical(sink, l, e))?));
        }
        rows.push(row);
    }
    sink.table(
        "asymptotics",
        &[
            "c", "bt_phi_c", "bt_f_c", "phi_inf", "U_0", "U_0.5", "U_0.8",
        ],
        &rows,
    )?;
    sink.summary(json!({
        "status": "ok",
        "costs": costs,
        "master_seed": l.config.numerics.master_seed,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "warnings": l.warnings,
    }))?;
    Ok(())
}
