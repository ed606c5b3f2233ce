//! Command-line front end: experiment sweeps, recursion predictions, the
//! noise threshold and the self-check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::model::tau_w_to_snr;
use crate::montecarlo::{compare_to_se, run_sweep, se_states, SweepResult};
use crate::selfcheck::{run_checks, Injection};
use crate::state_evolution::{phase_transition_threshold, ExpectationEngine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SELFCHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEGRADED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "iterfac", version, about = "Rank-one factorization sweeps and state-evolution predictions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo sweep; writes sweep.csv and trials.jsonl.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic predictions only; writes se.csv.
    SePredict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Noise level below which zero-mean estimation escapes the trivial fixed point.
    Threshold {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        tau_u: f64,
        #[arg(long)]
        tau_v: f64,
    },
    /// Fast consistency checks; exit status 1 if any fails.
    Selfcheck {
        #[arg(long, hide = true)]
        inject: Option<Injection>,
    },
}

/// Decimal rendering with 12 significant digits; empty for non-finite values.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return String::new();
    }
    if x == 0.0 {
        return "0.00000000000".to_string();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (11 - exponent).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding may carry into a new leading digit
    let digits = s.chars().filter(|c| c.is_ascii_digit()).skip_while(|&c| c == '0').count();
    if digits > 12 && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

fn format_snr(snr_db: f64) -> String {
    if snr_db == f64::INFINITY {
        "inf".to_string()
    } else {
        format_number(snr_db)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn create_file(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<fs::File>)> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

pub const SWEEP_HEADER: &str =
    "snr_db,method,iter,median_rho_u,median_rho_v,se_rho_u,se_rho_v,trials_ok,trials_failed";

pub const SE_HEADER: &str =
    "snr_db,method,iter,rho_u,rho_v,alpha_u0,alpha_u1,alpha_v0,alpha_v1,lambda_u,lambda_v";

/// `sweep.csv` contents.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for c in &sweep.cells {
        for (k, &it) in c.iters.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                format_snr(c.snr_db),
                c.method,
                it,
                format_number(c.median_rho_u[k]),
                format_number(c.median_rho_v[k]),
                format_number(c.se_rho_u[k]),
                format_number(c.se_rho_v[k]),
                c.trials_ok,
                c.trials_failed,
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct TrialLine<'a> {
    snr_db: f64,
    method: &'a str,
    trial: usize,
    seed: u64,
    rho_u: &'a [f64],
    rho_v: &'a [f64],
    status: &'a str,
}

fn write_trials(sweep: &SweepResult, dir: &Path) -> Result<()> {
    let (path, mut w) = create_file(dir, "trials.jsonl")?;
    for c in &sweep.cells {
        for t in &c.trials {
            let line = TrialLine {
                snr_db: c.snr_db,
                method: &c.method,
                trial: t.trial,
                seed: t.seed,
                rho_u: &t.rho_u,
                rho_v: &t.rho_v,
                status: &t.status,
            };
            let json = serde_json::to_string(&line).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w, "{json}").map_err(|e| io_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_error(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let (path, mut w) = create_file(dir, name)?;
    w.write_all(text.as_bytes()).map_err(|e| io_error(&path, e))?;
    w.flush().map_err(|e| io_error(&path, e))
}

/// `se.csv` contents for every family and grid point of `cfg`.
pub fn se_csv(cfg: &ConfigFile) -> Result<String> {
    let exp = cfg.experiment();
    let engine = ExpectationEngine::default();
    let mut out = String::from(SE_HEADER);
    out.push('\n');
    for &snr in &exp.snr_grid_db {
        let tau_w = exp.tau_w(snr);
        for family in &exp.families {
            for s in se_states(family, &exp, tau_w, &engine)? {
                let cells = [s.rho_u, s.rho_v, s.alpha_u0, s.alpha_u1, s.alpha_v0, s.alpha_v1, s.lambda_u, s.lambda_v];
                let cells: Vec<String> = cells.iter().map(|&x| format_number(x)).collect();
                out.push_str(&format!("{},{},{},{}\n", format_snr(snr), family.label(), s.t, cells.join(",")));
            }
        }
    }
    Ok(out)
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

fn cmd_run(config: &Path, out: &Path, quiet: bool) -> i32 {
    let cfg = match ConfigFile::load(config) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    if cfg.sweep.snr_db.iter().any(|s| !s.is_finite()) {
        return report(&Error::Config("snr_db must be finite for Monte Carlo runs".into()));
    }
    let sweep = match run_sweep(&cfg.experiment()) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    if let Err(e) = write_text(out, "sweep.csv", &sweep_csv(&sweep)) {
        return report(&e);
    }
    if cfg.output.write_trials {
        if let Err(e) = write_trials(&sweep, out) {
            return report(&e);
        }
    }
    let cmp = compare_to_se(&sweep, cfg.output.tolerance);
    if !quiet {
        println!("{:>10}  {:<7} {:>12} {:>12} {:>10}", "snr_db", "method", "median_rho_v", "se_rho_v", "failed");
        for c in &sweep.cells {
            println!(
                "{:>10.3}  {:<7} {:>12.6} {:>12.6} {:>10}",
                c.snr_db,
                c.method,
                c.final_median_rho_v(),
                c.final_se_rho_v(),
                c.trials_failed
            );
        }
        println!(
            "max |median - se| = {:.4} (tolerance {}): {}",
            cmp.max_deviation,
            cmp.tolerance,
            if cmp.pass { "within tolerance" } else { "outside tolerance" }
        );
    }
    for c in &sweep.cells {
        if let Some(msg) = &c.se_error {
            eprintln!("no prediction: snr_db {} method {}: {msg}", c.snr_db, c.method);
        }
    }
    for c in sweep.cells.iter().filter(|c| c.degraded) {
        eprintln!(
            "degraded: snr_db {} method {}: {} of {} trials failed",
            c.snr_db,
            c.method,
            c.trials_failed,
            c.trials_ok + c.trials_failed
        );
    }
    if sweep.degraded() {
        EXIT_DEGRADED
    } else {
        EXIT_OK
    }
}

fn cmd_se_predict(config: &Path, out: &Path, quiet: bool) -> i32 {
    let cfg = match ConfigFile::load(config) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let text = match se_csv(&cfg) {
        Ok(t) => t,
        Err(e) => return report(&e),
    };
    if let Err(e) = write_text(out, "se.csv", &text) {
        return report(&e);
    }
    if !quiet {
        println!("wrote {}", out.join("se.csv").display());
    }
    EXIT_OK
}

fn cmd_threshold(beta: f64, tau_u: f64, tau_v: f64) -> i32 {
    for (name, x) in [("beta", beta), ("tau-u", tau_u), ("tau-v", tau_v)] {
        if !(x > 0.0 && x.is_finite()) {
            return report(&Error::InvalidArgument(format!("--{name} must be positive (got {x})")));
        }
    }
    let tau_w = phase_transition_threshold(beta, tau_u, tau_v);
    println!("tau_w_star {}", format_number(tau_w));
    println!("snr_star_db {}", format_number(tau_w_to_snr(tau_w, tau_u, tau_v)));
    EXIT_OK
}

fn cmd_selfcheck(inject: Option<Injection>, quiet: bool) -> i32 {
    let rows = run_checks(inject);
    let mut ok = true;
    for r in &rows {
        ok &= r.passed;
        if !quiet || !r.passed {
            println!("{}  {:<30} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_SELFCHECK_FAILED
    }
}

/// Executes a parsed command line and returns the process exit status.
pub fn execute(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::InvalidArgument(format!("thread pool: {e}"))),
    };
    let quiet = cli.quiet;
    pool.install(|| match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out, quiet),
        Command::SePredict { config, out } => cmd_se_predict(&config, &out, quiet),
        Command::Threshold { beta, tau_u, tau_v } => cmd_threshold(beta, tau_u, tau_v),
        Command::Selfcheck { inject } => cmd_selfcheck(inject, quiet),
    })
}
