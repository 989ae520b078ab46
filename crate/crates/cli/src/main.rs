//! `mrac-sim`: run and check distributed adaptive-control scenarios.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrac_core::harness::{metrics, run_scenario, Scenario};
use mrac_core::numerics::{kron, lyapunov_residual, solve_lyapunov, Mat};
use mrac_core::scenario::{load, load_unchecked, BUILTINS};
use mrac_core::trace_io::{summary_text, write_trace_csv};
use mrac_core::Error;

const LYAPUNOV_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "mrac-sim", version, about = "Simulate delayed multi-agent model reference adaptive control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write trace.csv and summary.txt.
    Run {
        /// Built-in scenario name or path to a scenario file.
        scenario: String,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override a scenario value, e.g. `--set simulation.duration=50`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check a scenario's structural assumptions without simulating.
    Validate {
        scenario: String,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the names of the built-in scenarios.
    ListBuiltins,
}

/// Exit 1 for bad input, 2 for everything that goes wrong while running.
fn exit_code(e: &Error) -> ExitCode {
    match e.root() {
        Error::Validation(_) | Error::Parse { .. } => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            overrides,
        } => run(&scenario, &out, &overrides),
        Command::Validate { scenario, overrides } => validate(&scenario, &overrides),
        Command::ListBuiltins => {
            for name in BUILTINS {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mrac-sim: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn run(source: &str, out: &std::path::Path, overrides: &[String]) -> Result<ExitCode, Error> {
    let scenario = load(source, overrides)?;
    let trace = run_scenario(&scenario)?;
    let m = metrics(&trace)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let trace_path = out.join("trace.csv");
    let file = File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    write_trace_csv(&trace, BufWriter::new(file))?;

    let summary_path = out.join("summary.txt");
    let summary = summary_text(&scenario, &trace, &m);
    fs::write(&summary_path, &summary).map_err(|e| io_err(&summary_path, e))?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

fn checks(s: &Scenario) -> Vec<Check> {
    let mut out = Vec::new();
    let n = s.leader.state_dim();
    let theta = s.topology.threshold();
    let threshold_name = format!("threshold(ϑ={theta})");
    match s.topology.matrices(n) {
        Ok(m) => {
            out.push(check("balanced", m.check_balanced(), ""));
            let r = m.check_threshold(theta);
            let show = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.6}"));
            let detail = format!(
                "min eigenvalue {}, min leader weight {}",
                show(r.min_laplacian_eigenvalue),
                show(r.min_leader_weight)
            );
            out.push(check(threshold_name, r.pass, detail));
        }
        Err(e) => {
            out.push(check("balanced", false, e.to_string()));
            out.push(check(threshold_name, false, "needs a balanced topology"));
        }
    }
    out.push(check("reachable", s.topology.leader_reachable(), ""));

    let agents = s.fleet.len();
    let q = &s.controller.q_tilde;
    let q_global = if q.rows() == n && q.cols() == n {
        kron(&Mat::identity(agents), q)
    } else {
        q.clone()
    };
    let a_global = kron(&Mat::identity(agents), &s.leader.a_m);
    let lyap = solve_lyapunov(&a_global, &q_global).and_then(|p| lyapunov_residual(&a_global, &p, &q_global));
    out.push(match lyap {
        Ok(res) => check("lyapunov_residual", res <= LYAPUNOV_TOLERANCE, format!("{res:e}")),
        Err(e) => check("lyapunov_residual", false, e.to_string()),
    });
    out.push(match s.fleet.matching_gains(&s.leader) {
        Ok(_) => check("matching", true, ""),
        Err(e) => check("matching", false, e.to_string()),
    });
    out.push(match s.prepare() {
        Ok(_) => check("scenario", true, ""),
        Err(e) => check("scenario", false, e.to_string()),
    });
    out
}

fn validate(source: &str, overrides: &[String]) -> Result<ExitCode, Error> {
    let scenario = load_unchecked(source, overrides)?;
    let results = checks(&scenario);
    for c in &results {
        let verdict = if c.pass { "pass" } else { "fail" };
        if c.detail.is_empty() {
            println!("{}={verdict}", c.name);
        } else {
            println!("{}={verdict} ({})", c.name, c.detail);
        }
    }
    Ok(if results.iter().all(|c| c.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
