//! Subcommands. Each writes its files into the configured output directory
//! and returns the process exit code.

use crate::config::{ConfigError, Experiment};
use crate::output::{self, ErrorRecord, OutputError, PathKind};
use fbsde_core::comparison::{run_comparison, ComparisonError};
use fbsde_core::diagnostics::{estimate_norms, phi_bound_check, Conditioning, NormReport, PhiCheck, ResidualReport};
use fbsde_core::picard::{run, PicardError, ResidualBudget, Solution};
use fbsde_core::probes::check_assumptions;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;

/// Contents of `norms.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveNorms {
    /// Norms of `Y`, with `BMO₂` of `∫Z dW`.
    pub y: NormReport,
    pub x: NormReport,
    pub z: NormReport,
    /// `½·BMO₂² ≤ φ(K) + C·T·φ'(K)·(1+K)` with `K = ‖U‖_S∞`.
    pub phi: PhiCheck,
}

/// Contents of `residuals.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResiduals {
    pub residuals: ResidualReport,
    pub budget: ResidualBudget,
}

fn fail(dir: &Path, command: &str, kind: &str, code: i32, err: &dyn std::error::Error) -> i32 {
    let record = ErrorRecord::new(command, kind, code, err);
    eprintln!("fbsde {command}: {err}");
    for c in &record.causes {
        eprintln!("  caused by: {c}");
    }
    if let Err(e) = std::fs::create_dir_all(dir)
        .map_err(|source| OutputError::Io {
            path: dir.to_path_buf(),
            source,
        })
        .and_then(|_| output::write_json(&dir.join(output::ERROR), &record))
    {
        eprintln!("fbsde {command}: could not write error record: {e}");
    }
    code
}

/// Reports a config that failed to load. Nothing is known about the output
/// directory unless one was given on the command line.
pub fn config_failure(command: &str, err: &ConfigError, dir: Option<&Path>) -> i32 {
    match dir {
        Some(d) => fail(d, command, "config", EXIT_CONFIG, err),
        None => {
            let record = ErrorRecord::new(command, "config", EXIT_CONFIG, err);
            eprintln!("fbsde {command}: {err}");
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_default());
            EXIT_CONFIG
        }
    }
}

fn picard_kind(e: &PicardError) -> (&'static str, i32) {
    match e {
        PicardError::Config(_) | PicardError::Validation(_) => ("config", EXIT_CONFIG),
        _ => ("numerical", EXIT_NUMERICAL),
    }
}

fn write_solution(exp: &Experiment, sol: &Solution) -> Result<(), Box<dyn std::error::Error>> {
    let dir = &exp.config.output_dir;
    let st = &sol.state;
    let p = &exp.problem;
    output::write_json(&dir.join(output::REPORT), &sol.report)?;
    output::write_history(&dir.join(output::HISTORY), &sol.report)?;
    output::write_nodes(&dir.join(output::NODES), st)?;
    output::write_json(
        &dir.join(output::RESIDUALS),
        &SolveResiduals {
            residuals: sol.report.residuals.clone(),
            budget: sol.report.residual_budget.clone(),
        },
    )?;
    let cond = Conditioning {
        path: &st.x,
        basis: &st.basis,
    };
    let p_list = &exp.config.numerics.p_list;
    let norms = SolveNorms {
        y: estimate_norms(&st.y, Some(&st.z), &st.grid, p_list, Some(cond))?,
        x: estimate_norms(&st.x, None, &st.grid, p_list, None)?,
        z: estimate_norms(&st.z, None, &st.grid, p_list, None)?,
        phi: phi_bound_check(st.u.max_abs(), &st.z, p, &st.grid, Some(cond))?,
    };
    output::write_json(&dir.join(output::NORMS), &norms)?;
    if exp.config.dump_paths {
        output::write_paths(&dir.join("x.bin"), &st.x, PathKind::State, p.n, p.d)?;
        output::write_paths(&dir.join("y.bin"), &st.y, PathKind::State, p.n, p.d)?;
        output::write_paths(&dir.join("z.bin"), &st.z, PathKind::Z, p.n, p.d)?;
    }
    Ok(())
}

fn prepare(dir: &Path, command: &str) -> Result<(), i32> {
    std::fs::create_dir_all(dir).map_err(|source| {
        let e = OutputError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fail(dir, command, "io", EXIT_NUMERICAL, &e)
    })
}

/// Probes the assumptions, runs the iteration and writes the solution
/// files. Exit 0 on convergence within the residual budget.
pub fn cmd_solve(exp: &Experiment) -> i32 {
    let dir = exp.config.output_dir.as_path();
    if let Err(code) = prepare(dir, "solve") {
        return code;
    }
    let probes = match check_assumptions(&exp.problem, &exp.config.probes.config()) {
        Ok(r) => r,
        Err(e) => return fail(dir, "solve", "numerical", EXIT_NUMERICAL, &e),
    };
    if let Err(e) = output::write_json(&dir.join(output::ASSUMPTIONS), &probes) {
        return fail(dir, "solve", "io", EXIT_NUMERICAL, &e);
    }
    for f in probes.failures() {
        eprintln!("fbsde solve: warning: assumption check failed: {}", f.check);
    }
    let (sol, err) = match run(&exp.problem, &exp.iteration()) {
        Ok(sol) => (sol, None),
        Err(PicardError::NotConverged(sol)) => {
            let msg = format!("no convergence after {} iterations", sol.report.iterations);
            (*sol, Some(msg))
        }
        Err(PicardError::ResidualBudget(sol)) => {
            let msg = format!("residual budget exceeded: {}", sol.report.residual_budget.summary());
            (*sol, Some(msg))
        }
        Err(e) => {
            let (kind, code) = picard_kind(&e);
            return fail(dir, "solve", kind, code, &e);
        }
    };
    if let Err(e) = write_solution(exp, &sol) {
        return fail(dir, "solve", "io", EXIT_NUMERICAL, e.as_ref());
    }
    let r = &sol.report;
    match err {
        None => {
            println!(
                "converged at k={} after {} iterations; sup-differences x {:.3e}, y {:.3e}; eps_mono {:.3e}",
                r.converged_at.unwrap_or(r.iterations),
                r.iterations,
                r.final_supdiff_x,
                r.final_supdiff_y,
                r.eps_mono
            );
            EXIT_OK
        }
        Some(msg) => fail(dir, "solve", "numerical", EXIT_NUMERICAL, &Message(msg)),
    }
}

#[derive(Debug)]
struct Message(String);

impl std::fmt::Display for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Message {}

/// Verifies the ordering hypotheses, runs both problems on shared noise and
/// writes the comparison report and gap table. Exit 3 when the hypotheses
/// fail, 1 when the ordering is violated beyond the alarm fraction.
pub fn cmd_compare(exp: &Experiment) -> i32 {
    let dir = exp.config.output_dir.as_path();
    if let Err(code) = prepare(dir, "compare") {
        return code;
    }
    let Some(upper) = &exp.problem_b else {
        let e = Message("compare needs `problem_b`".into());
        return fail(dir, "compare", "config", EXIT_CONFIG, &e);
    };
    let result = run_comparison(&exp.problem, upper, &exp.iteration(), &exp.config.probes.config());
    let report = match result {
        Ok(r) => r,
        Err(ComparisonError::Hypothesis(rep)) => {
            if let Err(e) = output::write_json(&dir.join(output::ASSUMPTIONS), &rep) {
                eprintln!("fbsde compare: {e}");
            }
            let e = ComparisonError::Hypothesis(rep);
            return fail(dir, "compare", "hypothesis", EXIT_HYPOTHESIS, &e);
        }
        Err(e @ (ComparisonError::Dimension(_) | ComparisonError::SigmaMismatch)) => {
            return fail(dir, "compare", "config", EXIT_CONFIG, &e)
        }
        Err(ComparisonError::Run { which, source }) => {
            let (kind, code) = picard_kind(&source);
            let e = ComparisonError::Run { which, source };
            return fail(dir, "compare", kind, code, &e);
        }
        Err(e) => return fail(dir, "compare", "numerical", EXIT_NUMERICAL, &e),
    };
    let written = output::write_json(&dir.join(output::ASSUMPTIONS), &report.hypotheses)
        .and_then(|_| output::write_json(&dir.join(output::COMPARISON), &report))
        .and_then(|_| output::write_gaps(&dir.join(output::GAPS), &report));
    if let Err(e) = written {
        return fail(dir, "compare", "io", EXIT_NUMERICAL, &e);
    }
    println!(
        "violations: X {:.4}%, Y {:.4}% (alarm {:.2}%); node-0 mean gap Y {:?} (se {:?})",
        100.0 * report.x.violation.fraction,
        100.0 * report.y.violation.fraction,
        100.0 * report.alarm,
        report.y.mean_gap_node0,
        report.y.se_node0
    );
    if report.pass {
        EXIT_OK
    } else {
        let e = Message(format!(
            "ordering violated on more than {:.2}% of triples",
            100.0 * report.alarm
        ));
        fail(dir, "compare", "numerical", EXIT_NUMERICAL, &e)
    }
}

/// Probes every assumption and writes the report. Exit 0 iff all pass,
/// 3 otherwise.
pub fn cmd_check(exp: &Experiment) -> i32 {
    let dir = exp.config.output_dir.as_path();
    if let Err(code) = prepare(dir, "check") {
        return code;
    }
    let report = match check_assumptions(&exp.problem, &exp.config.probes.config()) {
        Ok(r) => r,
        Err(e) => return fail(dir, "check", "numerical", EXIT_NUMERICAL, &e),
    };
    if let Err(e) = output::write_json(&dir.join(output::ASSUMPTIONS), &report) {
        return fail(dir, "check", "io", EXIT_NUMERICAL, &e);
    }
    let failed: Vec<&str> = report.failures().map(|e| e.check.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks pass", report.entries.len());
        EXIT_OK
    } else {
        for f in report.failures() {
            println!("FAIL (A{}) {}: worst {:.3e} > {:.3e}", f.assumption, f.check, f.worst, f.threshold);
        }
        EXIT_HYPOTHESIS
    }
}

/// Reader for every file `cmd_solve` writes, for round-trip checks.
pub struct SolveOutputs {
    pub report: fbsde_core::picard::ConvergenceReport,
    pub history: Vec<output::HistoryRow>,
    pub nodes: Vec<output::NodeRow>,
    pub norms: SolveNorms,
    pub residuals: SolveResiduals,
    pub assumptions: fbsde_core::probes::AssumptionReport,
}

pub fn read_solve_outputs(dir: &Path) -> Result<SolveOutputs, OutputError> {
    Ok(SolveOutputs {
        report: output::read_json(&dir.join(output::REPORT))?,
        history: output::read_history(&dir.join(output::HISTORY))?,
        nodes: output::read_nodes(&dir.join(output::NODES))?,
        norms: output::read_json(&dir.join(output::NORMS))?,
        residuals: output::read_json(&dir.join(output::RESIDUALS))?,
        assumptions: output::read_json(&dir.join(output::ASSUMPTIONS))?,
    })
}

pub fn read_dump(dir: &Path, name: &str) -> Result<fbsde_core::simulation::PathArray, OutputError> {
    let kind = if name.starts_with('z') { PathKind::Z } else { PathKind::State };
    output::read_paths(&dir.join(name), kind).map(|(_, a)| a)
}
