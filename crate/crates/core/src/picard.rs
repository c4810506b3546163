//! Monotone Picard iteration.
//!
//! Initialisation solves the bounding pair `(U, S)` and the seed `Y⁽⁰⁾`,
//! then runs the forward equation from `Y⁽⁰⁾`. Each outer step solves the
//! backward equation with the generator and terminal evaluated on the
//! previous forward iterate, then the forward equation driven by the new
//! `Y`. All solves share one Brownian bundle, so orderings are pathwise.

use crate::backward::{
    solve_bounding_u, solve_bsde, solve_seed_y0, BackwardError, BackwardOpts,
};
use crate::diagnostics::{residual_check, DiagnosticsError, ResidualReport};
use crate::expr::EvalEnv;
use crate::model::{validate_problem, FbsdeProblem, ValidationError};
use crate::regression::RegressionBasis;
use crate::simulation::{
    euler_forward, make_grid, sample_brownian, simulate_bounding_s, BrownianBundle, PathArray,
    SimulationError, TimeGrid,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Stop when both successive sup-differences are at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Total degree of the polynomial regression basis.
    pub degree: usize,
    pub backward: BackwardOpts,
    /// Clip `Y` into `[Y⁽⁰⁾, U]` and `X` into `(−∞, S]` after each solve.
    pub projection: bool,
    /// Largest tolerated fraction of envelope violations at initialisation.
    pub alarm: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 50,
            seed: DEFAULT_SEED,
            tol: 1e-3,
            max_iter: 20,
            degree: 3,
            backward: BackwardOpts::default(),
            projection: true,
            alarm: 0.01,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<(), PicardError> {
        let bad = |what: &str| Err(PicardError::Config(what.to_string()));
        if self.paths == 0 {
            return bad("paths must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(0.0..=1.0).contains(&self.alarm) {
            return bad("alarm must lie in [0, 1]");
        }
        self.backward
            .validate()
            .map_err(|e| PicardError::Config(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PicardError {
    #[error("invalid iteration config: {0}")]
    Config(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{stage}: {source}")]
    Backward {
        stage: &'static str,
        #[source]
        source: BackwardError,
    },
    #[error("{stage}: {source}")]
    Simulation {
        stage: &'static str,
        #[source]
        source: SimulationError,
    },
    #[error("terminal function is non-finite on path {path}")]
    Terminal { path: usize },
    #[error("seed Y0 exceeds U on a fraction {fraction} of nodes (alarm at {alarm})")]
    EnvelopeAlarm { fraction: f64, alarm: f64 },
    #[error("residual check failed: {0}")]
    Diagnostics(#[from] DiagnosticsError),
    #[error("no convergence after {} iterations (sup-differences x {:e}, y {:e})",
        .0.report.iterations, .0.report.final_supdiff_x, .0.report.final_supdiff_y)]
    NotConverged(Box<Solution>),
    #[error("returned solution exceeds the residual budget: {}", .0.report.residual_budget.summary())]
    ResidualBudget(Box<Solution>),
}

/// Share of `(path, node, component)` triples breaking one inequality by
/// more than `ε_mono`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Violation {
    pub count: usize,
    pub fraction: f64,
    /// Largest excess over the inequality, `ε_mono` not subtracted.
    pub worst: f64,
    pub worst_at: Option<[usize; 3]>,
}

impl Violation {
    /// Counts triples where `lo > hi + eps`.
    pub fn measure(lo: &PathArray, hi: &PathArray, eps: f64) -> Self {
        assert_eq!(lo.shape(), hi.shape());
        let (paths, _, width) = lo.shape();
        let mut v = Violation::default();
        let total = lo.as_slice().len();
        for (idx, (a, b)) in lo.as_slice().iter().zip(hi.as_slice()).enumerate() {
            let excess = a - b;
            if excess > eps {
                v.count += 1;
            }
            if excess > v.worst {
                v.worst = excess;
                let node_len = paths * width;
                let j = idx / node_len;
                let m = (idx % node_len) / width;
                v.worst_at = Some([m, j, idx % width]);
            }
        }
        v.fraction = v.count as f64 / total.max(1) as f64;
        v
    }
}

/// The four inequalities of the monotone envelope at one outer step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvelopeStats {
    /// `Y⁽ᵏ⁻¹⁾ ≤ Y⁽ᵏ⁾`.
    pub y_monotone: Violation,
    /// `X⁽ᵏ⁻¹⁾ ≤ X⁽ᵏ⁾`.
    pub x_monotone: Violation,
    /// `Y⁽ᵏ⁾ ≤ U`.
    pub y_upper: Violation,
    /// `X⁽ᵏ⁾ ≤ S`.
    pub x_upper: Violation,
}

impl EnvelopeStats {
    pub fn max_fraction(&self) -> f64 {
        [&self.y_monotone, &self.x_monotone, &self.y_upper, &self.x_upper]
            .iter()
            .map(|v| v.fraction)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipCounts {
    pub y_lower: usize,
    pub y_upper: usize,
    pub x_upper: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub supdiff_x: f64,
    pub supdiff_y: f64,
    pub eps_mono: f64,
    pub envelope: EnvelopeStats,
    pub clips: ClipCounts,
    pub max_inner_iterations: usize,
    pub truncations: usize,
    /// Wall time of the step; kept out of serialised reports so they stay
    /// reproducible.
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    /// `ε_mono` of the two bounding solves.
    pub bound_eps_mono: f64,
    /// Share of triples with `Y⁽⁰⁾ > U + ε_mono`.
    pub seed_violation: Violation,
    pub u0_mean: Vec<f64>,
    pub y0_seed_mean: Vec<f64>,
    /// `‖U‖_S∞`, the measured envelope.
    pub u_sup: f64,
    /// `‖Y⁽⁰⁾‖_S∞`.
    pub seed_sup: f64,
}

/// Everything the outer loop carries between steps.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub k: usize,
    pub grid: TimeGrid,
    pub bundle: Arc<BrownianBundle>,
    pub basis: RegressionBasis,
    pub x: PathArray,
    pub y: PathArray,
    pub z: PathArray,
    pub u: PathArray,
    pub s: PathArray,
    pub y0: PathArray,
    /// `(X⁽ᵏ⁻¹⁾, Y⁽ᵏ⁻¹⁾)` once `k ≥ 1`.
    pub previous: Option<(PathArray, PathArray)>,
    /// Current ordering slack: the larger of the bounding solves' and the
    /// latest backward solve's.
    pub eps_mono: f64,
    pub init: InitRecord,
    pub history: Vec<IterationRecord>,
}

fn node_mean(p: &PathArray, j: usize) -> Vec<f64> {
    let w = p.width();
    let mut out = vec![0.0; w];
    for row in p.node(j).chunks_exact(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= p.paths() as f64);
    out
}

pub fn sample_bundle(p: &FbsdeProblem, cfg: &IterationConfig) -> Result<(TimeGrid, BrownianBundle), PicardError> {
    let sim = |source| PicardError::Simulation {
        stage: "brownian increments",
        source,
    };
    let grid = make_grid(p.horizon, cfg.steps).map_err(sim)?;
    let bundle = sample_brownian(cfg.paths, &grid, p.d, cfg.seed).map_err(sim)?;
    Ok((grid, bundle))
}

pub fn initialize(p: &FbsdeProblem, cfg: &IterationConfig) -> Result<IterationState, PicardError> {
    validate_problem(p)?;
    cfg.validate()?;
    let (grid, bundle) = sample_bundle(p, cfg)?;
    initialize_with_bundle(p, cfg, grid, Arc::new(bundle))
}

/// As [`initialize`], reusing a bundle (for runs that must share noise).
pub fn initialize_with_bundle(
    p: &FbsdeProblem,
    cfg: &IterationConfig,
    grid: TimeGrid,
    bundle: Arc<BrownianBundle>,
) -> Result<IterationState, PicardError> {
    validate_problem(p)?;
    cfg.validate()?;
    if bundle.steps() != cfg.steps || bundle.paths() != cfg.paths || bundle.dim() != p.d {
        return Err(PicardError::Config(
            "bundle does not match the configured paths, steps and dimension".into(),
        ));
    }
    let w_basis = RegressionBasis::polynomial(p.d, cfg.degree);
    let backward = |stage| move |source| PicardError::Backward { stage, source };
    let forward = |stage| move |source| PicardError::Simulation { stage, source };

    let u = solve_bounding_u(p, &grid, &bundle, &w_basis, &cfg.backward)
        .map_err(backward("bounding BSDE U"))?;
    let s = simulate_bounding_s(p, &u.y, &bundle, &grid).map_err(forward("bounding SDE S"))?;
    let seed = solve_seed_y0(p, &grid, &bundle, &w_basis, &cfg.backward)
        .map_err(backward("seed BSDE Y0"))?;
    let x = euler_forward(p, &seed.y, &bundle, &grid).map_err(forward("forward X0"))?;

    let bound_eps = u.eps_mono.max(seed.eps_mono);
    let seed_violation = Violation::measure(&seed.y, &u.y, bound_eps);
    if seed_violation.fraction > cfg.alarm {
        return Err(PicardError::EnvelopeAlarm {
            fraction: seed_violation.fraction,
            alarm: cfg.alarm,
        });
    }
    let init = InitRecord {
        bound_eps_mono: bound_eps,
        seed_violation,
        u0_mean: node_mean(&u.y, 0),
        y0_seed_mean: node_mean(&seed.y, 0),
        u_sup: u.y.max_abs(),
        seed_sup: seed.y.max_abs(),
    };
    Ok(IterationState {
        k: 0,
        grid,
        bundle,
        basis: RegressionBasis::polynomial(p.n, cfg.degree),
        x,
        y0: seed.y.clone(),
        y: seed.y,
        z: seed.z,
        u: u.y,
        s,
        previous: None,
        eps_mono: bound_eps,
        init,
        history: Vec::new(),
    })
}

fn clip_between(y: &mut PathArray, lo: &PathArray, hi: &PathArray, clips: &mut ClipCounts) {
    for ((v, l), h) in y.as_mut_slice().iter_mut().zip(lo.as_slice()).zip(hi.as_slice()) {
        if *v < *l {
            *v = *l;
            clips.y_lower += 1;
        }
        if *v > *h {
            *v = *h;
            clips.y_upper += 1;
        }
    }
}

fn clip_above(x: &mut PathArray, hi: &PathArray, clips: &mut ClipCounts) {
    for (v, h) in x.as_mut_slice().iter_mut().zip(hi.as_slice()) {
        if *v > *h {
            *v = *h;
            clips.x_upper += 1;
        }
    }
}

fn terminal_values(p: &FbsdeProblem, x: &PathArray) -> Result<Vec<f64>, PicardError> {
    let last = x.nodes() - 1;
    let zero_y = vec![0.0; p.n];
    let zero_z = vec![0.0; p.d];
    let mut out = Vec::with_capacity(x.paths() * p.n);
    for m in 0..x.paths() {
        let h = p
            .terminal
            .eval_vec(&EvalEnv::new(p.horizon, x.get(m, last), &zero_y, &zero_z));
        if h.iter().any(|v| !v.is_finite()) {
            return Err(PicardError::Terminal { path: m });
        }
        out.extend(h);
    }
    Ok(out)
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<()> {
    None
}

#[cfg(not(target_arch = "wasm32"))]
fn elapsed(start: Option<std::time::Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64())
}

#[cfg(target_arch = "wasm32")]
fn elapsed(_: Option<()>) -> f64 {
    0.0
}

/// One outer step: `Y⁽ᵏ⁾` from `X⁽ᵏ⁻¹⁾`, then `X⁽ᵏ⁾` from `Y⁽ᵏ⁾`.
pub fn iterate_once(
    state: &mut IterationState,
    p: &FbsdeProblem,
    cfg: &IterationConfig,
) -> Result<(), PicardError> {
    let start = clock();
    let k = state.k + 1;
    let terminal = terminal_values(p, &state.x)?;
    let sol = solve_bsde(
        &p.generator,
        &terminal,
        &state.x,
        &state.bundle,
        &state.grid,
        &state.basis,
        &cfg.backward,
    )
    .map_err(|source| PicardError::Backward {
        stage: "iterate BSDE",
        source,
    })?;
    let mut clips = ClipCounts::default();
    let mut y = sol.y;
    if cfg.projection {
        clip_between(&mut y, &state.y0, &state.u, &mut clips);
    }
    let mut x = euler_forward(p, &y, &state.bundle, &state.grid).map_err(|source| {
        PicardError::Simulation {
            stage: "iterate SDE",
            source,
        }
    })?;
    if cfg.projection {
        clip_above(&mut x, &state.s, &mut clips);
    }
    let supdiff_x = x.max_abs_diff(&state.x);
    let supdiff_y = y.max_abs_diff(&state.y);
    state.eps_mono = state.init.bound_eps_mono.max(sol.eps_mono);
    let prev_x = std::mem::replace(&mut state.x, x);
    let prev_y = std::mem::replace(&mut state.y, y);
    state.z = sol.z;
    state.previous = Some((prev_x, prev_y));
    state.k = k;
    let envelope = check_monotone_envelope(state).unwrap_or_default();
    state.history.push(IterationRecord {
        k,
        supdiff_x,
        supdiff_y,
        eps_mono: state.eps_mono,
        envelope,
        clips,
        max_inner_iterations: sol.steps.iter().map(|s| s.inner_iterations).max().unwrap_or(0),
        truncations: sol.steps.iter().map(|s| s.truncations).sum(),
        runtime_secs: elapsed(start),
    });
    Ok(())
}

/// Violation statistics of the four envelope inequalities for the current
/// iterate; `None` before the first outer step.
pub fn check_monotone_envelope(state: &IterationState) -> Option<EnvelopeStats> {
    let (prev_x, prev_y) = state.previous.as_ref()?;
    let eps = state.eps_mono;
    Some(EnvelopeStats {
        y_monotone: Violation::measure(prev_y, &state.y, eps),
        x_monotone: Violation::measure(prev_x, &state.x, eps),
        y_upper: Violation::measure(&state.y, &state.u, eps),
        x_upper: Violation::measure(&state.x, &state.s, eps),
    })
}

/// Tolerances the returned triple's discrete defects must meet.
///
/// - forward: the scheme is re-run against its own output, so only rounding
///   remains, unless projection clipped `X`;
/// - terminal: `Y_N = h(X⁽ᵏ⁻¹⁾_N)` differs from `h(X⁽ᵏ⁾_N)` by at most
///   `C·√n·‖ΔX‖`, plus `ε_mono` of slack for clipping;
/// - backward RMS: the part of `Y_{j+1} − Ê_j` that `Z·ΔW` does not span is
///   of order `√Δ`, scaled by the size of the solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBudget {
    pub forward_limit: Option<f64>,
    pub terminal_limit: f64,
    pub backward_rms_limit: f64,
    pub forward_ok: bool,
    pub terminal_ok: bool,
    pub backward_ok: bool,
}

impl ResidualBudget {
    pub fn pass(&self) -> bool {
        self.forward_ok && self.terminal_ok && self.backward_ok
    }

    pub fn summary(&self) -> String {
        format!(
            "forward {}, terminal {}, backward {}",
            ok_word(self.forward_ok),
            ok_word(self.terminal_ok),
            ok_word(self.backward_ok)
        )
    }
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "exceeded"
    }
}

fn residual_budget(
    p: &FbsdeProblem,
    state: &IterationState,
    last: Option<&IterationRecord>,
    r: &ResidualReport,
) -> ResidualBudget {
    let supdiff_x = last.map_or(0.0, |l| l.supdiff_x);
    let x_clipped = last.is_some_and(|l| l.clips.x_upper > 0);
    let forward_limit = (!x_clipped).then(|| 1e-9 * (1.0 + state.x.max_abs()));
    let terminal_limit = p.growth * (p.n as f64).sqrt() * supdiff_x + state.eps_mono + 1e-12;
    let backward_rms_limit =
        state.grid.dt().sqrt() * (1.0 + state.y.max_abs() + state.z.max_abs());
    ResidualBudget {
        forward_ok: forward_limit.is_none_or(|l| r.forward.max <= l),
        terminal_ok: r.terminal.max <= terminal_limit,
        backward_ok: r.backward.rms <= backward_rms_limit,
        forward_limit,
        terminal_limit,
        backward_rms_limit,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Index of the iterate reproduced by its successor within `tol`.
    pub converged_at: Option<usize>,
    /// Number of outer steps taken.
    pub iterations: usize,
    pub final_supdiff_x: f64,
    pub final_supdiff_y: f64,
    pub tol: f64,
    pub eps_mono: f64,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub degree: usize,
    pub projection: bool,
    /// Median of `D_k / D_{k−1}` with `D_k = max(supdiff_x, supdiff_y)`,
    /// over steps where `D_{k−1} > 0`.
    pub median_ratio: Option<f64>,
    pub init: InitRecord,
    pub history: Vec<IterationRecord>,
    pub residuals: ResidualReport,
    pub residual_budget: ResidualBudget,
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Final iterate with its bounding processes and report.
#[derive(Debug, Clone)]
pub struct Solution {
    pub state: IterationState,
    pub report: ConvergenceReport,
}

fn median_ratio(history: &[IterationRecord]) -> Option<f64> {
    let d: Vec<f64> = history.iter().map(|r| r.supdiff_x.max(r.supdiff_y)).collect();
    let mut ratios: Vec<f64> = d
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let mid = ratios.len() / 2;
    Some(if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        0.5 * (ratios[mid - 1] + ratios[mid])
    })
}

pub fn run(p: &FbsdeProblem, cfg: &IterationConfig) -> Result<Solution, PicardError> {
    validate_problem(p)?;
    cfg.validate()?;
    let (grid, bundle) = sample_bundle(p, cfg)?;
    run_with_bundle(p, cfg, grid, Arc::new(bundle))
}

/// Initialise, iterate until both sup-differences are within `tol`, then
/// check the returned triple against the residual budget.
pub fn run_with_bundle(
    p: &FbsdeProblem,
    cfg: &IterationConfig,
    grid: TimeGrid,
    bundle: Arc<BrownianBundle>,
) -> Result<Solution, PicardError> {
    let start = clock();
    let mut state = initialize_with_bundle(p, cfg, grid, bundle)?;
    let mut converged_at = None;
    for _ in 0..cfg.max_iter {
        iterate_once(&mut state, p, cfg)?;
        let last = state.history.last().expect("just pushed");
        if last.supdiff_x <= cfg.tol && last.supdiff_y <= cfg.tol {
            converged_at = Some(state.k - 1);
            break;
        }
    }
    let residuals = residual_check(p, &state.x, &state.y, &state.z, &state.bundle, &state.grid)?;
    let last = state.history.last();
    let budget = residual_budget(p, &state, last, &residuals);
    let report = ConvergenceReport {
        converged: converged_at.is_some(),
        converged_at,
        iterations: state.k,
        final_supdiff_x: last.map_or(0.0, |l| l.supdiff_x),
        final_supdiff_y: last.map_or(0.0, |l| l.supdiff_y),
        tol: cfg.tol,
        eps_mono: state.eps_mono,
        seed: state.bundle.seed,
        paths: cfg.paths,
        steps: cfg.steps,
        horizon: p.horizon,
        degree: cfg.degree,
        projection: cfg.projection,
        median_ratio: median_ratio(&state.history),
        init: state.init.clone(),
        history: state.history.clone(),
        residuals,
        residual_budget: budget,
        runtime_secs: elapsed(start),
    };
    let converged = report.converged;
    let budget_ok = report.residual_budget.pass();
    let solution = Solution { state, report };
    if !converged {
        Err(PicardError::NotConverged(Box::new(solution)))
    } else if !budget_ok {
        Err(PicardError::ResidualBudget(Box::new(solution)))
    } else {
        Ok(solution)
    }
}
