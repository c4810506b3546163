//! Regression Monte Carlo for BSDEs whose `i`-th generator reads only the
//! `i`-th row of `Z`.
//!
//! Step `j` (from `N−1` down to 0), with the conditioning state at `t_j`:
//!
//! 1. `Ê_j[Y_{j+1}]` by regression of `Y_{j+1}`.
//! 2. `Zⁱ_j` by regression of `(Yⁱ_{j+1} − Ê_j[Yⁱ_{j+1}])·ΔW_jᵀ/Δ`. Centring
//!    the target does not change its conditional mean but removes the
//!    `O(Y²/Δ)` variance that the raw target carries into a quadratic
//!    generator.
//! 3. `Y_j = Ê_j[Y_{j+1}] + g(t_j, X_j, Y_j, Z_j)·Δ` by fixed-point
//!    iteration on each path, all components together, `Z` frozen.

use crate::expr::EvalEnv;
use crate::model::{Arity, CoefficientFn, FbsdeProblem, Shape};
use crate::par;
use crate::regression::{Design, RegressionBasis, RegressionError, DEFAULT_RIDGE};
use crate::simulation::{norm, BrownianBundle, PathArray, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound on the monotonicity tolerance, for runs whose regression
/// residuals vanish (deterministic problems).
pub const EPS_MONO_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackwardOpts {
    pub max_inner: usize,
    /// Relative: a path stops when `|Y_new − Y_old| ≤ tol·(1 + |Y_new|)`.
    pub inner_tol: f64,
    /// Row norm cap for `Zⁱ`; 0 disables it.
    pub z_truncation: f64,
    /// Relative ridge, multiplied by the largest diagonal of `AᵀA`.
    pub ridge: f64,
}

impl Default for BackwardOpts {
    fn default() -> Self {
        Self {
            max_inner: 100,
            inner_tol: 1e-12,
            z_truncation: 0.0,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl BackwardOpts {
    pub fn validate(&self) -> Result<(), BackwardError> {
        if self.max_inner == 0
            || !(self.inner_tol > 0.0)
            || !(self.z_truncation >= 0.0)
            || !(self.ridge >= 0.0)
        {
            return Err(BackwardError::Options(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackwardError {
    #[error("invalid backward options {0:?}")]
    Options(BackwardOpts),
    #[error("inner fixed point did not converge at step {step}: residual {residual:e} after {iterations} iterations")]
    InnerNonConvergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("regression failed at step {step}: {source}")]
    Regression {
        step: usize,
        #[source]
        source: RegressionError,
    },
    #[error("{what}: non-finite value on path {path} at step {step}")]
    NonFinite {
        what: &'static str,
        path: usize,
        step: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Worst over paths.
    pub inner_iterations: usize,
    pub inner_residual: f64,
    pub truncations: usize,
    /// Largest standard error of the `Ê_j[Yⁱ_{j+1}]` fits.
    pub fit_se: f64,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `M × (N+1) × n`.
    pub y: PathArray,
    /// `M × N × (n·d)`, row `i` of each matrix contiguous.
    pub z: PathArray,
    pub steps: Vec<StepDiagnostics>,
    /// Statistical slack for pathwise orderings: three fitted-value
    /// standard errors at the worst step, at least [`EPS_MONO_FLOOR`].
    pub eps_mono: f64,
}

impl BsdeSolution {
    pub fn truncations(&self) -> usize {
        self.steps.iter().map(|s| s.truncations).sum()
    }

    pub fn max_inner_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.inner_iterations).max().unwrap_or(0)
    }
}

/// Solves with the generator reading `x_path` and conditional expectations
/// taken given `x_path`.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde(
    generator: &[CoefficientFn],
    terminal: &[f64],
    x_path: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    opts: &BackwardOpts,
) -> Result<BsdeSolution, BackwardError> {
    solve_bsde_conditioned(generator, terminal, Some(x_path), x_path, bundle, grid, basis, opts)
}

/// General form: the generator reads `x_path` (or an empty `x` when `None`)
/// and regressions condition on `cond`, whose width must equal `basis.dim`.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde_conditioned(
    generator: &[CoefficientFn],
    terminal: &[f64],
    x_path: Option<&PathArray>,
    cond: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
    basis: &RegressionBasis,
    opts: &BackwardOpts,
) -> Result<BsdeSolution, BackwardError> {
    opts.validate()?;
    let n = generator.len();
    let d = bundle.dim();
    let paths = bundle.paths();
    let steps = grid.steps;
    if n == 0 || terminal.len() != paths * n {
        return Err(BackwardError::Shape(format!(
            "{} terminal values for {paths} paths of dimension {n}",
            terminal.len()
        )));
    }
    if bundle.steps() != steps {
        return Err(BackwardError::Shape(format!(
            "bundle has {} steps, grid has {steps}",
            bundle.steps()
        )));
    }
    if cond.paths() != paths || cond.nodes() < steps || cond.width() != basis.dim {
        return Err(BackwardError::Shape(format!(
            "conditioning path {:?} does not fit {paths} paths, {steps} steps, basis dimension {}",
            cond.shape(),
            basis.dim
        )));
    }
    if let Some(x) = x_path {
        if x.paths() != paths || x.nodes() < steps {
            return Err(BackwardError::Shape(format!(
                "x path {:?} does not fit {paths} paths and {steps} steps",
                x.shape()
            )));
        }
    }
    if let Some(m) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(BackwardError::NonFinite {
            what: "terminal value",
            path: m / n,
            step: steps,
        });
    }

    let basis = &basis.fitting(paths);
    let dt = grid.dt();
    let nd = n * d;
    let mut y = PathArray::zeros(paths, steps + 1, n);
    let mut z = PathArray::zeros(paths, steps, nd);
    y.node_mut(steps).copy_from_slice(terminal);
    let mut diags = Vec::with_capacity(steps);
    let mut worst_se = 0.0f64;
    let mut target = vec![0.0; paths];
    let mut ehat = vec![0.0; paths * n];
    let mut stats = vec![0.0; paths * 3];

    for j in (0..steps).rev() {
        let regression = |source| BackwardError::Regression { step: j, source };
        let design = Design::build(basis, cond.node(j), opts.ridge).map_err(regression)?;
        let next = y.node(j + 1);
        let dw = bundle.step(j);

        let mut fit_se = 0.0f64;
        for i in 0..n {
            for (m, t) in target.iter_mut().enumerate() {
                *t = next[m * n + i];
            }
            let fit = design.fit(&target);
            fit_se = fit_se.max(design.fitted_se(fit.residual_sd));
            for (m, f) in fit.fitted.iter().enumerate() {
                ehat[m * n + i] = *f;
            }
        }
        worst_se = worst_se.max(fit_se);

        let z_node = z.node_mut(j);
        for i in 0..n {
            for k in 0..d {
                for (m, t) in target.iter_mut().enumerate() {
                    *t = (next[m * n + i] - ehat[m * n + i]) * dw[m * d + k] / dt;
                }
                let fit = design.fit(&target);
                for (m, f) in fit.fitted.iter().enumerate() {
                    z_node[m * nd + i * d + k] = *f;
                }
            }
        }
        let mut truncations = 0;
        if opts.z_truncation > 0.0 {
            for row in z_node.chunks_exact_mut(d) {
                let r = norm(row);
                if r > opts.z_truncation {
                    let scale = opts.z_truncation / r;
                    row.iter_mut().for_each(|v| *v *= scale);
                    truncations += 1;
                }
            }
        }
        if let Some(m) = z.first_non_finite_at(j) {
            return Err(BackwardError::NonFinite {
                what: "z",
                path: m,
                step: j,
            });
        }

        let t = grid.t(j);
        let z_node = z.node(j);
        let x_node = x_path.map(|x| (x.node(j), x.width()));
        let ehat_ref = &ehat;
        par::for_each_chunk2(y.node_mut(j), n, &mut stats, 3, |m, yj, st| {
            let x: &[f64] = match x_node {
                Some((node, w)) => &node[m * w..(m + 1) * w],
                None => &[],
            };
            let e = &ehat_ref[m * n..(m + 1) * n];
            let zm = &z_node[m * nd..(m + 1) * nd];
            let (iters, res) = implicit_step(generator, t, x, e, zm, d, dt, opts, yj);
            st[0] = iters as f64;
            st[1] = res;
            st[2] = 0.0;
        });
        if let Some(m) = y.first_non_finite_at(j) {
            return Err(BackwardError::NonFinite {
                what: "y",
                path: m,
                step: j,
            });
        }
        let (mut iters, mut residual) = (0usize, 0.0f64);
        for s in stats.chunks_exact(3) {
            iters = iters.max(s[0] as usize);
            residual = residual.max(s[1]);
        }
        if residual > opts.inner_tol {
            return Err(BackwardError::InnerNonConvergence {
                step: j,
                residual,
                iterations: iters,
            });
        }
        diags.push(StepDiagnostics {
            step: j,
            inner_iterations: iters,
            inner_residual: residual,
            truncations,
            fit_se,
        });
    }
    diags.reverse();
    Ok(BsdeSolution {
        y,
        z,
        steps: diags,
        eps_mono: (3.0 * worst_se).max(EPS_MONO_FLOOR),
    })
}

/// Fixed point of `y = ê + g(t, x, y, z)Δ` on one path, written into `y`.
/// Returns the iteration count and the last relative update.
#[allow(clippy::too_many_arguments)]
#[inline]
fn implicit_step(
    generator: &[CoefficientFn],
    t: f64,
    x: &[f64],
    ehat: &[f64],
    z: &[f64],
    d: usize,
    dt: f64,
    opts: &BackwardOpts,
    y: &mut [f64],
) -> (usize, f64) {
    let n = y.len();
    y.copy_from_slice(ehat);
    let mut buf = [0.0f64; 16];
    let mut heap;
    let next: &mut [f64] = if n <= 16 {
        &mut buf[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_inner {
        for i in 0..n {
            let env = EvalEnv::new(t, x, y, &z[i * d..(i + 1) * d]);
            next[i] = ehat[i] + generator[i].eval_scalar(&env) * dt;
        }
        residual = 0.0;
        for i in 0..n {
            let r = (next[i] - y[i]).abs() / (1.0 + next[i].abs());
            // NaN must not look converged
            residual = if r.is_nan() { f64::INFINITY } else { residual.max(r) };
        }
        y.copy_from_slice(next);
        if residual <= opts.inner_tol {
            return (it, residual);
        }
    }
    (opts.max_inner, residual)
}

/// `gⁱ = C(1 + |y| + |zⁱ|²)`, or its negative. Reads `y` and `z` only.
fn bounding_generator(n: usize, c: f64, sign: f64) -> Vec<CoefficientFn> {
    let arity = Arity {
        t: false,
        x: false,
        y: true,
        z_row: None,
    };
    (0..n)
        .map(|i| {
            let mut a = arity;
            a.z_row = Some(i);
            CoefficientFn::native(
                format!("bound({sign:?}*{c:?}; row {i})"),
                a,
                Shape::Scalar,
                move |env, out| {
                    let z2: f64 = env.z.iter().map(|v| v * v).sum();
                    out[0] = sign * c * (1.0 + norm(env.y) + z2);
                },
            )
        })
        .collect()
}

fn bounding_solve(
    p: &FbsdeProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
    opts: &BackwardOpts,
    sign: f64,
) -> Result<BsdeSolution, BackwardError> {
    if basis.dim != p.d {
        return Err(BackwardError::Shape(format!(
            "bounding solves condition on W, so the basis needs dimension {} (got {})",
            p.d, basis.dim
        )));
    }
    let w = bundle.brownian_path();
    let terminal = vec![sign * p.growth; bundle.paths() * p.n];
    solve_bsde_conditioned(
        &bounding_generator(p.n, p.growth, sign),
        &terminal,
        None,
        &w,
        bundle,
        grid,
        basis,
        opts,
    )
}

/// Upper bounding BSDE: terminal `C`, driver `C(1 + |U| + |Vⁱ|²)`. Its
/// coefficients read no state, so regressions condition on the Brownian
/// path and `basis` must have dimension `d`.
pub fn solve_bounding_u(
    p: &FbsdeProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
    opts: &BackwardOpts,
) -> Result<BsdeSolution, BackwardError> {
    bounding_solve(p, grid, bundle, basis, opts, 1.0)
}

/// Seed BSDE of the iteration: terminal `−C`, driver `−C(1 + |Y| + |Zⁱ|²)`.
pub fn solve_seed_y0(
    p: &FbsdeProblem,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
    opts: &BackwardOpts,
) -> Result<BsdeSolution, BackwardError> {
    bounding_solve(p, grid, bundle, basis, opts, -1.0)
}

/// `(1 + C)e^{CT} − 1`, the value of `U_0` when `n = 1`.
pub fn bounding_u0_closed_form(c: f64, horizon: f64) -> f64 {
    (1.0 + c) * (c * horizon).exp() - 1.0
}
