//! Time grid, Brownian increments and explicit Euler–Maruyama solves.
//!
//! Paths are stored node-major (`[node][path][component]`) because every
//! backward step works on one node across all paths.
//!
//! Random numbers: path `m` draws from `ChaCha8Rng::seed_from_u64(seed)`
//! with `set_stream(m)`, taking its `N·d` standard normals in step order.
//! A path's increments therefore depend only on `(seed, m)`, not on `M` or
//! on thread scheduling.

use crate::expr::EvalEnv;
use crate::model::FbsdeProblem;
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("grid needs a positive finite horizon and at least one step (got T={horizon}, N={steps})")]
    Grid { horizon: f64, steps: usize },
    #[error("at least one path is required")]
    NoPaths,
    #[error("{what}: non-finite state on path {path} at step {step}")]
    NonFinite {
        what: &'static str,
        path: usize,
        step: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub horizon: f64,
    pub nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.nodes[j]
    }
}

pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid, SimulationError> {
    if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
        return Err(SimulationError::Grid { horizon, steps });
    }
    // j·T/N rather than accumulated sums, so t_N == T exactly
    let nodes = (0..=steps)
        .map(|j| horizon * j as f64 / steps as f64)
        .collect();
    Ok(TimeGrid {
        steps,
        horizon,
        nodes,
    })
}

/// Values of a `width`-dimensional process on `nodes` grid nodes for
/// `paths` paths, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathArray {
    paths: usize,
    nodes: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathArray {
    pub fn zeros(paths: usize, nodes: usize, width: usize) -> Self {
        Self {
            paths,
            nodes,
            width,
            data: vec![0.0; paths * nodes * width],
        }
    }

    /// Every path and node holds `value`.
    pub fn filled(paths: usize, nodes: usize, value: &[f64]) -> Self {
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(paths * nodes * value.len())
            .collect();
        Self {
            paths,
            nodes,
            width: value.len(),
            data,
        }
    }

    /// Builds from a path-major buffer `[path][node][component]`.
    pub fn from_path_major(
        paths: usize,
        nodes: usize,
        width: usize,
        values: &[f64],
    ) -> Result<Self, SimulationError> {
        if values.len() != paths * nodes * width {
            return Err(SimulationError::Shape(format!(
                "{} values for {paths}×{nodes}×{width}",
                values.len()
            )));
        }
        let mut out = Self::zeros(paths, nodes, width);
        for m in 0..paths {
            for j in 0..nodes {
                let src = (m * nodes + j) * width;
                out.get_mut(m, j).copy_from_slice(&values[src..src + width]);
            }
        }
        Ok(out)
    }

    /// Path-major copy `[path][node][component]`.
    pub fn to_path_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for m in 0..self.paths {
            for j in 0..self.nodes {
                out.extend_from_slice(self.get(m, j));
            }
        }
        out
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, m: usize, j: usize) -> &[f64] {
        let s = (j * self.paths + m) * self.width;
        &self.data[s..s + self.width]
    }

    #[inline]
    pub fn get_mut(&mut self, m: usize, j: usize) -> &mut [f64] {
        let s = (j * self.paths + m) * self.width;
        &mut self.data[s..s + self.width]
    }

    /// All paths at node `j`, `paths × width` contiguous values.
    #[inline]
    pub fn node(&self, j: usize) -> &[f64] {
        let len = self.paths * self.width;
        &self.data[j * len..(j + 1) * len]
    }

    #[inline]
    pub fn node_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.paths * self.width;
        &mut self.data[j * len..(j + 1) * len]
    }

    /// Node `j` read-only together with node `j + 1` writable.
    pub fn step_pair(&mut self, j: usize) -> (&[f64], &mut [f64]) {
        let len = self.paths * self.width;
        let (head, tail) = self.data.split_at_mut((j + 1) * len);
        (&head[j * len..], &mut tail[..len])
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Largest absolute entrywise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &PathArray) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |a, (p, q)| a.max((p - q).abs()))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.paths, self.nodes, self.width)
    }

    /// First non-finite entry at node `j`, as a path index.
    pub(crate) fn first_non_finite_at(&self, j: usize) -> Option<usize> {
        self.node(j)
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| i / self.width.max(1))
    }
}

/// Brownian increments `ΔW[m][j] ~ N(0, Δ·I_d)` shared by every solve of an
/// experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    pub seed: u64,
    pub dt: f64,
    increments: PathArray,
}

impl BrownianBundle {
    pub fn paths(&self) -> usize {
        self.increments.paths()
    }

    pub fn steps(&self) -> usize {
        self.increments.nodes()
    }

    pub fn dim(&self) -> usize {
        self.increments.width()
    }

    #[inline]
    pub fn increment(&self, m: usize, j: usize) -> &[f64] {
        self.increments.get(m, j)
    }

    /// Increments of all paths over step `j`.
    pub fn step(&self, j: usize) -> &[f64] {
        self.increments.node(j)
    }

    pub fn increments(&self) -> &PathArray {
        &self.increments
    }

    /// Cumulative path `W[m][j]`, `W[m][0] = 0`.
    pub fn brownian_path(&self) -> PathArray {
        let (m, n, d) = self.increments.shape();
        let mut w = PathArray::zeros(m, n + 1, d);
        for j in 0..n {
            let inc = self.increments.node(j);
            let (cur, next) = w.step_pair(j);
            for ((o, c), i) in next.iter_mut().zip(cur).zip(inc) {
                *o = c + i;
            }
        }
        w
    }
}

pub fn sample_brownian(
    paths: usize,
    grid: &TimeGrid,
    d: usize,
    seed: u64,
) -> Result<BrownianBundle, SimulationError> {
    if paths == 0 {
        return Err(SimulationError::NoPaths);
    }
    let n = grid.steps;
    let dt = grid.dt();
    let sd = dt.sqrt();
    let per_path: Vec<Vec<f64>> = par::map_range(paths, |m| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        (0..n * d)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    });
    let mut increments = PathArray::zeros(paths, n, d);
    for (m, values) in per_path.iter().enumerate() {
        for j in 0..n {
            increments
                .get_mut(m, j)
                .copy_from_slice(&values[j * d..(j + 1) * d]);
        }
    }
    Ok(BrownianBundle {
        seed,
        dt,
        increments,
    })
}

fn check_bundle(
    bundle: &BrownianBundle,
    grid: &TimeGrid,
    d: usize,
) -> Result<(), SimulationError> {
    if bundle.steps() != grid.steps || bundle.dim() != d {
        return Err(SimulationError::Shape(format!(
            "bundle has {} steps of dimension {}, expected {} of dimension {d}",
            bundle.steps(),
            bundle.dim(),
            grid.steps
        )));
    }
    Ok(())
}

fn check_input(
    what: &str,
    path: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
    width: usize,
) -> Result<(), SimulationError> {
    if path.shape() != (bundle.paths(), grid.steps + 1, width) {
        return Err(SimulationError::Shape(format!(
            "{what} has shape {:?}, expected ({}, {}, {width})",
            path.shape(),
            bundle.paths(),
            grid.steps + 1
        )));
    }
    Ok(())
}

/// Euler scheme `X_{j+1} = X_j + b(t_j, X_j, Y_j)Δ + σ(t_j, X_j)ΔW_j`,
/// `X_0 = x0`, on every path of the bundle.
pub fn euler_forward(
    p: &FbsdeProblem,
    y_path: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
) -> Result<PathArray, SimulationError> {
    check_bundle(bundle, grid, p.d)?;
    check_input("y path", y_path, bundle, grid, p.n)?;
    let (n, d, paths) = (p.n, p.d, bundle.paths());
    let dt = grid.dt();
    let zero_z = vec![0.0; d];
    let mut x = PathArray::filled(paths, grid.steps + 1, &p.x0);
    for j in 0..grid.steps {
        let t = grid.t(j);
        let y_node = y_path.node(j);
        let dw_node = bundle.step(j);
        let (cur, next) = x.step_pair(j);
        par::for_each_chunk(next, n, |m, out| {
            let xj = &cur[m * n..(m + 1) * n];
            let yj = &y_node[m * n..(m + 1) * n];
            let dw = &dw_node[m * d..(m + 1) * d];
            let env = EvalEnv::new(t, xj, yj, &zero_z);
            euler_step(p, &env, dw, dt, out);
        });
        if let Some(m) = x.first_non_finite_at(j + 1) {
            return Err(SimulationError::NonFinite {
                what: "forward state",
                path: m,
                step: j,
            });
        }
    }
    Ok(x)
}

/// One Euler step written into `out`. Shared with the residual check so the
/// defect of an unmodified forward solve is exactly zero.
#[inline]
pub(crate) fn euler_step(p: &FbsdeProblem, env: &EvalEnv<'_>, dw: &[f64], dt: f64, out: &mut [f64]) {
    let (n, d) = (p.n, p.d);
    let mut b = [0.0f64; 8];
    let mut s = [0.0f64; 64];
    let mut b_heap;
    let mut s_heap;
    let (b, s): (&mut [f64], &mut [f64]) = if n <= 8 && n * d <= 64 {
        (&mut b[..n], &mut s[..n * d])
    } else {
        b_heap = vec![0.0; n];
        s_heap = vec![0.0; n * d];
        (&mut b_heap, &mut s_heap)
    };
    p.drift.eval_into(env, b);
    p.diffusion.eval_into(env, s);
    for i in 0..n {
        let mut noise = 0.0;
        for k in 0..d {
            noise += s[i * d + k] * dw[k];
        }
        out[i] = env.x[i] + b[i] * dt + noise;
    }
}

/// Dominating forward process: every drift component is
/// `C(1 + |S_t| + |U_t|)`, diffusion `σ(t, S_t)`, `S_0 = x0`.
pub fn simulate_bounding_s(
    p: &FbsdeProblem,
    u_path: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
) -> Result<PathArray, SimulationError> {
    check_bundle(bundle, grid, p.d)?;
    check_input("u path", u_path, bundle, grid, p.n)?;
    let (n, d, paths, c) = (p.n, p.d, bundle.paths(), p.growth);
    let dt = grid.dt();
    let zero_y = vec![0.0; n];
    let zero_z = vec![0.0; d];
    let mut s = PathArray::filled(paths, grid.steps + 1, &p.x0);
    for j in 0..grid.steps {
        let t = grid.t(j);
        let u_node = u_path.node(j);
        let dw_node = bundle.step(j);
        let (cur, next) = s.step_pair(j);
        par::for_each_chunk(next, n, |m, out| {
            let sj = &cur[m * n..(m + 1) * n];
            let uj = &u_node[m * n..(m + 1) * n];
            let dw = &dw_node[m * d..(m + 1) * d];
            let drift = c * (1.0 + norm(sj) + norm(uj));
            let sigma = p
                .diffusion
                .eval_vec(&EvalEnv::new(t, sj, &zero_y, &zero_z));
            for i in 0..n {
                let noise: f64 = (0..d).map(|k| sigma[i * d + k] * dw[k]).sum();
                out[i] = sj[i] + drift * dt + noise;
            }
        });
        if let Some(m) = s.first_non_finite_at(j + 1) {
            return Err(SimulationError::NonFinite {
                what: "bounding state",
                path: m,
                step: j,
            });
        }
    }
    Ok(s)
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::problem_from_exprs;

    fn scalar(b: &str, sigma: &str, x0: f64, horizon: f64) -> FbsdeProblem {
        problem_from_exprs(1, 1, horizon, vec![x0], &[b], &[sigma], &["0"], &["0"], 1.0).unwrap()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn grid_examples() {
        assert_eq!(make_grid(1.0, 4).unwrap().nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(make_grid(2.0, 1).unwrap().nodes, vec![0.0, 2.0]);
        assert!(make_grid(0.0, 4).is_err());
        assert!(make_grid(1.0, 0).is_err());
        assert!(make_grid(f64::NAN, 3).is_err());
        let g = make_grid(0.7, 13).unwrap();
        assert_eq!(*g.nodes.last().unwrap(), 0.7);
        assert!(g.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bundle_shape_and_determinism() {
        let g = make_grid(1.0, 3).unwrap();
        let b = sample_brownian(1, &g, 2, 9).unwrap();
        assert_eq!(b.increments().shape(), (1, 3, 2));
        assert_eq!(b, sample_brownian(1, &g, 2, 9).unwrap());
        assert_ne!(b, sample_brownian(1, &g, 2, 10).unwrap());
        assert!(sample_brownian(0, &g, 1, 0).is_err());
    }

    #[test]
    fn path_streams_do_not_depend_on_path_count() {
        let g = make_grid(1.0, 5).unwrap();
        let small = sample_brownian(3, &g, 2, 4).unwrap();
        let large = sample_brownian(50, &g, 2, 4).unwrap();
        for m in 0..3 {
            for j in 0..5 {
                assert_eq!(small.increment(m, j), large.increment(m, j));
            }
        }
    }

    #[test]
    fn increment_variance_matches_dt() {
        // sample variance of 1e5 N(0,1) draws has standard error sqrt(2/(M-1))
        let g = make_grid(1.0, 1).unwrap();
        let b = sample_brownian(100_000, &g, 1, 1).unwrap();
        let (mean, var) = mean_var(b.step(0));
        let se = (2.0 / 99_999.0f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "{var}");
        assert!(mean.abs() < 3.0 / 100_000f64.sqrt());
    }

    #[test]
    fn frozen_dynamics_stay_at_x0() {
        let p = scalar("0", "0", 0.3, 1.0);
        let g = make_grid(1.0, 10).unwrap();
        let b = sample_brownian(20, &g, 1, 0).unwrap();
        let y = PathArray::zeros(20, 11, 1);
        let x = euler_forward(&p, &y, &b, &g).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn unit_drift_reproduces_grid_on_dyadic_steps() {
        let p = scalar("1", "0", 0.0, 1.0);
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_brownian(4, &g, 1, 0).unwrap();
        let x = euler_forward(&p, &PathArray::zeros(4, 9, 1), &b, &g).unwrap();
        for m in 0..4 {
            for j in 0..=8 {
                assert_eq!(x.get(m, j)[0], g.t(j));
            }
        }
    }

    #[test]
    fn brownian_forward_has_gaussian_terminal_moments() {
        let p = scalar("0", "1", 0.0, 1.0);
        let g = make_grid(1.0, 10).unwrap();
        let paths = 100_000;
        let b = sample_brownian(paths, &g, 1, 3).unwrap();
        let x = euler_forward(&p, &PathArray::zeros(paths, 11, 1), &b, &g).unwrap();
        let (mean, var) = mean_var(x.node(10));
        assert!(mean.abs() < 3.0 / (paths as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (paths as f64 - 1.0)).sqrt());
        // X coincides with the cumulative Brownian path
        let w = b.brownian_path();
        assert!(x.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn bounding_s_matches_ode() {
        // S' = 1 + S, S(0) = 0  =>  S(1) = e - 1
        let p = scalar("0", "0", 0.0, 1.0);
        let g = make_grid(1.0, 1000).unwrap();
        let b = sample_brownian(2, &g, 1, 0).unwrap();
        let u = PathArray::zeros(2, 1001, 1);
        let s = simulate_bounding_s(&p, &u, &b, &g).unwrap();
        let e1 = std::f64::consts::E - 1.0;
        assert!((s.get(0, 1000)[0] - e1).abs() / e1 < 1e-2);
    }

    #[test]
    fn bounding_s_nondecreasing_without_noise() {
        let p = scalar("0", "0", 0.5, 1.0);
        let g = make_grid(1.0, 50).unwrap();
        let b = sample_brownian(3, &g, 1, 0).unwrap();
        let u = PathArray::filled(3, 51, &[2.0]);
        let s = simulate_bounding_s(&p, &u, &b, &g).unwrap();
        for m in 0..3 {
            for j in 0..50 {
                assert!(s.get(m, j + 1)[0] >= s.get(m, j)[0]);
            }
        }
    }

    #[test]
    fn non_finite_state_reports_location() {
        let p = scalar("exp(exp(x1))", "0", 3.0, 1.0);
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_brownian(2, &g, 1, 0).unwrap();
        let err = euler_forward(&p, &PathArray::zeros(2, 5, 1), &b, &g).unwrap_err();
        assert!(matches!(err, SimulationError::NonFinite { path: 0, .. }));
    }

    #[test]
    fn y_path_shape_checked() {
        let p = scalar("0", "1", 0.0, 1.0);
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_brownian(2, &g, 1, 0).unwrap();
        assert!(euler_forward(&p, &PathArray::zeros(2, 4, 1), &b, &g).is_err());
    }

    #[test]
    fn path_major_round_trip() {
        let values: Vec<f64> = (0..24).map(f64::from).collect();
        let a = PathArray::from_path_major(2, 4, 3, &values).unwrap();
        assert_eq!(a.get(1, 2), &[18.0, 19.0, 20.0]);
        assert_eq!(a.to_path_major(), values);
    }

    #[test]
    fn euler_is_monotone_in_y_for_monotone_drift() {
        let p = scalar("0.5*tanh(y1) + 0.1*x1", "1 + 0.1*sin(x1)", 0.0, 1.0);
        let g = make_grid(1.0, 20).unwrap();
        let b = sample_brownian(200, &g, 1, 5).unwrap();
        let mut lo = PathArray::zeros(200, 21, 1);
        let mut hi = PathArray::zeros(200, 21, 1);
        let w = b.brownian_path();
        for (i, (l, h)) in lo
            .as_mut_slice()
            .iter_mut()
            .zip(hi.as_mut_slice())
            .enumerate()
        {
            *l = w.as_slice()[i].sin();
            *h = *l + (i % 3) as f64 * 0.2;
        }
        let x = euler_forward(&p, &lo, &b, &g).unwrap();
        let xb = euler_forward(&p, &hi, &b, &g).unwrap();
        for (a, c) in x.as_slice().iter().zip(xb.as_slice()) {
            assert!(*a <= *c + 1e-12 * 20.0);
        }
    }
}
