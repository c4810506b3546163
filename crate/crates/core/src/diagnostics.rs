//! Empirical norms, the BMO ceiling check and discrete residuals of a
//! returned solution.

use crate::expr::EvalEnv;
use crate::model::FbsdeProblem;
use crate::regression::{Design, RegressionBasis, RegressionError, DEFAULT_RIDGE};
use crate::simulation::{euler_step, norm, BrownianBundle, PathArray, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("process has no paths or nodes")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("conditional expectation regression failed at node {node}: {source}")]
    Regression {
        node: usize,
        #[source]
        source: RegressionError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PNorm {
    pub p: f64,
    pub value: f64,
}

/// Norm estimates for one process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub s_inf: f64,
    pub s_p: Vec<PNorm>,
    pub h_p: Vec<PNorm>,
    /// Of `∫Z dW` when a `Z` process was supplied. Supremum over grid nodes
    /// only, not over all stopping times.
    pub bmo2: Option<f64>,
}

/// Optional regression used for conditional expectations in the BMO
/// estimate. Without it the conditional expectation is the plain mean.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub path: &'a PathArray,
    pub basis: &'a RegressionBasis,
}

/// `S^∞ = max |V|`, `S^p = (mean_m max_j |V|^p)^{1/p}`,
/// `H^p = (mean_m (Σ_{j<N} |V_j|²Δ)^{p/2})^{1/p}`; `|·|` is the Euclidean
/// (Frobenius for `Z`) norm of one node value.
pub fn estimate_norms(
    proc: &PathArray,
    z_proc: Option<&PathArray>,
    grid: &TimeGrid,
    p_list: &[f64],
    cond: Option<Conditioning<'_>>,
) -> Result<NormReport, DiagnosticsError> {
    let (paths, nodes, _) = proc.shape();
    if paths == 0 || nodes == 0 {
        return Err(DiagnosticsError::Empty);
    }
    if nodes != grid.steps && nodes != grid.steps + 1 {
        return Err(DiagnosticsError::Shape(format!(
            "{nodes} nodes on a grid of {} steps",
            grid.steps
        )));
    }
    let dt = grid.dt();
    let mut running_max = vec![0.0f64; paths];
    let mut quad = vec![0.0f64; paths];
    let mut s_inf = 0.0f64;
    for j in 0..nodes {
        for m in 0..paths {
            let v = norm(proc.get(m, j));
            running_max[m] = running_max[m].max(v);
            s_inf = s_inf.max(v);
            if j < grid.steps {
                quad[m] += v * v * dt;
            }
        }
    }
    let s_p = p_list
        .iter()
        .map(|&p| PNorm {
            p,
            value: power_mean(running_max.iter().map(|v| v.powf(p)), paths, p),
        })
        .collect();
    let h_p = p_list
        .iter()
        .map(|&p| PNorm {
            p,
            value: power_mean(quad.iter().map(|q| q.powf(p / 2.0)), paths, p),
        })
        .collect();
    let bmo2 = z_proc.map(|z| bmo2_estimate(z, grid, cond)).transpose()?;
    Ok(NormReport {
        s_inf,
        s_p,
        h_p,
        bmo2,
    })
}

fn power_mean(values: impl Iterator<Item = f64>, count: usize, p: f64) -> f64 {
    (values.sum::<f64>() / count as f64).powf(1.0 / p)
}

/// `sqrt(max_j max_m Ê_j[Σ_{l≥j} |Z_l|²Δ])`.
pub fn bmo2_estimate(
    z: &PathArray,
    grid: &TimeGrid,
    cond: Option<Conditioning<'_>>,
) -> Result<f64, DiagnosticsError> {
    let (paths, nodes, _) = z.shape();
    if paths == 0 || nodes == 0 {
        return Err(DiagnosticsError::Empty);
    }
    if nodes != grid.steps {
        return Err(DiagnosticsError::Shape(format!(
            "z has {nodes} nodes, grid has {} steps",
            grid.steps
        )));
    }
    if let Some(c) = cond {
        if c.path.paths() != paths || c.path.nodes() < nodes || c.path.width() != c.basis.dim {
            return Err(DiagnosticsError::Shape(format!(
                "conditioning path {:?} does not fit z {:?}",
                c.path.shape(),
                z.shape()
            )));
        }
    }
    let dt = grid.dt();
    let mut tail = vec![0.0f64; paths];
    let mut sup = 0.0f64;
    for j in (0..nodes).rev() {
        for (m, t) in tail.iter_mut().enumerate() {
            *t += z.get(m, j).iter().map(|v| v * v).sum::<f64>() * dt;
        }
        let node_sup = match cond {
            Some(c) => {
                let basis = c.basis.fitting(paths);
                let design = Design::build(&basis, c.path.node(j), DEFAULT_RIDGE)
                    .map_err(|source| DiagnosticsError::Regression { node: j, source })?;
                design.fit(&tail).fitted.iter().fold(0.0f64, |a, &v| a.max(v))
            }
            None => tail.iter().sum::<f64>() / paths as f64,
        };
        sup = sup.max(node_sup);
    }
    Ok(sup.sqrt())
}

/// `φ(x) = (e^{2C|x|} − 2C|x| − 1) / (4C²)`, solving `φ'' − 2C|φ'| = 1`,
/// `φ(0) = φ'(0) = 0`.
pub fn phi(c: f64, x: f64) -> f64 {
    let a = 2.0 * c * x.abs();
    // expm1 keeps small arguments accurate
    (a.exp_m1() - a) / (4.0 * c * c)
}

/// `φ'(x) = (e^{2C|x|} − 1)/(2C) · sgn(x)`.
pub fn phi_prime(c: f64, x: f64) -> f64 {
    (2.0 * c * x.abs()).exp_m1() / (2.0 * c) * x.signum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiCheck {
    pub growth: f64,
    pub horizon: f64,
    /// Bound on `‖Y‖_S∞` used in the ceiling.
    pub k: f64,
    pub phi_k: f64,
    pub phi_prime_k: f64,
    /// `φ(K) + C·T·φ'(K)·(1 + K)`.
    pub ceiling: f64,
    pub bmo2: f64,
    /// `½·BMO₂²`.
    pub lhs: f64,
    pub pass: bool,
}

/// Compares `½·BMO₂(Z)²` against the ceiling `φ(K) + CTφ'(K)(1+K)`.
pub fn phi_bound_check(
    k: f64,
    z: &PathArray,
    p: &FbsdeProblem,
    grid: &TimeGrid,
    cond: Option<Conditioning<'_>>,
) -> Result<PhiCheck, DiagnosticsError> {
    let bmo2 = bmo2_estimate(z, grid, cond)?;
    Ok(phi_ceiling(k, bmo2, p.growth, p.horizon))
}

pub fn phi_ceiling(k: f64, bmo2: f64, c: f64, horizon: f64) -> PhiCheck {
    let phi_k = phi(c, k);
    let phi_prime_k = phi_prime(c, k);
    let ceiling = phi_k + c * horizon * phi_prime_k * (1.0 + k);
    let lhs = 0.5 * bmo2 * bmo2;
    PhiCheck {
        growth: c,
        horizon,
        k,
        phi_k,
        phi_prime_k,
        ceiling,
        bmo2,
        lhs,
        pass: lhs <= ceiling,
    }
}

/// Position `(path, step, component)` of a worst defect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub path: usize,
    pub step: usize,
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub max: f64,
    pub rms: f64,
    pub worst: Option<Location>,
}

impl Defect {
    fn new() -> Self {
        Self {
            max: 0.0,
            rms: 0.0,
            worst: None,
        }
    }

    fn add(&mut self, v: f64, at: Location) {
        let a = v.abs();
        self.rms += a * a;
        if self.worst.is_none() || a > self.max || a.is_nan() {
            self.max = a;
            self.worst = Some(at);
        }
    }

    fn finish(mut self, count: usize) -> Self {
        self.rms = (self.rms / count.max(1) as f64).sqrt();
        self
    }
}

/// Discrete defects of a candidate `(X, Y, Z)`:
/// forward `X_{j+1} − X_j − bΔ − σΔW`, backward
/// `Yⁱ_j − Yⁱ_{j+1} − gⁱΔ + Zⁱ_j·ΔW_j`, terminal `Y_N − h(X_N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub forward: Defect,
    pub backward: Defect,
    pub terminal: Defect,
}

pub fn residual_check(
    p: &FbsdeProblem,
    x: &PathArray,
    y: &PathArray,
    z: &PathArray,
    bundle: &BrownianBundle,
    grid: &TimeGrid,
) -> Result<ResidualReport, DiagnosticsError> {
    let (paths, steps, n, d) = (bundle.paths(), grid.steps, p.n, p.d);
    let expect = [
        ("x", x.shape(), (paths, steps + 1, n)),
        ("y", y.shape(), (paths, steps + 1, n)),
        ("z", z.shape(), (paths, steps, n * d)),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(DiagnosticsError::Shape(format!("{name} is {got:?}, expected {want:?}")));
        }
    }
    if bundle.steps() != steps || bundle.dim() != d {
        return Err(DiagnosticsError::Shape("bundle does not match the grid".into()));
    }
    let dt = grid.dt();
    let zero_z = vec![0.0; d];
    let mut forward = Defect::new();
    let mut backward = Defect::new();
    let mut terminal = Defect::new();
    let mut step = vec![0.0; n];
    for j in 0..steps {
        let t = grid.t(j);
        for m in 0..paths {
            let (xj, yj, zj, dw) = (x.get(m, j), y.get(m, j), z.get(m, j), bundle.increment(m, j));
            euler_step(p, &EvalEnv::new(t, xj, yj, &zero_z), dw, dt, &mut step);
            let xn = x.get(m, j + 1);
            let yn = y.get(m, j + 1);
            for i in 0..n {
                let at = Location {
                    path: m,
                    step: j,
                    component: i,
                };
                forward.add(xn[i] - step[i], at);
                let zi = &zj[i * d..(i + 1) * d];
                let g = p.generator[i].eval_scalar(&EvalEnv::new(t, xj, yj, zi));
                let mart: f64 = zi.iter().zip(dw).map(|(a, b)| a * b).sum();
                backward.add(yj[i] - yn[i] - g * dt + mart, at);
            }
        }
    }
    for m in 0..paths {
        let h = p.terminal.eval_vec(&EvalEnv::new(grid.horizon, x.get(m, steps), &step, &zero_z));
        for (i, (yv, hv)) in y.get(m, steps).iter().zip(&h).enumerate() {
            terminal.add(
                yv - hv,
                Location {
                    path: m,
                    step: steps,
                    component: i,
                },
            );
        }
    }
    let count = paths * steps * n;
    Ok(ResidualReport {
        forward: forward.finish(count),
        backward: backward.finish(count),
        terminal: terminal.finish(paths * n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{make_grid, sample_brownian};
    use proptest::prelude::*;

    #[test]
    fn constant_process_norms() {
        let g = make_grid(2.0, 10).unwrap();
        let v = PathArray::filled(5, 11, &[-1.5]);
        let r = estimate_norms(&v, None, &g, &[2.0, 4.0], None).unwrap();
        assert_eq!(r.s_inf, 1.5);
        for s in &r.s_p {
            assert!((s.value - 1.5).abs() < 1e-14);
        }
        for h in &r.h_p {
            assert!((h.value - 1.5 * 2f64.sqrt()).abs() < 1e-12);
        }
        assert!(r.bmo2.is_none());
    }

    #[test]
    fn bmo_of_zero_and_unit_z() {
        let g = make_grid(1.0, 20).unwrap();
        let y = PathArray::zeros(30, 21, 1);
        let zero = PathArray::zeros(30, 20, 1);
        let w = sample_brownian(30, &g, 1, 0).unwrap().brownian_path();
        let basis = RegressionBasis::polynomial(1, 2);
        let cond = Conditioning {
            path: &w,
            basis: &basis,
        };
        let r = estimate_norms(&y, Some(&zero), &g, &[2.0], Some(cond)).unwrap();
        assert_eq!(r.bmo2, Some(0.0));
        let unit = PathArray::filled(30, 20, &[1.0]);
        let b = bmo2_estimate(&unit, &g, Some(cond)).unwrap();
        assert!((b - 1.0).abs() < 1e-9, "{b}");
        assert!((bmo2_estimate(&unit, &g, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.7, 0.0), 0.0);
        assert_eq!(phi_prime(0.7, 0.0), 0.0);
        // C = 1/2, x = 1: e − 2
        let e_minus_2 = 0.718_281_828_459_045_235_36_f64;
        assert!((phi(0.5, 1.0) - e_minus_2).abs() < 1e-15);
        assert_eq!(phi(0.5, -1.0), phi(0.5, 1.0));
        assert!((phi_prime(0.5, 1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert_eq!(phi_prime(0.5, -1.0), -phi_prime(0.5, 1.0));
    }

    #[test]
    fn phi_solves_its_ode() {
        // φ'' − 2C|φ'| = 1 by central differences
        for &(c, x) in &[(0.5, 0.3), (1.0, 1.2), (2.0, -0.4)] {
            let h = 1e-4;
            let second = (phi(c, x + h) - 2.0 * phi(c, x) + phi(c, x - h)) / (h * h);
            assert!((second - 2.0 * c * phi_prime(c, x).abs() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_z_passes_ceiling() {
        let check = phi_ceiling(0.0, 0.0, 1.0, 1.0);
        assert!(check.pass);
        assert_eq!(check.lhs, 0.0);
    }

    #[test]
    fn injected_defect_is_detected() {
        let p = crate::model::problem_from_exprs(1, 1, 1.0, vec![0.0], &["0"], &["0"], &["0"], &["0"], 1.0)
            .unwrap();
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_brownian(3, &g, 1, 0).unwrap();
        let x = PathArray::zeros(3, 5, 1);
        let mut y = PathArray::zeros(3, 5, 1);
        let z = PathArray::zeros(3, 4, 1);
        let clean = residual_check(&p, &x, &y, &z, &b, &g).unwrap();
        assert_eq!((clean.forward.max, clean.backward.max, clean.terminal.max), (0.0, 0.0, 0.0));
        y.get_mut(1, 2)[0] += 1.0;
        let r = residual_check(&p, &x, &y, &z, &b, &g).unwrap();
        assert!(r.backward.max >= 1.0);
        assert_eq!(r.backward.worst.unwrap().path, 1);
        assert!(residual_check(&p, &x, &y, &PathArray::zeros(3, 5, 1), &b, &g).is_err());
    }

    proptest! {
        #[test]
        fn s_norms_ordered(values in prop::collection::vec(-5.0f64..5.0, 6 * 4)) {
            let g = make_grid(1.0, 3).unwrap();
            let v = PathArray::from_path_major(6, 4, 1, &values).unwrap();
            let r = estimate_norms(&v, None, &g, &[2.0, 4.0, 8.0], None).unwrap();
            let s: Vec<f64> = r.s_p.iter().map(|q| q.value).collect();
            prop_assert!(s[0] <= s[1] * (1.0 + 1e-12) && s[1] <= s[2] * (1.0 + 1e-12));
            prop_assert!(s[2] <= r.s_inf * (1.0 + 1e-12));
        }

        #[test]
        fn bmo_invariant_under_path_permutation(
            values in prop::collection::vec(-3.0f64..3.0, 8 * 5),
            shift in 1usize..8,
        ) {
            let g = make_grid(1.0, 5).unwrap();
            let z = PathArray::from_path_major(8, 5, 1, &values).unwrap();
            let mut rotated = values.clone();
            rotated.rotate_left(shift * 5);
            let zr = PathArray::from_path_major(8, 5, 1, &rotated).unwrap();
            let a = bmo2_estimate(&z, &g, None).unwrap();
            let b = bmo2_estimate(&zr, &g, None).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
