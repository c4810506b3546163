//! Least-squares conditional expectations on a polynomial basis.
//!
//! The normal equations are small (a few dozen unknowns at most) and are
//! solved by a Cholesky factorisation that is computed once per time step
//! and reused for every target regressed at that step.

use crate::par;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative ridge: `λ = 1e-8 · max diag(AᵀA)`.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("normal equations are rank deficient (pivot {pivot} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },
    #[error("{features} features need at least as many paths (got {paths})")]
    TooFewPaths { paths: usize, features: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Monomials of total degree at most `degree` in `dim` variables. The first
/// monomial is the constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub dim: usize,
    pub degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl RegressionBasis {
    pub fn polynomial(dim: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut current = vec![0u32; dim];
            push_compositions(total as u32, 0, &mut current, &mut exponents);
        }
        Self {
            dim,
            degree,
            exponents,
        }
    }

    /// The same basis at the highest degree whose feature count does not
    /// exceed `paths`, so tiny path counts still give a solvable system.
    pub fn fitting(&self, paths: usize) -> RegressionBasis {
        if self.feature_count() <= paths.max(1) {
            return self.clone();
        }
        let degree = (0..self.degree)
            .rev()
            .find(|&k| binomial(self.dim + k, k) <= paths)
            .unwrap_or(0);
        RegressionBasis::polynomial(self.dim, degree)
    }

    pub fn feature_count(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Feature vector of an already standardised state.
    pub fn features_into(&self, z: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e
                .iter()
                .zip(z)
                .fold(1.0, |acc, (&k, &v)| acc * v.powi(k as i32));
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn push_compositions(remaining: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 >= cur.len() {
        if let Some(last) = cur.last_mut() {
            *last = remaining;
            out.push(cur.clone());
        } else if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k;
        push_compositions(remaining - k, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// In-place Cholesky factor of a symmetric positive definite matrix,
/// stored row-major in the lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    size: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Fails when a pivot is not clearly positive relative to the original
    /// diagonal entry.
    pub fn factor(mut a: Vec<f64>, size: usize) -> Result<Self, RegressionError> {
        assert_eq!(a.len(), size * size);
        let diag: Vec<f64> = (0..size).map(|i| a[i * size + i]).collect();
        for j in 0..size {
            let mut pivot = a[j * size + j];
            for k in 0..j {
                pivot -= a[j * size + k] * a[j * size + k];
            }
            if !(pivot > 1e-12 * diag[j]) || !pivot.is_finite() {
                return Err(RegressionError::RankDeficient { column: j, pivot });
            }
            let root = pivot.sqrt();
            a[j * size + j] = root;
            for i in j + 1..size {
                let mut v = a[i * size + j];
                for k in 0..j {
                    v -= a[i * size + k] * a[j * size + k];
                }
                a[i * size + j] = v / root;
            }
        }
        Ok(Self { size, lower: a })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.size;
        let l = &self.lower;
        let mut y = rhs.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i * n + k] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= l[k * n + i] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
}

/// Ridge least squares `(AᵀA + λI)β = Aᵀv` on a row-major `M × F` feature
/// matrix. Every column, the constant one included, is penalised by `λ`.
pub fn regress_conditional(
    targets: &[f64],
    features: &[f64],
    feature_count: usize,
    lambda: f64,
) -> Result<Regression, RegressionError> {
    let f = feature_count;
    if f == 0 || features.len() != targets.len() * f {
        return Err(RegressionError::Shape(format!(
            "{} feature values for {} targets of {f} features",
            features.len(),
            targets.len()
        )));
    }
    if targets.len() < f {
        return Err(RegressionError::TooFewPaths {
            paths: targets.len(),
            features: f,
        });
    }
    let mut gram = gram(features, f);
    for i in 0..f {
        gram[i * f + i] += lambda;
    }
    let chol = Cholesky::factor(gram, f)?;
    let coefficients = chol.solve(&cross(features, f, targets));
    let fitted = fitted(features, f, &coefficients);
    Ok(Regression {
        coefficients,
        fitted,
    })
}

fn gram(a: &[f64], f: usize) -> Vec<f64> {
    let mut g = vec![0.0; f * f];
    for row in a.chunks_exact(f) {
        for i in 0..f {
            let ri = row[i];
            for j in 0..=i {
                g[i * f + j] += ri * row[j];
            }
        }
    }
    for i in 0..f {
        for j in 0..i {
            g[j * f + i] = g[i * f + j];
        }
    }
    g
}

fn cross(a: &[f64], f: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; f];
    for (row, t) in a.chunks_exact(f).zip(v) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * t;
        }
    }
    out
}

fn fitted(a: &[f64], f: usize, beta: &[f64]) -> Vec<f64> {
    a.chunks_exact(f)
        .map(|row| row.iter().zip(beta).map(|(r, b)| r * b).sum())
        .collect()
}

/// A factored design at one time step: the standardised basis evaluated on
/// every path, ready to regress any number of targets.
///
/// Each conditioning coordinate is centred and scaled by its cross-path
/// standard deviation (a coordinate with zero spread maps to 0). The ridge
/// `λ = rel_ridge · max diag(AᵀA)` is applied to every column except the
/// constant, so a constant target is reproduced to rounding.
#[derive(Debug, Clone)]
pub struct Design {
    features: Vec<f64>,
    count: usize,
    chol: Cholesky,
}

/// Output of [`Design::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Residual standard deviation across paths.
    pub residual_sd: f64,
}

impl Design {
    /// `states` holds `paths × basis.dim` values, path by path.
    pub fn build(
        basis: &RegressionBasis,
        states: &[f64],
        rel_ridge: f64,
    ) -> Result<Self, RegressionError> {
        let dim = basis.dim;
        let f = basis.feature_count();
        if dim == 0 || states.len() % dim != 0 {
            return Err(RegressionError::Shape(format!(
                "{} state values for dimension {dim}",
                states.len()
            )));
        }
        let paths = states.len() / dim;
        if paths < f {
            return Err(RegressionError::TooFewPaths { paths, features: f });
        }
        let (mean, inv_sd) = standardise(states, dim);
        let mut features = vec![0.0; paths * f];
        par::for_each_chunk(&mut features, f, |m, out| {
            let mut z = [0.0f64; 16];
            let mut z_heap;
            let z: &mut [f64] = if dim <= 16 {
                &mut z[..dim]
            } else {
                z_heap = vec![0.0; dim];
                &mut z_heap
            };
            for k in 0..dim {
                z[k] = (states[m * dim + k] - mean[k]) * inv_sd[k];
            }
            basis.features_into(z, out);
        });
        let mut g = gram(&features, f);
        let max_diag = (0..f).map(|i| g[i * f + i]).fold(0.0, f64::max);
        for i in 1..f {
            g[i * f + i] += rel_ridge * max_diag;
        }
        let chol = Cholesky::factor(g, f)?;
        Ok(Self {
            features,
            count: f,
            chol,
        })
    }

    pub fn paths(&self) -> usize {
        self.features.len() / self.count
    }

    pub fn feature_count(&self) -> usize {
        self.count
    }

    pub fn fit(&self, targets: &[f64]) -> Fit {
        assert_eq!(targets.len(), self.paths());
        let coefficients = self.chol.solve(&cross(&self.features, self.count, targets));
        let fitted = fitted(&self.features, self.count, &coefficients);
        let ss: f64 = targets
            .iter()
            .zip(&fitted)
            .map(|(t, f)| (t - f) * (t - f))
            .sum();
        let dof = (targets.len().saturating_sub(self.count)).max(1);
        Fit {
            coefficients,
            fitted,
            residual_sd: (ss / dof as f64).sqrt(),
        }
    }

    /// Standard error of a fitted value, averaged over paths:
    /// `sd · sqrt(F / M)`.
    pub fn fitted_se(&self, residual_sd: f64) -> f64 {
        residual_sd * (self.count as f64 / self.paths() as f64).sqrt()
    }
}

fn standardise(states: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let paths = (states.len() / dim) as f64;
    let mut mean = vec![0.0; dim];
    for row in states.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= paths);
    let mut var = vec![0.0; dim];
    for row in states.chunks_exact(dim) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_sd = var
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / paths).sqrt();
            // spread at rounding level counts as none
            if sd > 1e-12 * (1.0 + m.abs()) {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    (mean, inv_sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_sizes_and_order() {
        assert_eq!(RegressionBasis::polynomial(1, 3).feature_count(), 4);
        assert_eq!(RegressionBasis::polynomial(2, 3).feature_count(), 10);
        assert_eq!(RegressionBasis::polynomial(3, 2).feature_count(), 10);
        assert_eq!(RegressionBasis::polynomial(2, 0).feature_count(), 1);
        let b = RegressionBasis::polynomial(2, 2);
        assert_eq!(b.exponents()[0], vec![0, 0]);
        let mut out = vec![0.0; 6];
        b.features_into(&[2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn fitting_reduces_degree() {
        let b = RegressionBasis::polynomial(2, 3);
        assert_eq!(b.fitting(100), b);
        assert_eq!(b.fitting(6).degree, 2);
        assert_eq!(b.fitting(5).degree, 1);
        assert_eq!(b.fitting(1).degree, 0);
        assert_eq!(b.fitting(1).feature_count(), 1);
    }

    #[test]
    fn intercept_only_gives_mean() {
        let v = [1.0, 2.0, 6.0, 7.0];
        let r = regress_conditional(&v, &[1.0; 4], 1, 0.0).unwrap();
        assert!(r.fitted.iter().all(|&f| (f - 4.0).abs() < 1e-15));
    }

    #[test]
    fn exact_linear_relation() {
        let x: Vec<f64> = (1..=6).map(f64::from).collect();
        let v: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let r = regress_conditional(&v, &x, 1, 0.0).unwrap();
        assert!((r.coefficients[0] - 2.0).abs() < 1e-14);
        for (f, t) in r.fitted.iter().zip(&v) {
            assert!((f - t).abs() < 1e-13);
        }
    }

    #[test]
    fn rank_deficiency_without_ridge() {
        let a = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(matches!(
            regress_conditional(&[1.0, 2.0, 3.0], &a, 2, 0.0),
            Err(RegressionError::RankDeficient { .. })
        ));
        assert!(regress_conditional(&[1.0, 2.0, 3.0], &a, 2, 1e-8).is_ok());
        assert!(matches!(
            regress_conditional(&[1.0], &[1.0, 2.0], 2, 1e-8),
            Err(RegressionError::TooFewPaths { .. })
        ));
    }

    #[test]
    fn matches_dense_solver_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, f) = (500, 6);
        let a: Vec<f64> = (0..m * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lambda = 1e-8;
        let r = regress_conditional(&v, &a, f, lambda).unwrap();

        let am = DMatrix::from_row_slice(m, f, &a);
        let lhs = am.transpose() * &am + DMatrix::identity(f, f) * lambda;
        let rhs = am.transpose() * DVector::from_column_slice(&v);
        let beta = lhs.lu().solve(&rhs).unwrap();
        let fitted = &am * &beta;
        for (x, y) in r.fitted.iter().zip(fitted.iter()) {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn design_reproduces_constant_targets() {
        let states: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = Design::build(&RegressionBasis::polynomial(1, 3), &states, DEFAULT_RIDGE).unwrap();
        let fit = d.fit(&[2.5; 100]);
        assert!(fit.fitted.iter().all(|f| (f - 2.5).abs() < 1e-12));
        assert!(fit.residual_sd < 1e-12);
    }

    #[test]
    fn design_handles_degenerate_state() {
        // all paths at the same point: only the intercept carries information
        let d = Design::build(&RegressionBasis::polynomial(2, 3), &[0.4; 40], DEFAULT_RIDGE).unwrap();
        let targets: Vec<f64> = (0..20).map(f64::from).collect();
        let fit = d.fit(&targets);
        assert!(fit.fitted.iter().all(|f| (f - 9.5).abs() < 1e-9));
    }

    #[test]
    fn design_recovers_cubic() {
        let states: Vec<f64> = (0..200).map(|i| -1.0 + i as f64 / 100.0).collect();
        let targets: Vec<f64> = states.iter().map(|x| 1.0 - x + 0.5 * x.powi(3)).collect();
        let d = Design::build(&RegressionBasis::polynomial(1, 3), &states, DEFAULT_RIDGE).unwrap();
        let fit = d.fit(&targets);
        for (f, t) in fit.fitted.iter().zip(&targets) {
            assert!((f - t).abs() < 1e-6);
        }
    }

    #[test]
    fn cholesky_matches_qr_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bm = DMatrix::from_row_slice(n, n, &b);
        let spd = &bm * bm.transpose() + DMatrix::identity(n, n);
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let row_major: Vec<f64> = spd.transpose().iter().copied().collect();
        let x = Cholesky::factor(row_major, n).unwrap().solve(&rhs);
        let oracle = spd.qr().solve(&DVector::from_column_slice(&rhs)).unwrap();
        for (a, b) in x.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
