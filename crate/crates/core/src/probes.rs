//! Sample-based checks of the standing assumptions on `b`, `σ`, `h`, `g`.
//!
//! The assumptions are statements over all of R^n; here they are probed at
//! random points drawn from a ball of configurable radius, and the report
//! records that region. Growth and Lipschitz bounds (A1–A4) are checked as
//! ratios against their right-hand sides with a relative slack; the order
//! conditions (A5–A7) as signed differences with an absolute slack.

use crate::expr::EvalEnv;
use crate::model::{CoefficientFn, FbsdeProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RATIO_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ORDER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probes: usize,
    pub radius: f64,
    pub seed: u64,
    pub ratio_tolerance: f64,
    pub order_tolerance: f64,
}

impl ProbeConfig {
    pub fn new(probes: usize, radius: f64, seed: u64) -> Self {
        Self {
            probes,
            radius,
            seed,
            ratio_tolerance: DEFAULT_RATIO_TOLERANCE,
            order_tolerance: DEFAULT_ORDER_TOLERANCE,
        }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::new(2000, 10.0, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Worst observed `lhs / rhs`; passes when at most `1 + tol`.
    Ratio,
    /// Worst observed `lhs - rhs` of an ordering; passes when at most `tol`.
    Order,
}

/// Probe point (or pair of points) at which the worst case was observed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Witness {
    pub component: Option<usize>,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub x_bar: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub y_bar: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub z_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    /// Assumption number 1..=7, or 0 for the initial-state ordering of a
    /// comparison pair.
    pub assumption: u8,
    pub check: String,
    pub kind: CheckKind,
    pub probes: usize,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledRegion {
    pub radius: f64,
    pub probes: usize,
    pub seed: u64,
}

/// Aggregated probe outcomes. Also used for comparison-pair hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub region: SampledRegion,
    pub entries: Vec<ProbeEntry>,
}

impl AssumptionReport {
    fn empty(cfg: &ProbeConfig) -> Self {
        Self {
            region: SampledRegion {
                radius: cfg.radius,
                probes: cfg.probes,
                seed: cfg.seed,
            },
            entries: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    /// `None` when the assumption was not probed.
    pub fn assumption_passes(&self, assumption: u8) -> Option<bool> {
        let mut seen = false;
        let mut ok = true;
        for e in self.entries.iter().filter(|e| e.assumption == assumption) {
            seen = true;
            ok &= e.pass;
        }
        seen.then_some(ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ProbeEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }

    pub fn merge(mut self, other: AssumptionReport) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{check}: coefficient evaluation produced a non-finite value at t={t}, x={x:?}, y={y:?}, z={z:?}")]
pub struct ProbeError {
    pub check: String,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

struct Tracker {
    entry: ProbeEntry,
}

impl Tracker {
    fn new(assumption: u8, check: &str, kind: CheckKind, cfg: &ProbeConfig) -> Self {
        let threshold = match kind {
            CheckKind::Ratio => 1.0 + cfg.ratio_tolerance,
            CheckKind::Order => cfg.order_tolerance,
        };
        Self {
            entry: ProbeEntry {
                assumption,
                check: check.to_string(),
                kind,
                probes: 0,
                worst: 0.0,
                threshold,
                pass: true,
                witness: None,
            },
        }
    }

    fn record(&mut self, value: f64, witness: impl FnOnce() -> Witness) {
        self.entry.probes += 1;
        let first = self.entry.witness.is_none();
        // NaN ratios (0/0) never reach here; an infinite ratio is a real failure.
        if first || value > self.entry.worst {
            self.entry.worst = value.max(0.0);
            self.entry.witness = Some(witness());
        }
    }

    fn finish(mut self) -> ProbeEntry {
        self.entry.pass = self.entry.worst <= self.entry.threshold;
        self.entry
    }
}

fn check_finite(check: &str, values: &[f64], env: &EvalEnv<'_>) -> Result<(), ProbeError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProbeError {
            check: check.to_string(),
            t: env.t,
            x: env.x.to_vec(),
            y: env.y.to_vec(),
            z: env.z.to_vec(),
        })
    }
}

fn eval_checked(
    check: &str,
    f: &CoefficientFn,
    env: &EvalEnv<'_>,
) -> Result<Vec<f64>, ProbeError> {
    let v = f.eval_vec(env);
    check_finite(check, &v, env)?;
    Ok(v)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if num == 0.0 {
        None
    } else if den == 0.0 {
        Some(f64::INFINITY)
    } else {
        Some(num / den)
    }
}

/// Uniform point in the closed ball of the given radius.
fn in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let len = norm(&v);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    if len > 0.0 {
        v.iter_mut().for_each(|a| *a *= r / len);
    }
    v
}

/// Second point of a Lipschitz pair: either independent or a local
/// perturbation at a random scale.
fn partner(rng: &mut ChaCha8Rng, base: &[f64], radius: f64) -> Vec<f64> {
    if rng.random::<bool>() {
        in_ball(rng, base.len(), radius)
    } else {
        let scale = radius * 10f64.powf(-3.0 * rng.random::<f64>());
        let step = in_ball(rng, base.len(), scale);
        base.iter().zip(step).map(|(a, s)| a + s).collect()
    }
}

/// Nonnegative increments, each coordinate exactly zero with probability
/// 1/4 so that boundary cases of the order cones are exercised.
fn upward(rng: &mut ChaCha8Rng, base: &[f64], radius: f64, pinned: Option<usize>) -> Vec<f64> {
    base.iter()
        .enumerate()
        .map(|(j, &a)| {
            if Some(j) == pinned || rng.random::<f64>() < 0.25 {
                a
            } else {
                let g: f64 = rng.sample(StandardNormal);
                a + g.abs() * radius * 0.25
            }
        })
        .collect()
}

fn time(rng: &mut ChaCha8Rng, horizon: f64) -> f64 {
    rng.random::<f64>() * horizon
}

/// Which of the arguments differ within a Lipschitz pair. At least one does.
fn vary_mask(rng: &mut ChaCha8Rng, count: usize) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..count).map(|_| rng.random()).collect();
        if m.iter().any(|&b| b) {
            return m;
        }
    }
}

/// Growth and Lipschitz ratios for A1 (drift), A2 (diffusion), A3
/// (terminal) and A4 (generator).
pub fn probe_growth_lipschitz(
    p: &FbsdeProblem,
    cfg: &ProbeConfig,
) -> Result<AssumptionReport, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d, c, r) = (p.n, p.d, p.growth, cfg.radius);
    let zero_z = vec![0.0; d];
    let mut report = AssumptionReport::empty(cfg);

    // A1
    let mut growth = Tracker::new(1, "|b| <= C(1+|x|+|y|)", CheckKind::Ratio, cfg);
    let mut lip = Tracker::new(1, "|b-b'| <= C(|x-x'|+|y-y'|)", CheckKind::Ratio, cfg);
    for _ in 0..cfg.probes {
        let t = time(&mut rng, p.horizon);
        let x = in_ball(&mut rng, n, r);
        let y = in_ball(&mut rng, n, r);
        let env = EvalEnv::new(t, &x, &y, &zero_z);
        let b = eval_checked("A1", &p.drift, &env)?;
        if let Some(q) = ratio(norm(&b), c * (1.0 + norm(&x) + norm(&y))) {
            growth.record(q, || Witness {
                t,
                x: x.clone(),
                y: y.clone(),
                ..Witness::default()
            });
        }
        let mask = vary_mask(&mut rng, 2);
        let xb = if mask[0] { partner(&mut rng, &x, r) } else { x.clone() };
        let yb = if mask[1] { partner(&mut rng, &y, r) } else { y.clone() };
        let bb = eval_checked("A1", &p.drift, &EvalEnv::new(t, &xb, &yb, &zero_z))?;
        if let Some(q) = ratio(dist(&b, &bb), c * (dist(&x, &xb) + dist(&y, &yb))) {
            lip.record(q, || Witness {
                t,
                x: x.clone(),
                y: y.clone(),
                x_bar: xb.clone(),
                y_bar: yb.clone(),
                ..Witness::default()
            });
        }
    }
    report.entries.push(growth.finish());
    report.entries.push(lip.finish());

    // A2
    let zero_y = vec![0.0; n];
    let mut growth = Tracker::new(2, "|sigma| <= C(1+|x|)", CheckKind::Ratio, cfg);
    let mut lip = Tracker::new(2, "|sigma-sigma'| <= C|x-x'|", CheckKind::Ratio, cfg);
    for _ in 0..cfg.probes {
        let t = time(&mut rng, p.horizon);
        let x = in_ball(&mut rng, n, r);
        let s = eval_checked("A2", &p.diffusion, &EvalEnv::new(t, &x, &zero_y, &zero_z))?;
        if let Some(q) = ratio(norm(&s), c * (1.0 + norm(&x))) {
            growth.record(q, || Witness {
                t,
                x: x.clone(),
                ..Witness::default()
            });
        }
        let xb = partner(&mut rng, &x, r);
        let sb = eval_checked("A2", &p.diffusion, &EvalEnv::new(t, &xb, &zero_y, &zero_z))?;
        if let Some(q) = ratio(dist(&s, &sb), c * dist(&x, &xb)) {
            lip.record(q, || Witness {
                t,
                x: x.clone(),
                x_bar: xb.clone(),
                ..Witness::default()
            });
        }
    }
    report.entries.push(growth.finish());
    report.entries.push(lip.finish());

    // A3
    let mut bound = Tracker::new(3, "|h| <= C", CheckKind::Ratio, cfg);
    let mut lip = Tracker::new(3, "|h-h'| <= C|x-x'|", CheckKind::Ratio, cfg);
    for _ in 0..cfg.probes {
        let x = in_ball(&mut rng, n, r);
        let h = eval_checked("A3", &p.terminal, &EvalEnv::new(0.0, &x, &zero_y, &zero_z))?;
        if let Some(q) = ratio(norm(&h), c) {
            bound.record(q, || Witness {
                x: x.clone(),
                ..Witness::default()
            });
        }
        let xb = partner(&mut rng, &x, r);
        let hb = eval_checked("A3", &p.terminal, &EvalEnv::new(0.0, &xb, &zero_y, &zero_z))?;
        if let Some(q) = ratio(dist(&h, &hb), c * dist(&x, &xb)) {
            lip.record(q, || Witness {
                x: x.clone(),
                x_bar: xb.clone(),
                ..Witness::default()
            });
        }
    }
    report.entries.push(bound.finish());
    report.entries.push(lip.finish());

    // A4. The growth bound has no x in it, so each (t, y, z) is held fixed
    // while x is scanned.
    const X_SCAN: usize = 4;
    let mut growth = Tracker::new(4, "|g^i| <= C(1+|y|+|z^i|^2)", CheckKind::Ratio, cfg);
    let mut lip = Tracker::new(
        4,
        "|g^i-g^i'| <= C|x-x'|+C|y-y'|+C(1+|z|+|z'|)|z-z'|",
        CheckKind::Ratio,
        cfg,
    );
    for _ in 0..cfg.probes {
        for (i, g) in p.generator.iter().enumerate() {
            let t = time(&mut rng, p.horizon);
            let y = in_ball(&mut rng, n, r);
            let z = in_ball(&mut rng, d, r);
            let rhs = c * (1.0 + norm(&y) + norm(&z).powi(2));
            let mut first = None;
            for _ in 0..X_SCAN {
                let x = in_ball(&mut rng, n, r);
                let env = EvalEnv::new(t, &x, &y, &z);
                let v = g.eval_scalar(&env);
                check_finite("A4", &[v], &env)?;
                if let Some(q) = ratio(v.abs(), rhs) {
                    growth.record(q, || Witness {
                        component: Some(i),
                        t,
                        x: x.clone(),
                        y: y.clone(),
                        z: z.clone(),
                        ..Witness::default()
                    });
                }
                first.get_or_insert((x, v));
            }
            let (x, v) = first.expect("scan is non-empty");
            let mask = vary_mask(&mut rng, 3);
            let xb = if mask[0] { partner(&mut rng, &x, r) } else { x.clone() };
            let yb = if mask[1] { partner(&mut rng, &y, r) } else { y.clone() };
            let zb = if mask[2] { partner(&mut rng, &z, r) } else { z.clone() };
            let envb = EvalEnv::new(t, &xb, &yb, &zb);
            let vb = g.eval_scalar(&envb);
            check_finite("A4", &[vb], &envb)?;
            let rhs = c * dist(&x, &xb)
                + c * dist(&y, &yb)
                + c * (1.0 + norm(&z) + norm(&zb)) * dist(&z, &zb);
            if let Some(q) = ratio((v - vb).abs(), rhs) {
                lip.record(q, || Witness {
                    component: Some(i),
                    t,
                    x: x.clone(),
                    y: y.clone(),
                    z: z.clone(),
                    x_bar: xb.clone(),
                    y_bar: yb.clone(),
                    z_bar: zb.clone(),
                });
            }
        }
    }
    report.entries.push(growth.finish());
    report.entries.push(lip.finish());
    Ok(report)
}

/// `b^i(t,x,y) <= b̄^i(t,x̄,ȳ)` on the cone `x^i = x̄^i`, `x^j <= x̄^j`,
/// `y <= ȳ`. With `lower == upper` this is A5.
pub(crate) fn drift_order(
    lower: &FbsdeProblem,
    upper: &FbsdeProblem,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
    assumption: u8,
    check: &str,
) -> Result<ProbeEntry, ProbeError> {
    let (n, r) = (lower.n, cfg.radius);
    let zero_z = vec![0.0; lower.d];
    let mut tr = Tracker::new(assumption, check, CheckKind::Order, cfg);
    for _ in 0..cfg.probes {
        for i in 0..n {
            let t = time(rng, lower.horizon);
            let x = in_ball(rng, n, r);
            let y = in_ball(rng, n, r);
            let xb = upward(rng, &x, r, Some(i));
            let yb = upward(rng, &y, r, None);
            let env = EvalEnv::new(t, &x, &y, &zero_z);
            let envb = EvalEnv::new(t, &xb, &yb, &zero_z);
            let b = eval_checked(check, &lower.drift, &env)?;
            let bb = eval_checked(check, &upper.drift, &envb)?;
            tr.record(b[i] - bb[i], || Witness {
                component: Some(i),
                t,
                x: x.clone(),
                y: y.clone(),
                x_bar: xb.clone(),
                y_bar: yb.clone(),
                ..Witness::default()
            });
        }
    }
    Ok(tr.finish())
}

/// `h(x) <= h̄(x̄)` componentwise for `x <= x̄`. With `lower == upper` this is A6.
pub(crate) fn terminal_order(
    lower: &FbsdeProblem,
    upper: &FbsdeProblem,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
    assumption: u8,
    check: &str,
) -> Result<ProbeEntry, ProbeError> {
    let (n, r) = (lower.n, cfg.radius);
    let zero_y = vec![0.0; n];
    let zero_z = vec![0.0; lower.d];
    let mut tr = Tracker::new(assumption, check, CheckKind::Order, cfg);
    for _ in 0..cfg.probes {
        let x = in_ball(rng, n, r);
        let xb = upward(rng, &x, r, None);
        let h = eval_checked(check, &lower.terminal, &EvalEnv::new(0.0, &x, &zero_y, &zero_z))?;
        let hb = eval_checked(check, &upper.terminal, &EvalEnv::new(0.0, &xb, &zero_y, &zero_z))?;
        let (i, worst) = h
            .iter()
            .zip(&hb)
            .map(|(a, b)| a - b)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        tr.record(worst, || Witness {
            component: Some(i),
            x: x.clone(),
            x_bar: xb.clone(),
            ..Witness::default()
        });
    }
    Ok(tr.finish())
}

/// `g^i(t,x,y,z) <= ḡ^i(t,x̄,ȳ,z)` on the cone `y^i = ȳ^i`, `y^j <= ȳ^j`,
/// `x <= x̄`, same `z^i`. With `lower == upper` this is A7.
pub(crate) fn generator_order(
    lower: &FbsdeProblem,
    upper: &FbsdeProblem,
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
    assumption: u8,
    check: &str,
) -> Result<ProbeEntry, ProbeError> {
    let (n, d, r) = (lower.n, lower.d, cfg.radius);
    let mut tr = Tracker::new(assumption, check, CheckKind::Order, cfg);
    for _ in 0..cfg.probes {
        for i in 0..n {
            let t = time(rng, lower.horizon);
            let x = in_ball(rng, n, r);
            let y = in_ball(rng, n, r);
            let z = in_ball(rng, d, r);
            let xb = upward(rng, &x, r, None);
            let yb = upward(rng, &y, r, Some(i));
            let env = EvalEnv::new(t, &x, &y, &z);
            let envb = EvalEnv::new(t, &xb, &yb, &z);
            let g = lower.generator[i].eval_scalar(&env);
            let gb = upper.generator[i].eval_scalar(&envb);
            check_finite(check, &[g], &env)?;
            check_finite(check, &[gb], &envb)?;
            tr.record(g - gb, || Witness {
                component: Some(i),
                t,
                x: x.clone(),
                y: y.clone(),
                z: z.clone(),
                x_bar: xb.clone(),
                y_bar: yb.clone(),
                ..Witness::default()
            });
        }
    }
    Ok(tr.finish())
}

/// Order conditions A5 (drift), A6 (terminal) and A7 (generator).
pub fn probe_quasi_monotonicity(
    p: &FbsdeProblem,
    cfg: &ProbeConfig,
) -> Result<AssumptionReport, ProbeError> {
    // distinct stream from the growth probes
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut report = AssumptionReport::empty(cfg);
    report.entries.push(drift_order(
        p,
        p,
        cfg,
        &mut rng,
        5,
        "b^i nondecreasing in x^j (j != i) and y",
    )?);
    report.entries.push(terminal_order(
        p,
        p,
        cfg,
        &mut rng,
        6,
        "h nondecreasing in x",
    )?);
    report.entries.push(generator_order(
        p,
        p,
        cfg,
        &mut rng,
        7,
        "g^i nondecreasing in x and y^j (j != i)",
    )?);
    Ok(report)
}

/// All seven assumptions.
pub fn check_assumptions(
    p: &FbsdeProblem,
    cfg: &ProbeConfig,
) -> Result<AssumptionReport, ProbeError> {
    Ok(probe_growth_lipschitz(p, cfg)?.merge(probe_quasi_monotonicity(p, cfg)?))
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
