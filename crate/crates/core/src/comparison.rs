//! Ordering of solutions for two problems with ordered coefficients, checked
//! pathwise on shared noise.

use crate::picard::{run_with_bundle, sample_bundle, ConvergenceReport, IterationConfig, PicardError, Violation};
use crate::model::FbsdeProblem;
use crate::probes::{
    drift_order, generator_order, seeded, terminal_order, AssumptionReport, CheckKind, ProbeConfig,
    ProbeEntry, ProbeError, SampledRegion, Witness,
};
use crate::simulation::PathArray;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("problems differ in {0}; both must share n, d and T")]
    Dimension(&'static str),
    #[error("the two problems must share one diffusion coefficient")]
    SigmaMismatch,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("ordering hypotheses fail: {}", failed_checks(.0))]
    Hypothesis(Box<AssumptionReport>),
    #[error("{which} problem: {source}")]
    Run {
        which: &'static str,
        #[source]
        source: PicardError,
    },
}

fn failed_checks(r: &AssumptionReport) -> String {
    r.failures().map(|e| e.check.as_str()).collect::<Vec<_>>().join("; ")
}

/// Probes `x₀ ≤ x̄₀` and the cross-problem drift, terminal and generator
/// inequalities on the same ordered cones as the single-problem order
/// conditions (`j ≠ i` where an index is pinned).
pub fn verify_ordering_hypotheses(
    lower: &FbsdeProblem,
    upper: &FbsdeProblem,
    cfg: &ProbeConfig,
) -> Result<AssumptionReport, ComparisonError> {
    if lower.n != upper.n {
        return Err(ComparisonError::Dimension("n"));
    }
    if lower.d != upper.d {
        return Err(ComparisonError::Dimension("d"));
    }
    if lower.horizon != upper.horizon {
        return Err(ComparisonError::Dimension("T"));
    }
    if !lower.diffusion.same_definition(&upper.diffusion) {
        return Err(ComparisonError::SigmaMismatch);
    }
    let mut rng = seeded(cfg.seed, 2);
    let (i, gap) = lower
        .x0
        .iter()
        .zip(&upper.x0)
        .map(|(a, b)| a - b)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let x0_entry = ProbeEntry {
        assumption: 0,
        check: "x0 <= x0'".into(),
        kind: CheckKind::Order,
        probes: 1,
        worst: gap.max(0.0),
        threshold: cfg.order_tolerance,
        pass: gap <= cfg.order_tolerance,
        witness: Some(Witness {
            component: Some(i),
            x: lower.x0.clone(),
            x_bar: upper.x0.clone(),
            ..Witness::default()
        }),
    };
    let entries = vec![
        x0_entry,
        drift_order(lower, upper, cfg, &mut rng, 5, "b^i(x,y) <= b'^i(x',y') on the ordered cone")?,
        terminal_order(lower, upper, cfg, &mut rng, 6, "h(x) <= h'(x') for x <= x'")?,
        generator_order(lower, upper, cfg, &mut rng, 7, "g^i(x,y,z) <= g'^i(x',y',z) on the ordered cone")?,
    ];
    Ok(AssumptionReport {
        region: SampledRegion {
            radius: cfg.radius,
            probes: cfg.probes,
            seed: cfg.seed,
        },
        entries,
    })
}

/// Ordering statistics of one process across the two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    /// Triples with `V > V̄ + ε_mono`.
    pub violation: Violation,
    /// Per component, mean over paths of `V̄ − V` at node 0.
    pub mean_gap_node0: Vec<f64>,
    pub se_node0: Vec<f64>,
}

impl OrderStats {
    fn measure(lower: &PathArray, upper: &PathArray, eps: f64) -> Self {
        let w = lower.width();
        let m = lower.paths() as f64;
        let mut mean = vec![0.0; w];
        let mut sq = vec![0.0; w];
        for (a, b) in lower.node(0).chunks_exact(w).zip(upper.node(0).chunks_exact(w)) {
            for i in 0..w {
                mean[i] += b[i] - a[i];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (a, b) in lower.node(0).chunks_exact(w).zip(upper.node(0).chunks_exact(w)) {
            for i in 0..w {
                sq[i] += (b[i] - a[i] - mean[i]).powi(2);
            }
        }
        let se = sq
            .iter()
            .map(|s| if m > 1.0 { (s / (m - 1.0)).sqrt() / m.sqrt() } else { 0.0 })
            .collect();
        Self {
            violation: Violation::measure(lower, upper, eps),
            mean_gap_node0: mean,
            se_node0: se,
        }
    }

    /// Every component's node-0 gap is positive and above three standard
    /// errors.
    pub fn gap_significant(&self) -> bool {
        self.mean_gap_node0
            .iter()
            .zip(&self.se_node0)
            .all(|(g, s)| *g > 0.0 && *g > 3.0 * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGap {
    pub node: usize,
    pub t: f64,
    pub mean_gap_x: Vec<f64>,
    pub mean_gap_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub hypotheses: AssumptionReport,
    pub x: OrderStats,
    pub y: OrderStats,
    pub eps_mono: f64,
    pub alarm: f64,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub degree: usize,
    pub identical_outputs: bool,
    pub pass: bool,
    pub gaps: Vec<NodeGap>,
    pub lower: ConvergenceReport,
    pub upper: ConvergenceReport,
}

fn node_gaps(lower: &PathArray, upper: &PathArray, j: usize) -> Vec<f64> {
    let w = lower.width();
    let mut out = vec![0.0; w];
    for (a, b) in lower.node(j).chunks_exact(w).zip(upper.node(j).chunks_exact(w)) {
        for i in 0..w {
            out[i] += b[i] - a[i];
        }
    }
    out.iter_mut().for_each(|v| *v /= lower.paths() as f64);
    out
}

/// Runs the iteration on both problems with one shared bundle and measures
/// `X ≤ X̄`, `Y ≤ Ȳ` over every `(path, node, component)`. `Z` is not
/// compared.
pub fn run_comparison(
    lower: &FbsdeProblem,
    upper: &FbsdeProblem,
    cfg: &IterationConfig,
    probes: &ProbeConfig,
) -> Result<ComparisonReport, ComparisonError> {
    let hypotheses = verify_ordering_hypotheses(lower, upper, probes)?;
    if !hypotheses.pass() {
        return Err(ComparisonError::Hypothesis(Box::new(hypotheses)));
    }
    let (grid, bundle) = sample_bundle(lower, cfg).map_err(|source| ComparisonError::Run {
        which: "lower",
        source,
    })?;
    let bundle = Arc::new(bundle);
    let a = run_with_bundle(lower, cfg, grid.clone(), bundle.clone())
        .map_err(|source| ComparisonError::Run { which: "lower", source })?;
    let b = run_with_bundle(upper, cfg, grid.clone(), bundle)
        .map_err(|source| ComparisonError::Run { which: "upper", source })?;
    let eps = a.state.eps_mono.max(b.state.eps_mono);
    let x = OrderStats::measure(&a.state.x, &b.state.x, eps);
    let y = OrderStats::measure(&a.state.y, &b.state.y, eps);
    let gaps = (0..=grid.steps)
        .map(|j| NodeGap {
            node: j,
            t: grid.t(j),
            mean_gap_x: node_gaps(&a.state.x, &b.state.x, j),
            mean_gap_y: node_gaps(&a.state.y, &b.state.y, j),
        })
        .collect();
    let pass = x.violation.fraction <= cfg.alarm && y.violation.fraction <= cfg.alarm;
    Ok(ComparisonReport {
        hypotheses,
        eps_mono: eps,
        alarm: cfg.alarm,
        seed: cfg.seed,
        paths: cfg.paths,
        steps: cfg.steps,
        degree: cfg.degree,
        identical_outputs: a.state.x == b.state.x && a.state.y == b.state.y,
        pass,
        x,
        y,
        gaps,
        lower: a.report,
        upper: b.report,
    })
}
