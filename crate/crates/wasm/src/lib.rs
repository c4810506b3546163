//! Browser bindings. Every export takes plain arguments and returns a JSON
//! string; errors come back as a thrown string.

use fbsde_core::comparison::run_comparison;
use fbsde_core::picard::{run, IterationConfig, PicardError};
use fbsde_core::probes::{check_assumptions, ProbeConfig};
use fbsde_core::registry;
use fbsde_core::simulation::PathArray;
use serde::Serialize;
use std::collections::BTreeMap;
use wasm_bindgen::prelude::*;

/// Upper bounds for in-browser runs.
const MAX_PATHS: usize = 20_000;
const MAX_STEPS: usize = 200;

#[derive(Serialize)]
struct ModelInfo {
    name: &'static str,
    description: &'static str,
    defaults: BTreeMap<&'static str, f64>,
}

#[derive(Serialize)]
struct SolveSummary {
    converged: bool,
    converged_at: Option<usize>,
    iterations: usize,
    eps_mono: f64,
    supdiff_y: Vec<f64>,
    t: Vec<f64>,
    /// Per-node mean of each component of `Y`.
    y_mean: Vec<Vec<f64>>,
    /// Per-node mean of the bounding process `U` and the seed `Y⁰`.
    u_mean: Vec<Vec<f64>>,
    seed_mean: Vec<Vec<f64>>,
    backward_rms: f64,
}

#[derive(Serialize)]
struct CompareSummary {
    pass: bool,
    violation_x: f64,
    violation_y: f64,
    t: Vec<f64>,
    gap_y: Vec<Vec<f64>>,
    gap_x: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct CheckLine {
    assumption: u8,
    check: String,
    pass: bool,
    worst: f64,
    threshold: f64,
}

fn params(json: &str) -> Result<BTreeMap<String, f64>, String> {
    if json.trim().is_empty() {
        return Ok(BTreeMap::new());
    }
    serde_json::from_str(json).map_err(|e| format!("parameters: {e}"))
}

fn numerics(paths: usize, steps: usize, seed: u64) -> Result<IterationConfig, String> {
    if !(10..=MAX_PATHS).contains(&paths) || !(1..=MAX_STEPS).contains(&steps) {
        return Err(format!("paths must lie in 10..={MAX_PATHS} and steps in 1..={MAX_STEPS}"));
    }
    Ok(IterationConfig {
        paths,
        steps,
        seed,
        ..Default::default()
    })
}

fn node_means(a: &PathArray) -> Vec<Vec<f64>> {
    let m = a.paths() as f64;
    (0..a.nodes())
        .map(|j| {
            let mut acc = vec![0.0; a.width()];
            for row in a.node(j).chunks(a.width()) {
                acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            acc.into_iter().map(|s| s / m).collect()
        })
        .collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

pub fn models_json() -> Result<String, String> {
    let list = registry::NAMES
        .iter()
        .map(|&name| {
            Ok(ModelInfo {
                name,
                description: registry::describe(name).unwrap_or(""),
                defaults: registry::defaults(name).map_err(|e| e.to_string())?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&list)
}

pub fn solve_json(model: &str, params_json: &str, paths: usize, steps: usize, seed: u64) -> Result<String, String> {
    let p = registry::build(model, &params(params_json)?).map_err(|e| e.to_string())?;
    let sol = match run(&p, &numerics(paths, steps, seed)?) {
        Ok(s) => s,
        Err(PicardError::NotConverged(s) | PicardError::ResidualBudget(s)) => *s,
        Err(e) => return Err(e.to_string()),
    };
    let st = &sol.state;
    let r = &sol.report;
    to_json(&SolveSummary {
        converged: r.converged,
        converged_at: r.converged_at,
        iterations: r.iterations,
        eps_mono: r.eps_mono,
        supdiff_y: r.history.iter().map(|h| h.supdiff_y).collect(),
        t: (0..=st.grid.steps).map(|j| st.grid.t(j)).collect(),
        y_mean: node_means(&st.y),
        u_mean: node_means(&st.u),
        seed_mean: node_means(&st.s),
        backward_rms: r.residuals.backward.rms,
    })
}

pub fn compare_json(
    model: &str,
    lower_json: &str,
    upper_json: &str,
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<String, String> {
    let lower = registry::build(model, &params(lower_json)?).map_err(|e| e.to_string())?;
    let upper = registry::build(model, &params(upper_json)?).map_err(|e| e.to_string())?;
    let cfg = IterationConfig {
        projection: false,
        ..numerics(paths, steps, seed)?
    };
    let probes = ProbeConfig::new(300, 5.0, seed);
    let r = run_comparison(&lower, &upper, &cfg, &probes).map_err(|e| e.to_string())?;
    to_json(&CompareSummary {
        pass: r.pass,
        violation_x: r.x.violation.fraction,
        violation_y: r.y.violation.fraction,
        t: r.gaps.iter().map(|g| g.t).collect(),
        gap_y: r.gaps.iter().map(|g| g.mean_gap_y.clone()).collect(),
        gap_x: r.gaps.iter().map(|g| g.mean_gap_x.clone()).collect(),
    })
}

pub fn check_json(model: &str, params_json: &str) -> Result<String, String> {
    let p = registry::build(model, &params(params_json)?).map_err(|e| e.to_string())?;
    let rep = check_assumptions(&p, &ProbeConfig::new(500, 5.0, 0)).map_err(|e| e.to_string())?;
    let lines: Vec<CheckLine> = rep
        .entries
        .iter()
        .map(|e| CheckLine {
            assumption: e.assumption,
            check: e.check.clone(),
            pass: e.pass,
            worst: e.worst,
            threshold: e.threshold,
        })
        .collect();
    to_json(&lines)
}

#[wasm_bindgen]
pub fn models() -> Result<String, JsValue> {
    models_json().map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn solve(model: &str, params_json: &str, paths: usize, steps: usize, seed: u32) -> Result<String, JsValue> {
    solve_json(model, params_json, paths, steps, seed as u64).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn compare(
    model: &str,
    lower_json: &str,
    upper_json: &str,
    paths: usize,
    steps: usize,
    seed: u32,
) -> Result<String, JsValue> {
    compare_json(model, lower_json, upper_json, paths, steps, seed as u64).map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn check(model: &str, params_json: &str) -> Result<String, JsValue> {
    check_json(model, params_json).map_err(JsValue::from)
}
