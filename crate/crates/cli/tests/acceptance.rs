//! Acceptance run: one pass/fail line per criterion. Failures are reported
//! but only change the exit status when `FBSDE_ACCEPTANCE_STRICT` is set.

use fbsde_cli::commands::{cmd_solve, EXIT_OK};
use fbsde_cli::config::{parse_config, resolve};
use fbsde_core::backward::{bounding_u0_closed_form, solve_bounding_u, solve_seed_y0, BackwardOpts};
use fbsde_core::comparison::{run_comparison, verify_ordering_hypotheses};
use fbsde_core::diagnostics::{bmo2_estimate, estimate_norms, phi_bound_check, Conditioning};
use fbsde_core::expr::{evaluate, evaluate_batch, parse, Dims, EvalEnv};
use fbsde_core::picard::{run, IterationConfig};
use fbsde_core::probes::{check_assumptions, ProbeConfig};
use fbsde_core::regression::RegressionBasis;
use fbsde_core::registry;
use fbsde_core::simulation::{make_grid, sample_brownian, PathArray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

type Outcome = Result<String, String>;

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn mean_at(a: &PathArray, j: usize, i: usize) -> f64 {
    let m = a.paths();
    (0..m).map(|p| a.get(p, j)[i]).sum::<f64>() / m as f64
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bounding_closed_forms() -> Outcome {
    let p = registry::get("bounding-ode").map_err(|e| e.to_string())?;
    let grid = make_grid(1.0, 1000).map_err(|e| e.to_string())?;
    let bundle = sample_brownian(200, &grid, 1, 42).map_err(|e| e.to_string())?;
    let basis = RegressionBasis::polynomial(1, 1);
    let opts = BackwardOpts::default();
    let u = solve_bounding_u(&p, &grid, &bundle, &basis, &opts).map_err(|e| e.to_string())?;
    let s = solve_seed_y0(&p, &grid, &bundle, &basis, &opts).map_err(|e| e.to_string())?;
    let exact = bounding_u0_closed_form(1.0, 1.0);
    let (u0, s0) = (mean_at(&u.y, 0, 0), mean_at(&s.y, 0, 0));
    let (eu, es) = ((u0 - exact).abs() / exact, (s0 + exact).abs() / exact);
    check(
        eu <= 0.01 && es <= 0.01,
        format!("U0 {u0:.5} vs {exact:.5} (rel {eu:.2e}); Y0 seed {s0:.5} vs {:.5} (rel {es:.2e})", -exact),
    )
}

fn cole_hopf_mc(samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC01E);
    rng.set_stream(u64::MAX);
    let mean = (0..samples)
        .map(|_| rng.sample::<f64, _>(StandardNormal).tanh().exp())
        .sum::<f64>()
        / samples as f64;
    mean.ln()
}

fn cole_hopf() -> Outcome {
    let p = registry::get("decoupled-quadratic").map_err(|e| e.to_string())?;
    let cfg = IterationConfig {
        paths: 100_000,
        steps: 50,
        degree: 3,
        projection: false,
        ..Default::default()
    };
    let s = run(&p, &cfg).map_err(|e| e.to_string())?;
    let y0 = mean_at(&s.state.y, 0, 0);
    let oracle = cole_hopf_mc(1_000_000);
    let rel = (y0 - oracle).abs() / oracle.abs();
    check(rel <= 0.02, format!("Y0 {y0:.5} vs Monte Carlo {oracle:.5} (rel {rel:.2e})"))
}

fn envelope() -> Outcome {
    let p = registry::get("coupled-smooth").map_err(|e| e.to_string())?;
    let cfg = IterationConfig {
        projection: false,
        ..Default::default()
    };
    let s = run(&p, &cfg).map_err(|e| e.to_string())?;
    let worst = s
        .report
        .history
        .iter()
        .map(|h| (h.k, h.envelope.max_fraction()))
        .fold((0, 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    check(
        worst.1 <= 0.01,
        format!("worst envelope violation {:.3}% at k={} (limit 1%)", 100.0 * worst.1, worst.0),
    )
}

fn fixed_point() -> Outcome {
    let p = registry::get("decoupled-quadratic").map_err(|e| e.to_string())?;
    let s = run(&p, &IterationConfig::default()).map_err(|e| e.to_string())?;
    let r = &s.report;
    let second = r.history.get(1).map(|h| (h.supdiff_x, h.supdiff_y));
    check(
        r.converged_at == Some(1) && second == Some((0.0, 0.0)),
        format!("converged_at {:?}, k=2 sup-differences {second:?}", r.converged_at),
    )
}

fn comparison() -> Outcome {
    let base = params(&[("C", 1.2)]);
    let lower = registry::build("coupled-smooth", &base).map_err(|e| e.to_string())?;
    let cfg = IterationConfig {
        projection: false,
        ..Default::default()
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for (key, value) in [("terminal_shift", 0.1), ("x0", 0.5)] {
        let mut b = base.clone();
        b.insert(key.to_string(), value);
        let upper = registry::build("coupled-smooth", &b).map_err(|e| e.to_string())?;
        let r = run_comparison(&lower, &upper, &cfg, &ProbeConfig::default()).map_err(|e| e.to_string())?;
        let good = r.pass && r.y.gap_significant();
        ok &= good;
        lines.push(format!(
            "{key}+{value}: violations X {:.3}% Y {:.3}%, node-0 gap Y {:.4} (se {:.1e})",
            100.0 * r.x.violation.fraction,
            100.0 * r.y.violation.fraction,
            r.y.mean_gap_node0[0],
            r.y.se_node0[0]
        ));
    }
    check(ok, lines.join("; "))
}

fn residuals() -> Outcome {
    let p = registry::get("coupled-smooth").map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (steps, paths) in [(50, 50_000), (100, 200_000)] {
        let cfg = IterationConfig {
            paths,
            steps,
            projection: false,
            ..Default::default()
        };
        let s = run(&p, &cfg).map_err(|e| e.to_string())?;
        let r = &s.report.residuals;
        out.push((steps, paths, r.backward.rms, r.forward.max));
    }
    let ok = out[1].2 < out[0].2 && out.iter().all(|o| o.3 <= 1e-12);
    let msg = out
        .iter()
        .map(|(n, m, b, f)| format!("N={n} M={m}: backward rms {b:.3e}, forward max {f:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, msg)
}

fn norm_algebra() -> Outcome {
    let cfg = IterationConfig {
        paths: 5000,
        steps: 50,
        ..Default::default()
    };
    let ps = [2.0, 4.0, 8.0];
    let mut ok = true;
    let mut notes = Vec::new();
    for name in ["trivial-zero", "decoupled-quadratic", "coupled-smooth", "coupled-pair"] {
        let p = registry::get(name).map_err(|e| e.to_string())?;
        let s = run(&p, &cfg).map_err(|e| e.to_string())?;
        let st = &s.state;
        for a in [&st.x, &st.y, &st.z] {
            let rep = estimate_norms(a, None, &st.grid, &ps, None).map_err(|e| e.to_string())?;
            let v: Vec<f64> = rep.s_p.iter().map(|n| n.value).collect();
            ok &= rep.s_inf >= v[2] && v[2] >= v[1] && v[1] >= v[0];
        }
        if s.report.converged {
            let cond = Conditioning {
                path: &st.x,
                basis: &st.basis,
            };
            let phi = phi_bound_check(st.u.max_abs(), &st.z, &p, &st.grid, Some(cond)).map_err(|e| e.to_string())?;
            ok &= phi.pass;
            notes.push(format!("{name} {:.3}<={:.3}", phi.lhs, phi.ceiling));
        }
    }
    let grid = make_grid(1.0, 50).map_err(|e| e.to_string())?;
    let zero = bmo2_estimate(&PathArray::zeros(100, 50, 1), &grid, None).map_err(|e| e.to_string())?;
    ok &= zero == 0.0;
    check(ok, format!("norm chains ordered; BMO2(0) = {zero}; phi ceilings {}", notes.join(", ")))
}

fn probes() -> Outcome {
    let cfg = ProbeConfig::default();
    let mut ok = true;
    for name in registry::NAMES {
        let p = registry::get(name).map_err(|e| e.to_string())?;
        ok &= check_assumptions(&p, &cfg).map_err(|e| e.to_string())?.pass();
    }
    let inline = |drift: &str, terminal: &str| {
        fbsde_core::model::problem_from_exprs(1, 1, 1.0, vec![0.0], &[drift], &["1"], &[terminal], &["0"], 1.0)
            .map_err(|e| e.to_string())
    };
    let mut found = Vec::new();
    for (p, a) in [(inline("2*x1", "0")?, 1u8), (inline("0", "-x1")?, 6u8)] {
        let rep = check_assumptions(&p, &cfg).map_err(|e| e.to_string())?;
        let hit = rep.failures().any(|e| e.assumption == a && e.witness.is_some());
        ok &= hit;
        found.push(format!("A{a} {}", if hit { "rejected" } else { "missed" }));
    }
    let lower = registry::get("coupled-smooth").map_err(|e| e.to_string())?;
    let upper = registry::build("coupled-smooth", &params(&[("drift_shift", -1.0)])).map_err(|e| e.to_string())?;
    let rep = verify_ordering_hypotheses(&lower, &upper, &cfg).map_err(|e| e.to_string())?;
    let hit = rep.failures().any(|e| e.assumption == 5 && e.witness.is_some());
    ok &= hit;
    found.push(format!("drift order {}", if hit { "rejected" } else { "missed" }));
    check(ok, format!("{} registry models pass; {}", registry::NAMES.len(), found.join(", ")))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap_or_default()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let out = tmp.path().join(tag);
        let text = format!(
            r#"{{"problem": {{"registry": "coupled-pair"}}, "numerics": {{"paths": 2000, "steps": 20}},
                "dump_paths": true, "output_dir": {:?}}}"#,
            out.to_string_lossy()
        );
        let cfg = parse_config(&text, Path::new("acceptance.json")).map_err(|e| e.to_string())?;
        let exp = resolve(cfg).map_err(|e| e.to_string())?;
        let code = cmd_solve(&exp);
        if code != EXIT_OK {
            return Err(format!("solve exited {code}"));
        }
        runs.push(snapshot(&out));
    }
    check(
        runs[0] == runs[1] && !runs[0].is_empty(),
        format!("{} output files bit-identical across two runs", runs[0].len()),
    )
}

fn grammar() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/grammar.tsv");
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let (x, y, z) = ([3.0, -1.0], [1.0, 0.5], [1.0, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut cases, mut bad) = (0, Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        cases += 1;
        let f: Vec<&str> = line.split('\t').collect();
        let (n, d) = f[1].split_once(',').unwrap_or(("0", "0"));
        let (n, d): (usize, usize) = (n.parse().unwrap_or(0), d.parse().unwrap_or(0));
        let parsed = parse(f[2], Dims::new(n, d));
        let env = EvalEnv::new(2.0, &x[..n], &y[..n], &z[..d]);
        let good = match (f[0], parsed) {
            ("accept", Ok(ast)) => {
                let value = evaluate(&ast, &env);
                let exact = match (f[3], &value) {
                    ("nonfinite", v) => v.is_err(),
                    (want, Ok(got)) => want
                        .parse::<f64>()
                        .is_ok_and(|w| (got - w).abs() <= 1e-12 * w.abs().max(1.0)),
                    _ => false,
                };
                let data: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..50)
                    .map(|_| {
                        let t = rng.random_range(0.0..1.0);
                        let mut v = |k: usize| (0..k).map(|_| rng.random_range(0.1..4.0)).collect::<Vec<f64>>();
                        (t, v(n), v(n), v(d))
                    })
                    .collect();
                let envs: Vec<EvalEnv> = data.iter().map(|(t, x, y, z)| EvalEnv::new(*t, x, y, z)).collect();
                let bitwise = match evaluate_batch(&ast, &envs) {
                    Ok(batch) => envs
                        .iter()
                        .zip(&batch)
                        .all(|(e, b)| evaluate(&ast, e).is_ok_and(|s| s.to_bits() == b.to_bits())),
                    Err(_) => envs.iter().any(|e| evaluate(&ast, e).is_err()),
                };
                exact && bitwise
            }
            ("reject", Err(e)) => f[4].parse::<usize>().is_ok_and(|pos| e.position() == pos),
            _ => false,
        };
        if !good {
            bad.push(i + 1);
        }
    }
    check(
        bad.is_empty() && cases >= 30,
        format!("{cases} corpus lines, mismatches at lines {bad:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("bounding equations match closed forms", bounding_closed_forms),
        ("quadratic generator matches Cole-Hopf oracle", cole_hopf),
        ("iterates stay inside the monotone envelope", envelope),
        ("decoupled instance is a fixed point after one step", fixed_point),
        ("comparison pairs are ordered with significant gaps", comparison),
        ("residuals shrink under refinement", residuals),
        ("norm algebra and energy ceiling", norm_algebra),
        ("assumption probes accept and reject", probes),
        ("solve output is deterministic", determinism),
        ("expression corpus and batch evaluation", grammar),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("[PASS] criterion {}: {name}: {msg} ({secs:.1}s)", i + 1),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name}: {msg} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var_os("FBSDE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
