use fbsde_cli::commands::{read_dump, read_solve_outputs, SolveNorms, SolveResiduals};
use fbsde_cli::output::{self, read_gaps, read_json, ErrorRecord};
use fbsde_core::comparison::ComparisonReport;
use fbsde_core::picard::ConvergenceReport;
use fbsde_core::probes::AssumptionReport;
use std::path::{Path, PathBuf};
use std::process::Command;

fn fbsde(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fbsde")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec![cmd, config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fbsde(&args)
}

const SMALL: &str = r#""numerics": {"paths": 1000, "steps": 10}"#;

fn inline(drift: &str, terminal: &str, generator: &str) -> String {
    format!(
        r#"{{"problem": {{"inline": {{"n": 1, "d": 1, "T": 1, "x0": [0], "drift": ["{drift}"],
            "diffusion": [["1"]], "terminal": ["{terminal}"], "generator": ["{generator}"], "C": 1}}}},
            "probes": {{"probes": 300}}, {SMALL}}}"#
    )
}

#[test]
fn trivial_zero_solves_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &format!(r#"{{"problem": {{"registry": "trivial-zero"}}, {SMALL}}}"#));
    let out = dir.path().join("out");
    let (code, stdout, _) = run("solve", &cfg, &out, &[]);
    assert_eq!(code, 0, "{stdout}");
    let o = read_solve_outputs(&out).unwrap();
    assert!(o.nodes.iter().all(|r| r.y_mean.abs() < 1e-12));
    assert!(o.assumptions.pass());
}

#[test]
fn decoupled_history_converges_at_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &format!(r#"{{"problem": {{"registry": "decoupled-quadratic"}}, {SMALL}}}"#),
    );
    let out = dir.path().join("out");
    assert_eq!(run("solve", &cfg, &out, &[]).0, 0);
    let o = read_solve_outputs(&out).unwrap();
    assert_eq!(o.report.converged_at, Some(1));
    assert_eq!(o.history.len(), 2);
    assert_eq!((o.history[1].supdiff_x, o.history[1].supdiff_y), (0.0, 0.0));
}

#[test]
fn config_errors_exit_2_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"problem": {"registry": "trivial-zero"}, "sigma_matrix": [[1]]}"#,
    );
    let (code, _, stderr) = run("solve", &cfg, &out, &[]);
    assert_eq!(code, 2);
    assert!(stderr.contains("sigma_matrix"));
    let rec: ErrorRecord = read_json(&out.join(output::ERROR)).unwrap();
    assert_eq!((rec.kind.as_str(), rec.exit_code), ("config", 2));

    let cfg = write_config(dir.path(), "dsl.json", &inline("0", "0", "z1^"));
    let (code, _, stderr) = run("solve", &cfg, &out, &[]);
    assert_eq!(code, 2);
    assert!(stderr.contains("position 4"), "{stderr}");

    let missing = dir.path().join("missing.json");
    assert_eq!(fbsde(&["check", missing.to_str().unwrap()]).0, 2);
}

#[test]
fn check_accepts_and_rejects_with_witnesses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "zero.json", &format!(r#"{{"problem": {{"registry": "trivial-zero"}}, {SMALL}}}"#));
    assert_eq!(run("check", &cfg, &out, &[]).0, 0);

    for (name, body, assumption) in [
        ("lin.json", inline("2*x1", "0", "0"), 1u8),
        ("neg.json", inline("0", "-x1", "0"), 6u8),
    ] {
        let cfg = write_config(dir.path(), name, &body);
        let (code, stdout, _) = run("check", &cfg, &out, &[]);
        assert_eq!(code, 3, "{stdout}");
        let rep: AssumptionReport = read_json(&out.join(output::ASSUMPTIONS)).unwrap();
        assert_eq!(rep.assumption_passes(assumption), Some(false));
        let f = rep.failures().find(|e| e.assumption == assumption).unwrap();
        assert!(f.witness.is_some());
    }
}

#[test]
fn compare_exit_codes_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let pair = |b: &str| {
        format!(
            r#"{{"problem": {{"registry": "coupled-smooth", "params": {{"C": 1.2}}}},
                "problem_b": {{"registry": "coupled-smooth", "params": {b}}},
                "probes": {{"probes": 300}}, {SMALL}}}"#
        )
    };
    let same = write_config(dir.path(), "same.json", &pair(r#"{"C": 1.2}"#));
    assert_eq!(run("compare", &same, &out, &[]).0, 0);
    let gaps = read_gaps(&out.join(output::GAPS)).unwrap();
    assert_eq!(gaps.len(), 11);
    assert!(gaps.iter().all(|g| g.mean_gap_x == 0.0 && g.mean_gap_y == 0.0));

    let shifted = write_config(dir.path(), "shift.json", &pair(r#"{"C": 1.2, "terminal_shift": 0.1}"#));
    assert_eq!(run("compare", &shifted, &out, &["--no-projection"]).0, 0);
    let rep: ComparisonReport = read_json(&out.join(output::COMPARISON)).unwrap();
    assert!(rep.y.mean_gap_node0[0] > 0.0 && rep.y.gap_significant());
    assert!(!rep.lower.projection);

    let reversed = write_config(dir.path(), "rev.json", &pair(r#"{"C": 1.2, "drift_shift": -1}"#));
    assert_eq!(run("compare", &reversed, &out, &[]).0, 3);
    let rec: ErrorRecord = read_json(&out.join(output::ERROR)).unwrap();
    assert_eq!(rec.kind, "hypothesis");

    let single = write_config(dir.path(), "single.json", r#"{"problem": {"registry": "trivial-zero"}}"#);
    assert_eq!(run("compare", &single, &out, &[]).0, 2);
}

#[test]
fn overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": {"registry": "coupled-smooth"}}"#);
    let args = ["--paths", "500", "--steps", "8", "--seed", "7", "--tol", "0.01", "--max-iter", "9"];
    let (code, _, stderr) = run("solve", &cfg, &out, &args);
    assert_eq!(code, 0, "{stderr}");
    let r: ConvergenceReport = read_json(&out.join(output::REPORT)).unwrap();
    assert_eq!((r.paths, r.steps, r.seed, r.tol), (500, 8, 7, 0.01));
    assert!(r.projection);
}

#[test]
fn not_converged_exits_1_but_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &format!(r#"{{"problem": {{"registry": "coupled-smooth"}}, {SMALL}}}"#));
    let (code, _, _) = run("solve", &cfg, &out, &["--max-iter", "1"]);
    assert_eq!(code, 1);
    assert!(out.join(output::HISTORY).exists());
    let rec: ErrorRecord = read_json(&out.join(output::ERROR)).unwrap();
    assert_eq!(rec.kind, "numerical");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn solve_is_deterministic_and_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": {"registry": "coupled-pair"}, "numerics": {"paths": 800, "steps": 10}, "dump_paths": true}"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("solve", &cfg, &a, &[]).0, 0);
    assert_eq!(run("solve", &cfg, &b, &[]).0, 0);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 9);
    assert_eq!(fa, fb);

    let o = read_solve_outputs(&a).unwrap();
    let again = dir.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    output::write_json(&again.join(output::REPORT), &o.report).unwrap();
    output::write_json(&again.join(output::NORMS), &o.norms).unwrap();
    output::write_json(&again.join(output::RESIDUALS), &o.residuals).unwrap();
    output::write_json(&again.join(output::ASSUMPTIONS), &o.assumptions).unwrap();
    output::write_history(&again.join(output::HISTORY), &o.report).unwrap();
    for name in [output::REPORT, output::NORMS, output::RESIDUALS, output::ASSUMPTIONS, output::HISTORY] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
    let _: SolveNorms = read_json(&a.join(output::NORMS)).unwrap();
    let _: SolveResiduals = read_json(&a.join(output::RESIDUALS)).unwrap();
    let z = read_dump(&a, "z.bin").unwrap();
    assert_eq!(z.shape(), (800, 10, 4));
    let x = read_dump(&a, "x.bin").unwrap();
    output::write_paths(&again.join("x.bin"), &x, output::PathKind::State, 2, 2).unwrap();
    assert_eq!(std::fs::read(a.join("x.bin")).unwrap(), std::fs::read(again.join("x.bin")).unwrap());
}

#[test]
fn models_lists_registry() {
    let (code, stdout, _) = fbsde(&["models"]);
    assert_eq!(code, 0);
    for name in fbsde_core::registry::NAMES {
        assert!(stdout.contains(name));
    }
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".json") && !name.contains("schema") {
            fbsde_cli::config::load_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
            count += 1;
        }
    }
    assert!(count >= 5);
}
