//! Experiment configuration: one JSON document naming the problem (a registry
//! instance or inline expressions), the numerics and the output directory.
//! Unknown keys are rejected at every level.

use fbsde_core::backward::BackwardOpts;
use fbsde_core::model::{problem_from_exprs, validate_problem, CoefficientError, FbsdeProblem, ValidationError};
use fbsde_core::picard::{IterationConfig, PicardError};
use fbsde_core::probes::ProbeConfig;
use fbsde_core::registry::{self, RegistryError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{which}: {source}")]
    Registry {
        which: &'static str,
        #[source]
        source: RegistryError,
    },
    #[error("{which}: {source}")]
    Expression {
        which: &'static str,
        #[source]
        source: CoefficientError,
    },
    #[error("{which}: {source}")]
    Validation {
        which: &'static str,
        #[source]
        source: ValidationError,
    },
    #[error("{which}: give exactly one of `registry` and `inline`")]
    ProblemKind { which: &'static str },
    #[error("numerics: {0}")]
    Numerics(String),
}

/// A registry name with parameter overrides, or inline expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// `n` expressions.
    pub drift: Vec<String>,
    /// `n` rows of `d` expressions.
    pub diffusion: Vec<Vec<String>>,
    /// `n` expressions.
    pub terminal: Vec<String>,
    /// `n` expressions; component `i` reads `z1..zd` as row `i` of `Z`.
    pub generator: Vec<String>,
    #[serde(rename = "C")]
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub degree: usize,
    pub backward: BackwardOpts,
    pub projection: bool,
    pub alarm: f64,
    pub p_list: Vec<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        let c = IterationConfig::default();
        Self {
            paths: c.paths,
            steps: c.steps,
            seed: c.seed,
            tol: c.tol,
            max_iter: c.max_iter,
            degree: c.degree,
            backward: c.backward,
            projection: c.projection,
            alarm: c.alarm,
            p_list: vec![2.0, 4.0, 8.0],
        }
    }
}

impl Numerics {
    pub fn iteration(&self) -> IterationConfig {
        IterationConfig {
            paths: self.paths,
            steps: self.steps,
            seed: self.seed,
            tol: self.tol,
            max_iter: self.max_iter,
            degree: self.degree,
            backward: self.backward,
            projection: self.projection,
            alarm: self.alarm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub probes: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let c = ProbeConfig::default();
        Self {
            probes: c.probes,
            radius: c.radius,
            seed: c.seed,
        }
    }
}

impl ProbeSettings {
    pub fn config(&self) -> ProbeConfig {
        ProbeConfig::new(self.probes, self.radius, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// The upper problem of a comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_b: Option<ProblemSpec>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub probes: ProbeSettings,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write full `X`, `Y`, `Z` path dumps.
    #[serde(default)]
    pub dump_paths: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line values that replace config fields when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub no_projection: bool,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        let n = &mut self.numerics;
        n.paths = o.paths.unwrap_or(n.paths);
        n.steps = o.steps.unwrap_or(n.steps);
        n.seed = o.seed.unwrap_or(n.seed);
        n.tol = o.tol.unwrap_or(n.tol);
        n.max_iter = o.max_iter.unwrap_or(n.max_iter);
        if o.no_projection {
            n.projection = false;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
    }
}

/// A parsed config with its problems compiled and validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: FbsdeProblem,
    pub problem_b: Option<FbsdeProblem>,
}

impl Experiment {
    pub fn iteration(&self) -> IterationConfig {
        self.config.numerics.iteration()
    }
}

pub fn build_problem(spec: &ProblemSpec, which: &'static str) -> Result<FbsdeProblem, ConfigError> {
    let p = match (&spec.registry, &spec.inline) {
        (Some(name), None) => registry::build(name, &spec.params)
            .map_err(|source| ConfigError::Registry { which, source })?,
        (None, Some(inline)) if spec.params.is_empty() => {
            let diffusion: Vec<String> = inline.diffusion.iter().flatten().cloned().collect();
            if inline.diffusion.len() != inline.n || inline.diffusion.iter().any(|r| r.len() != inline.d) {
                return Err(ConfigError::Numerics(format!(
                    "{which}: diffusion must have {} rows of {} entries",
                    inline.n, inline.d
                )));
            }
            problem_from_exprs(
                inline.n,
                inline.d,
                inline.horizon,
                inline.x0.clone(),
                &inline.drift,
                &diffusion,
                &inline.terminal,
                &inline.generator,
                inline.growth,
            )
            .map_err(|source| ConfigError::Expression { which, source })?
        }
        _ => return Err(ConfigError::ProblemKind { which }),
    };
    validate_problem(&p).map_err(|source| ConfigError::Validation { which, source })?;
    Ok(p)
}

/// Parses JSON text; `origin` only labels error messages.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
    })
}

/// Compiles the problems and checks the numerics.
pub fn resolve(config: ExperimentConfig) -> Result<Experiment, ConfigError> {
    let problem = build_problem(&config.problem, "problem")?;
    let problem_b = config
        .problem_b
        .as_ref()
        .map(|s| build_problem(s, "problem_b"))
        .transpose()?;
    config.numerics.iteration().validate().map_err(|e| match e {
        PicardError::Config(msg) => ConfigError::Numerics(msg),
        other => ConfigError::Numerics(other.to_string()),
    })?;
    if config.numerics.p_list.iter().any(|p| !(p.is_finite() && *p >= 1.0)) {
        return Err(ConfigError::Numerics("p_list entries must be finite and at least 1".into()));
    }
    if config.probes.probes == 0 || !(config.probes.radius > 0.0) {
        return Err(ConfigError::Numerics("probes needs a positive count and radius".into()));
    }
    Ok(Experiment {
        config,
        problem,
        problem_b,
    })
}

pub fn load_config(path: &Path) -> Result<Experiment, ConfigError> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse_config(&text, path)?;
    config.apply(overrides);
    resolve(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Experiment, ConfigError> {
        resolve(parse_config(text, Path::new("test.json"))?)
    }

    #[test]
    fn minimal_registry_config() {
        let e = parse(r#"{"problem": {"registry": "trivial-zero"}}"#).unwrap();
        assert_eq!(e.problem.n, 1);
        assert_eq!(e.config.numerics, Numerics::default());
        assert_eq!(e.config.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_key_is_named_with_position() {
        let err = parse("{\"problem\": {\"registry\": \"trivial-zero\"},\n \"sigma_matrix\": 1}").unwrap_err();
        let ConfigError::Parse { line, message, .. } = &err else {
            panic!("{err}")
        };
        assert_eq!(*line, 2);
        assert!(message.contains("sigma_matrix"), "{message}");
    }

    #[test]
    fn dsl_error_carries_position() {
        let text = r#"{"problem": {"inline": {"n": 1, "d": 1, "T": 1, "x0": [0],
            "drift": ["0"], "diffusion": [["1"]], "terminal": ["0"],
            "generator": ["z1^"], "C": 1}}}"#;
        let err = parse(text).unwrap_err();
        assert!(matches!(err, ConfigError::Expression { .. }));
        assert!(err.to_string().contains("position 4"), "{err}");
    }

    #[test]
    fn inline_matches_registry() {
        let text = r#"{"problem": {"inline": {"n": 1, "d": 1, "T": 1, "x0": [0],
            "drift": ["0.2*tanh(y1)"], "diffusion": [["1"]], "terminal": ["tanh(x1)"],
            "generator": ["0.2*tanh(x1) + 0.5*z1^2"], "C": 1}}}"#;
        let e = parse(text).unwrap();
        let r = registry::get("coupled-smooth").unwrap();
        assert!(e.problem.drift.same_definition(&r.drift));
        assert!(e.problem.generator[0].same_definition(&r.generator[0]));
    }

    #[test]
    fn problem_kind_and_registry_errors() {
        assert!(matches!(
            parse(r#"{"problem": {}}"#),
            Err(ConfigError::ProblemKind { .. })
        ));
        assert!(matches!(
            parse(r#"{"problem": {"registry": "nope"}}"#),
            Err(ConfigError::Registry { .. })
        ));
        assert!(matches!(
            parse(r#"{"problem": {"registry": "trivial-zero"}, "numerics": {"paths": 0}}"#),
            Err(ConfigError::Numerics(_))
        ));
    }

    #[test]
    fn overrides_replace_fields() {
        let mut c = parse_config(r#"{"problem": {"registry": "trivial-zero"}}"#, Path::new("x")).unwrap();
        c.apply(&Overrides {
            paths: Some(7),
            seed: Some(9),
            no_projection: true,
            output_dir: Some("elsewhere".into()),
            ..Default::default()
        });
        assert_eq!((c.numerics.paths, c.numerics.seed, c.numerics.projection), (7, 9, false));
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn config_round_trips() {
        let text = r#"{"problem": {"registry": "coupled-smooth", "params": {"C": 1.2}},
            "problem_b": {"registry": "coupled-smooth", "params": {"C": 1.2, "terminal_shift": 0.1}},
            "numerics": {"paths": 100, "p_list": [2, 3]}, "dump_paths": true}"#;
        let c = parse_config(text, Path::new("x")).unwrap();
        let again = parse_config(&serde_json::to_string(&c).unwrap(), Path::new("x")).unwrap();
        assert_eq!(c, again);
    }
}
