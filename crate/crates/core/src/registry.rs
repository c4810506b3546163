//! Named model instances. Each is built from expression text so that it can
//! be printed, reparsed and compared like a user-supplied problem.

use crate::model::{problem_from_exprs, FbsdeProblem, CoefficientError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown model '{0}'; available: {names}", names = NAMES.join(", "))]
    Unknown(String),
    #[error("model '{model}' has no parameter '{param}'; accepted: {accepted}")]
    UnknownParameter {
        model: String,
        param: String,
        accepted: String,
    },
    #[error("parameter '{param}' must be finite{extra}")]
    BadValue { param: String, extra: &'static str },
    #[error(transparent)]
    Model(#[from] CoefficientError),
}

pub const NAMES: &[&str] = &[
    "trivial-zero",
    "decoupled-quadratic",
    "coupled-smooth",
    "bounding-ode",
    "coupled-pair",
];

/// Default parameters for a model. Every model accepts `C`, `T` and `x0`.
pub fn defaults(name: &str) -> Result<BTreeMap<&'static str, f64>, RegistryError> {
    let mut m = BTreeMap::from([("C", 1.0), ("T", 1.0), ("x0", 0.0)]);
    match name {
        "trivial-zero" | "bounding-ode" => {}
        "decoupled-quadratic" => {
            m.insert("gamma", 1.0);
        }
        "coupled-smooth" | "coupled-pair" => {
            m.insert("coupling", 0.2);
            m.insert("drift_shift", 0.0);
            m.insert("terminal_shift", 0.0);
        }
        other => return Err(RegistryError::Unknown(other.to_string())),
    }
    Ok(m)
}

pub fn describe(name: &str) -> Option<&'static str> {
    Some(match name {
        "trivial-zero" => "all coefficients zero; the solution is identically zero",
        "decoupled-quadratic" => "b=0, sigma=1, h=tanh(x1), g=gamma/2*z1^2",
        "coupled-smooth" => "b=coupling*tanh(y1)+drift_shift, sigma=1, h=tanh(x1)+terminal_shift, g=coupling*tanh(x1)+z1^2/2",
        "bounding-ode" => "zero problem used to check the bounding equations against closed forms",
        "coupled-pair" => "two coupled components in two dimensions with cross terms",
        _ => return None,
    })
}

/// Decimal text that reparses to the same `f64`, parenthesised when negative.
fn num(v: f64) -> String {
    if v < 0.0 {
        format!("({v:?})")
    } else {
        format!("{v:?}")
    }
}

fn plus(body: &str, shift: f64) -> String {
    if shift == 0.0 {
        body.to_string()
    } else {
        format!("{body} + {}", num(shift))
    }
}

pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<FbsdeProblem, RegistryError> {
    let mut p = defaults(name)?;
    for (k, v) in params {
        let Some(slot) = p.get_mut(k.as_str()) else {
            return Err(RegistryError::UnknownParameter {
                model: name.to_string(),
                param: k.clone(),
                accepted: p.keys().copied().collect::<Vec<_>>().join(", "),
            });
        };
        if !v.is_finite() {
            return Err(RegistryError::BadValue {
                param: k.clone(),
                extra: "",
            });
        }
        *slot = *v;
    }
    let (c, t, x0) = (p["C"], p["T"], p["x0"]);
    if c <= 0.0 {
        return Err(RegistryError::BadValue {
            param: "C".into(),
            extra: " and positive",
        });
    }
    if t <= 0.0 {
        return Err(RegistryError::BadValue {
            param: "T".into(),
            extra: " and positive",
        });
    }
    let problem = match name {
        "trivial-zero" | "bounding-ode" => {
            problem_from_exprs(1, 1, t, vec![x0], &["0"], &["0"], &["0"], &["0"], c)?
        }
        "decoupled-quadratic" => {
            let g = format!("{}*z1^2", num(0.5 * p["gamma"]));
            problem_from_exprs(1, 1, t, vec![x0], &["0"], &["1"], &["tanh(x1)"], &[g.as_str()], c)?
        }
        "coupled-smooth" => {
            let k = num(p["coupling"]);
            let b = plus(&format!("{k}*tanh(y1)"), p["drift_shift"]);
            let h = plus("tanh(x1)", p["terminal_shift"]);
            let g = format!("{k}*tanh(x1) + 0.5*z1^2");
            problem_from_exprs(1, 1, t, vec![x0], &[b.as_str()], &["1"], &[h.as_str()], &[g.as_str()], c)?
        }
        "coupled-pair" => {
            let k = num(p["coupling"]);
            let half = num(0.5 * p["coupling"]);
            let (ds, ts) = (p["drift_shift"], p["terminal_shift"]);
            let b1 = plus(&format!("{k}*tanh(y1) + {half}*tanh(x2)"), ds);
            let b2 = plus(&format!("{k}*tanh(y2) + {half}*tanh(x1)"), ds);
            let h1 = plus("0.5*tanh(x1)", ts);
            let h2 = plus("0.5*tanh(x2)", ts);
            let g1 = format!("{half}*tanh(x1) + {half}*tanh(y2) + 0.25*(z1^2 + z2^2)");
            let g2 = format!("{half}*tanh(x2) + {half}*tanh(y1) + 0.25*(z1^2 + z2^2)");
            problem_from_exprs(
                2,
                2,
                t,
                vec![x0, x0],
                &[b1.as_str(), b2.as_str()],
                &["0.7", "0", "0", "0.7"],
                &[h1.as_str(), h2.as_str()],
                &[g1.as_str(), g2.as_str()],
                c,
            )?
        }
        other => return Err(RegistryError::Unknown(other.to_string())),
    };
    Ok(problem)
}

/// Builds a model with its defaults.
pub fn get(name: &str) -> Result<FbsdeProblem, RegistryError> {
    build(name, &BTreeMap::new())
}
