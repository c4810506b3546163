//! FBSDE problem instances and their coefficient functions.
//!
//! A problem couples a forward SDE for `X` in R^n driven by a d-dimensional
//! Brownian motion with an n-dimensional backward equation whose i-th
//! generator reads only the i-th row of `Z`:
//!
//! ```text
//! X^i_t = x0^i + ∫ b^i(s, X_s, Y_s) ds + ∫ σ^i(s, X_s) dW_s
//! Y^i_t = h^i(X_T) + ∫_t^T g^i(s, X_s, Y_s, Z^i_s) ds - ∫_t^T Z^i_s dW_s
//! ```
//!
//! Coefficients are deterministic functions; either compiled expressions
//! or native closures.

use crate::expr::{self, Ast, Dims, EvalEnv, Program, Var};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Output shape of a coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Row-major `rows × cols`.
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(k) => k,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(k) => write!(f, "R^{k}"),
            Shape::Matrix(r, c) => write!(f, "R^{r}x{c}"),
        }
    }
}

/// Which arguments a coefficient reads. `z_row` names the row of `Z` a
/// generator component consumes; `None` means it does not read `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Arity {
    pub t: bool,
    pub x: bool,
    pub y: bool,
    pub z_row: Option<usize>,
}

/// The four coefficient roles; each fixes which arguments may be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Drift,
    Diffusion,
    Terminal,
    Generator(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Drift => write!(f, "drift b"),
            Role::Diffusion => write!(f, "diffusion sigma"),
            Role::Terminal => write!(f, "terminal h"),
            Role::Generator(i) => write!(f, "generator g{}", i + 1),
        }
    }
}

impl Role {
    fn allows(self, v: Var) -> bool {
        match (self, v) {
            (Role::Terminal, Var::X(_)) => true,
            (Role::Terminal, _) => false,
            (Role::Diffusion, Var::T | Var::X(_)) => true,
            (Role::Drift, Var::T | Var::X(_) | Var::Y(_)) => true,
            (Role::Generator(_), _) => true,
            _ => false,
        }
    }
}

pub type NativeFn = dyn Fn(&EvalEnv<'_>, &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Handle {
    Expr { asts: Vec<Ast>, programs: Vec<Program> },
    Native(Arc<NativeFn>),
}

/// A deterministic coefficient map with a declared arity and output shape.
#[derive(Clone)]
pub struct CoefficientFn {
    name: String,
    arity: Arity,
    shape: Shape,
    handle: Handle,
}

impl fmt::Debug for CoefficientFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientFn")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("shape", &self.shape)
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum CoefficientError {
    #[error("{role}: component {component}: {source}")]
    Parse {
        role: Role,
        component: usize,
        #[source]
        source: expr::ParseError,
    },
    #[error("{role}: component {component} reads `{var}`, which this coefficient cannot depend on")]
    ForbiddenVariable {
        role: Role,
        component: usize,
        var: String,
    },
    #[error("{role}: expected {expected} expression(s), got {found}")]
    ComponentCount {
        role: Role,
        expected: usize,
        found: usize,
    },
}

impl CoefficientFn {
    /// Compiles one expression per output component (row-major for matrices).
    pub fn from_exprs<S: AsRef<str>>(
        role: Role,
        texts: &[S],
        shape: Shape,
        dims: Dims,
    ) -> Result<Self, CoefficientError> {
        if texts.len() != shape.len() {
            return Err(CoefficientError::ComponentCount {
                role,
                expected: shape.len(),
                found: texts.len(),
            });
        }
        let mut asts = Vec::with_capacity(texts.len());
        let mut arity = Arity::default();
        for (component, text) in texts.iter().enumerate() {
            let ast = expr::parse(text.as_ref(), dims).map_err(|source| CoefficientError::Parse {
                role,
                component,
                source,
            })?;
            for v in ast.vars() {
                if !role.allows(v) {
                    return Err(CoefficientError::ForbiddenVariable {
                        role,
                        component,
                        var: v.to_string(),
                    });
                }
                match v {
                    Var::T => arity.t = true,
                    Var::X(_) => arity.x = true,
                    Var::Y(_) => arity.y = true,
                    Var::Z(_) => {
                        if let Role::Generator(i) = role {
                            arity.z_row = Some(i);
                        }
                    }
                }
            }
            asts.push(ast.fold_constants());
        }
        let name = texts
            .iter()
            .map(|t| t.as_ref().trim().to_string())
            .collect::<Vec<_>>()
            .join("; ");
        let programs = asts.iter().map(Program::compile).collect();
        Ok(Self {
            name,
            arity,
            shape,
            handle: Handle::Expr { asts, programs },
        })
    }

    /// Wraps a closure. `name` identifies the function for structural
    /// equality checks, so it must encode any parameters.
    pub fn native(
        name: impl Into<String>,
        arity: Arity,
        shape: Shape,
        f: impl Fn(&EvalEnv<'_>, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            arity,
            shape,
            handle: Handle::Native(Arc::new(f)),
        }
    }

    /// Constant function. Reads nothing.
    pub fn constant(value: f64, shape: Shape) -> Self {
        Self::native(
            format!("const({value:?}; {shape})"),
            Arity::default(),
            shape,
            move |_, out| out.fill(value),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// The source expressions, if this coefficient came from the DSL.
    pub fn expressions(&self) -> Option<&[Ast]> {
        match &self.handle {
            Handle::Expr { asts, .. } => Some(asts),
            Handle::Native(_) => None,
        }
    }

    /// Structural equality: identical expression trees, or the same native
    /// identity, with the same shape.
    pub fn same_definition(&self, other: &CoefficientFn) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.handle, &other.handle) {
            (Handle::Expr { asts: a, .. }, Handle::Expr { asts: b, .. }) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.root == y.root)
            }
            (Handle::Native(_), Handle::Native(_)) => self.name == other.name,
            _ => false,
        }
    }

    /// Writes `shape().len()` values into `out`. No finiteness check.
    #[inline]
    pub fn eval_into(&self, env: &EvalEnv<'_>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.shape.len());
        match &self.handle {
            Handle::Expr { programs, .. } => {
                for (o, p) in out.iter_mut().zip(programs) {
                    *o = p.run(env);
                }
            }
            Handle::Native(f) => f(env, out),
        }
    }

    #[inline]
    pub fn eval_scalar(&self, env: &EvalEnv<'_>) -> f64 {
        match &self.handle {
            Handle::Expr { programs, .. } => programs[0].run(env),
            Handle::Native(f) => {
                let mut out = [0.0];
                f(env, &mut out);
                out[0]
            }
        }
    }

    pub fn eval_vec(&self, env: &EvalEnv<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.len()];
        self.eval_into(env, &mut out);
        out
    }
}

/// A complete FBSDE instance.
#[derive(Debug, Clone)]
pub struct FbsdeProblem {
    /// State and value dimension.
    pub n: usize,
    /// Brownian dimension.
    pub d: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// `b(t, x, y) -> R^n`
    pub drift: CoefficientFn,
    /// `σ(t, x) -> R^{n×d}`
    pub diffusion: CoefficientFn,
    /// `h(x) -> R^n`
    pub terminal: CoefficientFn,
    /// `g^i(t, x, y, z^i) -> R`, one per component.
    pub generator: Vec<CoefficientFn>,
    /// Growth and Lipschitz constant `C`.
    pub growth: f64,
}

/// A structural defect found by [`validate_problem`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Defect {
    #[error("dimension {name} must be at least 1")]
    ZeroDimension { name: &'static str },
    #[error("horizon T must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("growth constant C must be positive and finite, got {0}")]
    Growth(f64),
    #[error("initial state has {found} components, expected {expected}")]
    InitialState { expected: usize, found: usize },
    #[error("initial state component {0} is not finite")]
    NonFiniteInitialState(usize),
    #[error("{role} outputs {found}, expected {expected}")]
    ShapeMismatch {
        role: Role,
        expected: Shape,
        found: Shape,
    },
    #[error("{expected} generator components required, got {found}")]
    GeneratorCount { expected: usize, found: usize },
    #[error("{role} reads an argument it may not depend on")]
    ForbiddenArgument { role: Role },
    #[error("generator g{} reads row {} of Z", component + 1, row + 1)]
    ForeignZRow { component: usize, row: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid problem: {}", .defects.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub defects: Vec<Defect>,
}

/// Checks dimensions, shapes, positivity and the diagonal structure of the
/// generator. Collects every defect rather than stopping at the first.
pub fn validate_problem(p: &FbsdeProblem) -> Result<(), ValidationError> {
    let mut defects = Vec::new();
    if p.n == 0 {
        defects.push(Defect::ZeroDimension { name: "n" });
    }
    if p.d == 0 {
        defects.push(Defect::ZeroDimension { name: "d" });
    }
    if !(p.horizon > 0.0 && p.horizon.is_finite()) {
        defects.push(Defect::Horizon(p.horizon));
    }
    if !(p.growth > 0.0 && p.growth.is_finite()) {
        defects.push(Defect::Growth(p.growth));
    }
    if p.x0.len() != p.n {
        defects.push(Defect::InitialState {
            expected: p.n,
            found: p.x0.len(),
        });
    }
    if let Some(i) = p.x0.iter().position(|v| !v.is_finite()) {
        defects.push(Defect::NonFiniteInitialState(i));
    }

    let mut check_shape = |role: Role, f: &CoefficientFn, expected: Shape| {
        if f.shape() != expected {
            defects.push(Defect::ShapeMismatch {
                role,
                expected,
                found: f.shape(),
            });
        }
    };
    check_shape(Role::Drift, &p.drift, Shape::Vector(p.n));
    check_shape(Role::Diffusion, &p.diffusion, Shape::Matrix(p.n, p.d));
    check_shape(Role::Terminal, &p.terminal, Shape::Vector(p.n));
    for (i, g) in p.generator.iter().enumerate() {
        check_shape(Role::Generator(i), g, Shape::Scalar);
    }

    if p.drift.arity().z_row.is_some() {
        defects.push(Defect::ForbiddenArgument { role: Role::Drift });
    }
    let a = p.diffusion.arity();
    if a.y || a.z_row.is_some() {
        defects.push(Defect::ForbiddenArgument {
            role: Role::Diffusion,
        });
    }
    let a = p.terminal.arity();
    if a.t || a.y || a.z_row.is_some() {
        defects.push(Defect::ForbiddenArgument {
            role: Role::Terminal,
        });
    }

    if p.generator.len() != p.n {
        defects.push(Defect::GeneratorCount {
            expected: p.n,
            found: p.generator.len(),
        });
    }
    for (i, g) in p.generator.iter().enumerate() {
        if let Some(row) = g.arity().z_row {
            if row != i {
                defects.push(Defect::ForeignZRow { component: i, row });
            }
        }
    }

    if defects.is_empty() {
        Ok(())
    } else {
        Err(ValidationError { defects })
    }
}

/// Builds a problem from DSL strings. `diffusion` is row-major `n × d`.
#[allow(clippy::too_many_arguments)]
pub fn problem_from_exprs<S: AsRef<str>>(
    n: usize,
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: &[S],
    diffusion: &[S],
    terminal: &[S],
    generator: &[S],
    growth: f64,
) -> Result<FbsdeProblem, CoefficientError> {
    let dims = Dims::new(n, d);
    let generator = generator
        .iter()
        .enumerate()
        .map(|(i, text)| {
            CoefficientFn::from_exprs(Role::Generator(i), &[text.as_ref()], Shape::Scalar, dims)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FbsdeProblem {
        n,
        d,
        horizon,
        x0,
        drift: CoefficientFn::from_exprs(Role::Drift, drift, Shape::Vector(n), dims)?,
        diffusion: CoefficientFn::from_exprs(Role::Diffusion, diffusion, Shape::Matrix(n, d), dims)?,
        terminal: CoefficientFn::from_exprs(Role::Terminal, terminal, Shape::Vector(n), dims)?,
        generator,
        growth,
    })
}
