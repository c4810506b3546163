use super::ast::{Ast, BinOp, Dims, Func, Node, Var};
use thiserror::Error;

/// Arguments a coefficient may read. `z` is the single generator row
/// `z^i` in R^d, never the full matrix.
#[derive(Debug, Clone, Copy)]
pub struct EvalEnv<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

impl<'a> EvalEnv<'a> {
    pub fn new(t: f64, x: &'a [f64], y: &'a [f64], z: &'a [f64]) -> Self {
        Self { t, x, y, z }
    }

    #[inline]
    fn var(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X(i) => self.x[i],
            Var::Y(i) => self.y[i],
            Var::Z(i) => self.z[i],
        }
    }

    fn fits(&self, dims: Dims) -> bool {
        self.x.len() == dims.n && self.y.len() == dims.n && self.z.len() == dims.d
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("non-finite value {value} produced by subexpression `{subexpr}`")]
    NonFinite { subexpr: String, value: f64 },
    #[error("environment dimensions (x: {x}, y: {y}, z: {z}) do not match expression dimensions (n: {n}, d: {d})")]
    Dimension {
        x: usize,
        y: usize,
        z: usize,
        n: usize,
        d: usize,
    },
    #[error("environment {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EvalError>,
    },
}

fn dim_error(env: &EvalEnv<'_>, dims: Dims) -> EvalError {
    EvalError::Dimension {
        x: env.x.len(),
        y: env.y.len(),
        z: env.z.len(),
        n: dims.n,
        d: dims.d,
    }
}

/// Tree-walking evaluation. A non-finite result is reported against the
/// innermost subexpression that turned finite inputs into a non-finite value.
pub fn evaluate(ast: &Ast, env: &EvalEnv<'_>) -> Result<f64, EvalError> {
    if !env.fits(ast.dims) {
        return Err(dim_error(env, ast.dims));
    }
    eval_node(&ast.root, env)
}

fn eval_node(node: &Node, env: &EvalEnv<'_>) -> Result<f64, EvalError> {
    let value = match node {
        Node::Num(v) => *v,
        Node::Var(v) => env.var(*v),
        Node::Neg(a) => -eval_node(a, env)?,
        Node::Bin(op, a, b) => op.apply(eval_node(a, env)?, eval_node(b, env)?),
        Node::Call(func, args) => match args.as_slice() {
            [a] => func.apply1(eval_node(a, env)?),
            [a, b] => func.apply2(eval_node(a, env)?, eval_node(b, env)?),
            _ => unreachable!("arity checked by the parser"),
        },
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(EvalError::NonFinite {
            subexpr: node.to_string(),
            value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Push(f64),
    Load(Var),
    Neg,
    Bin(BinOp),
    Call1(Func),
    Call2(Func),
}

const INLINE_STACK: usize = 32;

/// Postfix form of an expression for tight loops. Applies exactly the same
/// floating-point operations in the same order as [`evaluate`], so results
/// agree bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
    dims: Dims,
}

impl Program {
    pub fn compile(ast: &Ast) -> Program {
        let mut ops = Vec::with_capacity(ast.root.node_count());
        emit(&ast.root, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Push(_) | Op::Load(_) => depth += 1,
                Op::Neg | Op::Call1(_) => {}
                Op::Bin(_) | Op::Call2(_) => depth -= 1,
            }
            max_depth = max_depth.max(depth);
        }
        Program {
            ops,
            depth: max_depth,
            dims: ast.dims,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Evaluates in postfix order. If any intermediate value is non-finite
    /// the result is NaN, so a finite result means the tree evaluator
    /// would succeed with the same value.
    #[inline]
    pub fn run(&self, env: &EvalEnv<'_>) -> f64 {
        if self.depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.exec(env, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            self.exec(env, &mut stack)
        }
    }

    #[inline]
    fn exec(&self, env: &EvalEnv<'_>, stack: &mut [f64]) -> f64 {
        let mut sp = 0usize;
        let mut finite = true;
        for op in &self.ops {
            match *op {
                Op::Push(v) => {
                    stack[sp] = v;
                    sp += 1;
                }
                Op::Load(v) => {
                    stack[sp] = env.var(v);
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Bin(b) => {
                    sp -= 1;
                    stack[sp - 1] = b.apply(stack[sp - 1], stack[sp]);
                }
                Op::Call1(f) => stack[sp - 1] = f.apply1(stack[sp - 1]),
                Op::Call2(f) => {
                    sp -= 1;
                    stack[sp - 1] = f.apply2(stack[sp - 1], stack[sp]);
                }
            }
            finite &= stack[sp - 1].is_finite();
        }
        if finite {
            stack[0]
        } else {
            f64::NAN
        }
    }
}

fn emit(node: &Node, ops: &mut Vec<Op>) {
    match node {
        Node::Num(v) => ops.push(Op::Push(*v)),
        Node::Var(v) => ops.push(Op::Load(*v)),
        Node::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Node::Bin(op, a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(Op::Bin(*op));
        }
        Node::Call(func, args) => {
            args.iter().for_each(|a| emit(a, ops));
            ops.push(if args.len() == 1 {
                Op::Call1(*func)
            } else {
                Op::Call2(*func)
            });
        }
    }
}

/// Evaluates `ast` at every environment. Compiles once and reuses the
/// program; on the first non-finite value the offending subexpression is
/// recovered by re-running the tree evaluator at that environment.
pub fn evaluate_batch(ast: &Ast, envs: &[EvalEnv<'_>]) -> Result<Vec<f64>, EvalError> {
    let program = Program::compile(ast);
    let mut out = Vec::with_capacity(envs.len());
    for (index, env) in envs.iter().enumerate() {
        let wrap = |source: EvalError| EvalError::Batch {
            index,
            source: Box::new(source),
        };
        if !env.fits(ast.dims) {
            return Err(wrap(dim_error(env, ast.dims)));
        }
        let v = program.run(env);
        if !v.is_finite() {
            return Err(wrap(eval_node(&ast.root, env).err().unwrap_or(
                EvalError::NonFinite {
                    subexpr: ast.root.to_string(),
                    value: v,
                },
            )));
        }
        out.push(v);
    }
    Ok(out)
}
