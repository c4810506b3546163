//! Arithmetic expression language for coefficient functions in config files.
//!
//! Expressions read `t`, `x1..xn`, `y1..yn` and `z1..zd` (the generator row),
//! combine them with `+ - * / ^` and unary minus, and call `abs exp log sqrt
//! sin cos tanh min max`. There are no conditionals, loops or user functions,
//! so every expression is a total, deterministic map to an IEEE-754 double
//! (non-finite results are flagged, not hidden).

mod ast;
mod eval;
mod parser;

pub use ast::{Ast, BinOp, Dims, Func, Node, Var};
pub use eval::{evaluate, evaluate_batch, EvalEnv, EvalError, Program};
pub use parser::{parse, ParseError};
