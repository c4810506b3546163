use std::fmt;

/// Problem dimensions an expression is checked against: `x`, `y` live in
/// R^n and the generator row `z` lives in R^d.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, d: usize) -> Self {
        Self { n, d }
    }
}

/// Variable reference. Indices are zero-based internally and printed
/// one-based (`x1` is `Var::X(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    Y(usize),
    Z(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y(i) => write!(f, "y{}", i + 1),
            Var::Z(i) => write!(f, "z{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => a.powf(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Abs,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Abs,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Sin,
        Func::Cos,
        Func::Tanh,
        Func::Min,
        Func::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    #[inline]
    pub fn apply1(self, a: f64) -> f64 {
        match self {
            Func::Abs => a.abs(),
            Func::Exp => a.exp(),
            Func::Log => a.ln(),
            Func::Sqrt => a.sqrt(),
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Tanh => a.tanh(),
            Func::Min | Func::Max => unreachable!("binary function applied to one argument"),
        }
    }

    // NaN-propagating, unlike f64::min/max which silently drop a NaN operand.
    #[inline]
    pub fn apply2(self, a: f64, b: f64) -> f64 {
        if a.is_nan() || b.is_nan() {
            return f64::NAN;
        }
        match self {
            Func::Min => a.min(b),
            Func::Max => a.max(b),
            _ => unreachable!("unary function applied to two arguments"),
        }
    }
}

/// Expression tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    pub fn bin(op: BinOp, a: Node, b: Node) -> Node {
        Node::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn visit_vars(&self, f: &mut impl FnMut(Var)) {
        match self {
            Node::Num(_) => {}
            Node::Var(v) => f(*v),
            Node::Neg(a) => a.visit_vars(f),
            Node::Bin(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Node::Call(_, args) => args.iter().for_each(|a| a.visit_vars(f)),
        }
    }

    pub fn is_constant(&self) -> bool {
        let mut has_var = false;
        self.visit_vars(&mut |_| has_var = true);
        !has_var
    }

    /// Replaces every variable-free subtree by its value. Subtrees whose
    /// value is not finite are left alone so evaluation still reports them.
    pub fn fold_constants(&self) -> Node {
        let folded = match self {
            Node::Num(_) | Node::Var(_) => return self.clone(),
            Node::Neg(a) => Node::Neg(Box::new(a.fold_constants())),
            Node::Bin(op, a, b) => Node::bin(*op, a.fold_constants(), b.fold_constants()),
            Node::Call(func, args) => {
                Node::Call(*func, args.iter().map(Node::fold_constants).collect())
            }
        };
        match folded.literal_value() {
            Some(v) if v.is_finite() => Node::Num(v),
            _ => folded,
        }
    }

    // Value of a node whose children are all literals.
    fn literal_value(&self) -> Option<f64> {
        let lit = |n: &Node| match n {
            Node::Num(v) => Some(*v),
            _ => None,
        };
        match self {
            Node::Num(v) => Some(*v),
            Node::Var(_) => None,
            Node::Neg(a) => lit(a).map(|v| -v),
            Node::Bin(op, a, b) => Some(op.apply(lit(a)?, lit(b)?)),
            Node::Call(func, args) => match args.as_slice() {
                [a] => Some(func.apply1(lit(a)?)),
                [a, b] => Some(func.apply2(lit(a)?, lit(b)?)),
                _ => None,
            },
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Node::Num(_) | Node::Var(_) => 1,
            Node::Neg(a) => 1 + a.node_count(),
            Node::Bin(_, a, b) => 1 + a.node_count() + b.node_count(),
            Node::Call(_, args) => 1 + args.iter().map(Node::node_count).sum::<usize>(),
        }
    }
}

/// Fully parenthesised rendering; re-parsing it yields the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "(-{:?})", -v)
            }
            Node::Num(v) => write!(f, "{v:?}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Neg(a) => write!(f, "(-({a}))"),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// A parsed expression together with the dimensions its variables were
/// checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Ast {
    pub root: Node,
    pub dims: Dims,
}

impl Ast {
    pub fn fold_constants(&self) -> Ast {
        Ast {
            root: self.root.fold_constants(),
            dims: self.dims,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.root.visit_vars(&mut |v| {
            if !out.contains(&v) {
                out.push(v);
            }
        });
        out
    }
}

impl fmt::Display for Ast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}
