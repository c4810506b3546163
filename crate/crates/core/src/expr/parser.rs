//! Lexer and recursive-descent parser.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | var | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-2^2`
//! is `-(2^2)` and `2^3^2` is `2^(3^2)`. Positions in errors are 1-based
//! character offsets.

use super::ast::{Ast, BinOp, Dims, Func, Node, Var};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unexpected character '{ch}' at position {pos}")]
    Lexical { pos: usize, ch: char },
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("variable '{name}' at position {pos} is out of range (valid indices 1..={limit})")]
    IndexOutOfRange { pos: usize, name: String, limit: usize },
    #[error("function '{function}' at position {pos} takes {expected} argument(s), got {found}")]
    Arity {
        pos: usize,
        function: String,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Lexical { pos, .. }
            | ParseError::Syntax { pos, .. }
            | ParseError::UnknownIdentifier { pos, .. }
            | ParseError::IndexOutOfRange { pos, .. }
            | ParseError::Arity { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let mantissa: String = chars[start..i].iter().collect();
            if mantissa == "." {
                return Err(ParseError::Lexical { pos, ch: '.' });
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                } else {
                    return Err(ParseError::Syntax {
                        pos: i + 1,
                        message: "malformed exponent in number".into(),
                    });
                }
            }
            let lit: String = chars[start..i].iter().collect();
            let value: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                pos,
                message: format!("malformed number '{lit}'"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Syntax {
                    pos,
                    message: format!("number '{lit}' overflows"),
                });
            }
            out.push(Token {
                tok: Tok::Num(value),
                pos,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                pos,
            });
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => return Err(ParseError::Lexical { pos, ch: c }),
        };
        out.push(Token { tok, pos });
        i += 1;
    }
    out.push(Token {
        tok: Tok::End,
        pos: chars.len() + 1,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    dims: Dims,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        let t = self.peek();
        let found = match &t.tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Op(c) => format!("'{c}'"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of input".into(),
        };
        ParseError::Syntax {
            pos: t.pos,
            message: format!("expected {expected}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek().tok == Tok::Op('-') {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.peek().tok == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Node::bin(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Node::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if self.peek().tok != Tok::RParen {
                    return Err(self.unexpected("')'"));
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    self.call(func, t.pos)
                } else {
                    Ok(Node::Var(self.variable(&name, t.pos)?))
                }
            }
            _ => Err(self.unexpected("a number, variable, function call or '('")),
        }
    }

    fn call(&mut self, func: Func, pos: usize) -> Result<Node, ParseError> {
        if self.peek().tok != Tok::LParen {
            return Err(self.unexpected(&format!("'(' after '{}'", func.name())));
        }
        self.bump();
        let mut args = vec![self.expr()?];
        while self.peek().tok == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        if self.peek().tok != Tok::RParen {
            return Err(self.unexpected("',' or ')'"));
        }
        self.bump();
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                pos,
                function: func.name().into(),
                expected: func.arity(),
                found: args.len(),
            });
        }
        Ok(Node::Call(func, args))
    }

    fn variable(&self, name: &str, pos: usize) -> Result<Var, ParseError> {
        if name == "t" {
            return Ok(Var::T);
        }
        let unknown = || ParseError::UnknownIdentifier {
            pos,
            name: name.to_string(),
        };
        let mut chars = name.chars();
        let head = chars.next().ok_or_else(unknown)?;
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let (limit, make): (usize, fn(usize) -> Var) = match head {
            'x' => (self.dims.n, Var::X),
            'y' => (self.dims.n, Var::Y),
            'z' => (self.dims.d, Var::Z),
            _ => return Err(unknown()),
        };
        let out_of_range = || ParseError::IndexOutOfRange {
            pos,
            name: name.to_string(),
            limit,
        };
        let index: usize = digits.parse().map_err(|_| out_of_range())?;
        if index == 0 || index > limit {
            return Err(out_of_range());
        }
        Ok(make(index - 1))
    }
}

/// Parses `text` into an expression tree, resolving variables against `dims`.
pub fn parse(text: &str, dims: Dims) -> Result<Ast, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser {
        tokens,
        at: 0,
        dims,
    };
    let root = p.expr()?;
    if p.peek().tok != Tok::End {
        return Err(p.unexpected("an operator or end of input"));
    }
    Ok(Ast { root, dims })
}
