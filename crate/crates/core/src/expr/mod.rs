//! Coefficient expressions: parsing, evaluation, symbolic differentiation.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | identifier | 'pi' | func '(' sum ')' | '(' sum ')'
//! func    := sin | cos | tan | exp | log | sqrt | abs | sign
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)`. There is no implicit multiplication: `2x` is rejected.

mod compile;
mod diff;
mod lexer;
mod parser;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use compile::Compiled;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }

    fn prec(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }

    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
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
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Derivative of `abs`; `sign(0) = 0`.
    Sign,
}

impl Func {
    pub const ALL: [Func; 8] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
        Func::Sign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub(crate) fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
            Func::Sign => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn domain_ok(self, v: f64) -> bool {
        match self {
            Func::Log => v > 0.0,
            Func::Sqrt => v >= 0.0,
            _ => true,
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{line}:{col}: {message}{}", expected_suffix(.expected))]
pub struct ParseError {
    /// Byte offset into the source.
    pub offset: usize,
    pub line: usize,
    pub col: usize,
    pub message: String,
    pub expected: Vec<String>,
}

fn expected_suffix(expected: &[String]) -> String {
    if expected.is_empty() {
        String::new()
    } else {
        format!(" (expected {})", expected.join(", "))
    }
}

impl ParseError {
    pub(crate) fn new(src: &str, offset: usize, message: String, expected: Vec<String>) -> Self {
        let before = &src[..offset.min(src.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
        ParseError {
            offset,
            line,
            col,
            message,
            expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("unbound identifier '{0}'")]
    Unbound(String),
    #[error("domain error: {func}({operand})")]
    Domain { func: String, operand: f64 },
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parser::parse(s)
    }
}

/// Parse an expression from source text.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    parser::parse(src)
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            Expr::Pi => Some(std::f64::consts::PI),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// Evaluate with named bindings.
    pub fn eval(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        self.eval_with(&|name| bindings.get(name).copied())
    }

    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Pi => Ok(std::f64::consts::PI),
            Expr::Var(name) => lookup(name).ok_or_else(|| EvalError::Unbound(name.clone())),
            Expr::Neg(a) => Ok(-a.eval_with(lookup)?),
            Expr::Binary(op, a, b) => {
                let x = a.eval_with(lookup)?;
                let y = b.eval_with(lookup)?;
                let r = op.apply(x, y);
                if !r.is_finite() && x.is_finite() && y.is_finite() {
                    return Err(EvalError::Domain {
                        func: op.symbol().to_string(),
                        operand: if *op == BinOp::Div { y } else { x },
                    });
                }
                Ok(r)
            }
            Expr::Call(f, a) => {
                let v = a.eval_with(lookup)?;
                if !f.domain_ok(v) {
                    return Err(EvalError::Domain {
                        func: f.name().to_string(),
                        operand: v,
                    });
                }
                Ok(f.apply(v))
            }
        }
    }

    /// Identifiers appearing in the expression (excluding `pi`).
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Var(n) => {
                out.insert(n.clone());
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Num(_) | Expr::Pi => {}
        }
    }

    /// Replace every variable for which `f` returns `Some`.
    pub fn map_vars(&self, f: &mut dyn FnMut(&str) -> Option<Expr>) -> Expr {
        match self {
            Expr::Var(n) => f(n).unwrap_or_else(|| self.clone()),
            Expr::Num(_) | Expr::Pi => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.map_vars(f))),
            Expr::Call(g, a) => Expr::Call(*g, Box::new(a.map_vars(f))),
            Expr::Binary(op, a, b) => Expr::Binary(*op, Box::new(a.map_vars(f)), Box::new(b.map_vars(f))),
        }
    }

    /// Exact symbolic derivative with respect to `var`.
    pub fn differentiate(&self, var: &str) -> Expr {
        diff::derivative(self, var)
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.prec(),
            Expr::Neg(_) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            _ => 5,
        }
    }
}

// Smart constructors: constant folding and 0/1 elimination only.

pub(crate) fn fold(op: BinOp, a: f64, b: f64) -> Option<Expr> {
    let r = op.apply(a, b);
    r.is_finite().then_some(Expr::Num(r))
}

pub fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        if let Some(e) = fold(BinOp::Add, *x, *y) {
            return e;
        }
    }
    if let Expr::Neg(inner) = b {
        return sub(a, *inner);
    }
    Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return neg(b);
    }
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        if let Some(e) = fold(BinOp::Sub, *x, *y) {
            return e;
        }
    }
    Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        Expr::Binary(BinOp::Mul, l, r) => mul(neg(*l), *r),
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero() || b.is_zero() {
        return Expr::Num(0.0);
    }
    match (&a, &b) {
        (Expr::Num(x), _) if *x == 1.0 => return b,
        (_, Expr::Num(y)) if *y == 1.0 => return a,
        (Expr::Num(x), _) if *x == -1.0 => return neg(b),
        (_, Expr::Num(y)) if *y == -1.0 => return neg(a),
        (Expr::Num(x), Expr::Num(y)) => {
            if let Some(e) = fold(BinOp::Mul, *x, *y) {
                return e;
            }
        }
        _ => {}
    }
    // keep constant factors in front
    if b.as_const().is_some() && a.as_const().is_none() {
        return mul(b, a);
    }
    if let Expr::Neg(inner) = b {
        return mul(neg(a), *inner);
    }
    Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
}

pub fn div(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return Expr::Num(0.0);
    }
    match (&a, &b) {
        (_, Expr::Num(y)) if *y == 1.0 => return a,
        (Expr::Num(x), Expr::Num(y)) => {
            if let Some(e) = fold(BinOp::Div, *x, *y) {
                return e;
            }
        }
        _ => {}
    }
    Expr::Binary(BinOp::Div, Box::new(a), Box::new(b))
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Num(y)) if *y == 0.0 => return Expr::Num(1.0),
        (_, Expr::Num(y)) if *y == 1.0 => return a,
        (Expr::Num(x), Expr::Num(y)) => {
            if let Some(e) = fold(BinOp::Pow, *x, *y) {
                return e;
            }
        }
        _ => {}
    }
    Expr::Binary(BinOp::Pow, Box::new(a), Box::new(b))
}

pub fn call(f: Func, a: Expr) -> Expr {
    if let Expr::Num(v) = a {
        if f.domain_ok(v) {
            let r = f.apply(v);
            if r.is_finite() {
                return Expr::Num(r);
            }
        }
    }
    Expr::Call(f, Box::new(a))
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Pi => write!(f, "pi"),
            Expr::Var(n) => write!(f, "{n}"),
            Expr::Neg(a) => {
                if a.prec() < 3 {
                    write!(f, "-({a})")
                } else {
                    write!(f, "-{a}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Binary(op, a, b) => {
                let p = op.prec();
                let (lp, rp) = if *op == BinOp::Pow {
                    (a.prec() <= p, b.prec() < 3)
                } else {
                    (a.prec() < p, b.prec() <= p)
                };
                if lp {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, "{}", op.symbol())?;
                if rp {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}
