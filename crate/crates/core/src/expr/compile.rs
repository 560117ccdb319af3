use super::{fold, BinOp, EvalError, Expr, Func};

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Slot(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    PowI(Box<Node>, i32),
    Call(Func, Box<Node>),
}

/// An expression with identifiers resolved to positional slots, for hot loops.
///
/// Evaluation performs no domain checks; non-finite results propagate as NaN
/// or infinity and are caught by callers.
#[derive(Debug, Clone)]
pub struct Compiled {
    root: Node,
}

impl Compiled {
    pub fn new(e: &Expr, resolve: &dyn Fn(&str) -> Option<usize>) -> Result<Self, EvalError> {
        Ok(Compiled {
            root: lower(e, resolve)?,
        })
    }

    #[inline]
    pub fn eval(&self, slots: &[f64]) -> f64 {
        run(&self.root, slots)
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self.root {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }
}

fn lower(e: &Expr, resolve: &dyn Fn(&str) -> Option<usize>) -> Result<Node, EvalError> {
    Ok(match e {
        Expr::Num(v) => Node::Const(*v),
        Expr::Pi => Node::Const(std::f64::consts::PI),
        Expr::Var(n) => Node::Slot(resolve(n).ok_or_else(|| EvalError::Unbound(n.clone()))?),
        Expr::Neg(a) => match lower(a, resolve)? {
            Node::Const(v) => Node::Const(-v),
            other => Node::Neg(Box::new(other)),
        },
        Expr::Call(f, a) => match lower(a, resolve)? {
            Node::Const(v) if f.domain_ok(v) && f.apply(v).is_finite() => Node::Const(f.apply(v)),
            other => Node::Call(*f, Box::new(other)),
        },
        Expr::Binary(op, a, b) => {
            let l = lower(a, resolve)?;
            let r = lower(b, resolve)?;
            match (&l, &r) {
                (Node::Const(x), Node::Const(y)) => match fold(*op, *x, *y) {
                    Some(Expr::Num(v)) => Node::Const(v),
                    _ => Node::Bin(*op, Box::new(l), Box::new(r)),
                },
                (_, Node::Const(k)) if *op == BinOp::Pow && k.fract() == 0.0 && k.abs() <= 64.0 => {
                    Node::PowI(Box::new(l), *k as i32)
                }
                _ => Node::Bin(*op, Box::new(l), Box::new(r)),
            }
        }
    })
}

fn run(n: &Node, s: &[f64]) -> f64 {
    match n {
        Node::Const(v) => *v,
        Node::Slot(i) => s[*i],
        Node::Neg(a) => -run(a, s),
        Node::Bin(op, a, b) => {
            let x = run(a, s);
            let y = run(b, s);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Pow => x.powf(y),
            }
        }
        Node::PowI(a, k) => run(a, s).powi(*k),
        Node::Call(f, a) => {
            let v = run(a, s);
            match f {
                Func::Log if v <= 0.0 => f64::NAN,
                _ => f.apply(v),
            }
        }
    }
}
