use super::{add, call, div, mul, neg, pow, sub, BinOp, Expr, Func};

fn depends_on(e: &Expr, var: &str) -> bool {
    match e {
        Expr::Var(n) => n == var,
        Expr::Num(_) | Expr::Pi => false,
        Expr::Neg(a) | Expr::Call(_, a) => depends_on(a, var),
        Expr::Binary(_, a, b) => depends_on(a, var) || depends_on(b, var),
    }
}

pub(super) fn derivative(e: &Expr, var: &str) -> Expr {
    if !depends_on(e, var) {
        return Expr::Num(0.0);
    }
    match e {
        Expr::Var(_) => Expr::Num(1.0),
        Expr::Num(_) | Expr::Pi => Expr::Num(0.0),
        Expr::Neg(a) => neg(derivative(a, var)),
        Expr::Binary(op, a, b) => {
            let da = derivative(a, var);
            let db = derivative(b, var);
            let (a, b) = (a.as_ref().clone(), b.as_ref().clone());
            match op {
                BinOp::Add => add(da, db),
                BinOp::Sub => sub(da, db),
                BinOp::Mul => add(mul(da, b), mul(a, db)),
                BinOp::Div => {
                    if db.is_zero() {
                        div(da, b)
                    } else {
                        div(sub(mul(da, b.clone()), mul(a, db)), pow(b, Expr::Num(2.0)))
                    }
                }
                BinOp::Pow => {
                    if !depends_on(&b, var) {
                        let lowered = match b.as_const() {
                            Some(k) => Expr::Num(k - 1.0),
                            None => sub(b.clone(), Expr::Num(1.0)),
                        };
                        mul(mul(b, pow(a, lowered)), da)
                    } else {
                        // d(a^b) = a^b * (b' log a + b a'/a)
                        let whole = Expr::Binary(BinOp::Pow, Box::new(a.clone()), Box::new(b.clone()));
                        let t1 = mul(db, call(Func::Log, a.clone()));
                        let t2 = div(mul(b, da), a);
                        mul(whole, add(t1, t2))
                    }
                }
            }
        }
        Expr::Call(f, a) => {
            let da = derivative(a, var);
            let u = a.as_ref().clone();
            let outer = match f {
                Func::Sin => call(Func::Cos, u),
                Func::Cos => neg(call(Func::Sin, u)),
                Func::Tan => div(Expr::Num(1.0), pow(call(Func::Cos, u), Expr::Num(2.0))),
                Func::Exp => call(Func::Exp, u),
                Func::Log => div(Expr::Num(1.0), u),
                Func::Sqrt => div(Expr::Num(1.0), mul(Expr::Num(2.0), call(Func::Sqrt, u))),
                Func::Abs => call(Func::Sign, u),
                Func::Sign => Expr::Num(0.0),
            };
            mul(da, outer)
        }
    }
}
