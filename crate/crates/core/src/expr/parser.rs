use super::lexer::{tokenize, Spanned, Tok};
use super::{BinOp, Expr, Func, ParseError};

const OPERAND: &[&str] = &["number", "identifier", "'('", "'-'"];

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Spanned>,
    pos: usize,
}

pub(crate) fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(src)?;
    let mut p = Parser { src, toks, pos: 0 };
    let e = p.expr()?;
    if p.peek() != &Tok::End {
        return Err(p.unexpected(&["operator", "end of input"]));
    }
    Ok(e)
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        let s = &self.toks[self.pos];
        ParseError::new(
            self.src,
            s.offset,
            format!("unexpected {}", s.tok.describe()),
            expected.iter().map(|e| e.to_string()).collect(),
        )
    }

    // sum := product (('+' | '-') product)*
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // product := unary (('*' | '/') unary)*
    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == &Tok::Minus {
            self.bump();
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    // power := primary ('^' unary)?   (right associative through unary)
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == &Tok::Caret {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if self.peek() != &Tok::RParen {
                    return Err(self.unexpected(&["operator", "')'"]));
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                let at = self.pos;
                self.bump();
                if let Some(f) = Func::from_name(&name) {
                    if self.peek() != &Tok::LParen {
                        return Err(self.unexpected(&["'('"]));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if self.peek() != &Tok::RParen {
                        return Err(self.unexpected(&["operator", "')'"]));
                    }
                    self.bump();
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                if self.peek() == &Tok::LParen {
                    let s = &self.toks[at];
                    return Err(ParseError::new(
                        self.src,
                        s.offset,
                        format!("unknown function '{name}'"),
                        Func::ALL.iter().map(|f| f.name().to_string()).collect(),
                    ));
                }
                if name == "pi" {
                    Ok(Expr::Pi)
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.unexpected(OPERAND)),
        }
    }
}
