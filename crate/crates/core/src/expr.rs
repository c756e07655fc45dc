//! Closed-form expression grammar shared by the renderer and the target registry.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'x_' digits | func '(' expr ')' | '(' expr ')'
//! func   := exp | sin | log | atan | sqrt | sinc
//! ```
//!
//! Whitespace is ignored between tokens. Evaluation uses the same guards as the
//! primitive catalog: `log(u)` is `ln(max(u, 1e-6))`, a denominator smaller than
//! `1e-6` in magnitude is pushed out to `±1e-6`, and the final value is clamped
//! to `±1e30` (NaN reads as `+1e30`). `sqrt` reads negative arguments as zero and
//! `sinc(u) = sin(pi*u)/(pi*u)` with `sinc(0) = 1`.

use std::fmt;

use crate::error::{Result, SmpfError};
use crate::scalar::{clamp_magnitude, saturate, Scalar, GUARD_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sin,
    Log,
    Atan,
    Sqrt,
    Sinc,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Log => "log",
            Func::Atan => "atan",
            Func::Sqrt => "sqrt",
            Func::Sinc => "sinc",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "log" => Func::Log,
            "atan" => Func::Atan,
            "sqrt" => Func::Sqrt,
            "sinc" => Func::Sinc,
            _ => return None,
        })
    }

    fn apply<T: Scalar>(self, u: T) -> T {
        match self {
            Func::Exp => u.exp(),
            Func::Sin => u.sin(),
            Func::Log => u.max(T::of(GUARD_EPS)).ln(),
            Func::Atan => u.atan(),
            Func::Sqrt => u.max(T::zero()).sqrt(),
            Func::Sinc => {
                let z = T::PI() * u;
                if z.abs() < T::of(1e-8) {
                    T::one()
                } else {
                    z.sin() / z
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            end: src.len(),
        };
        let expr = parser.expr()?;
        if let Some((tok, offset)) = parser.tokens.get(parser.pos) {
            return Err(SmpfError::Parse {
                offset: *offset,
                message: format!("unexpected trailing {tok}"),
            });
        }
        Ok(expr)
    }

    /// Number of features the expression needs: one past the largest `x_i` index.
    pub fn dim(&self) -> usize {
        match self {
            Expr::Num(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a) | Expr::Call(_, a) => a.dim(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.dim().max(b.dim()),
        }
    }

    /// Evaluate at `x`. Panics if `x` is shorter than [`Expr::dim`].
    pub fn eval<T: Scalar>(&self, x: &[T]) -> T {
        saturate(self.raw(x))
    }

    fn raw<T: Scalar>(&self, x: &[T]) -> T {
        match self {
            Expr::Num(v) => T::of(*v),
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.raw(x),
            Expr::Add(a, b) => a.raw(x) + b.raw(x),
            Expr::Sub(a, b) => a.raw(x) - b.raw(x),
            Expr::Mul(a, b) => a.raw(x) * b.raw(x),
            Expr::Div(a, b) => {
                let (den, _) = clamp_magnitude(b.raw(x));
                a.raw(x) / den
            }
            Expr::Pow(a, b) => {
                let base = a.raw(x);
                let exp = b.raw(x);
                if exp == exp.round() && exp.abs() <= T::of(64.0) {
                    base.powi(exp.to_i32().unwrap_or(0))
                } else {
                    base.powf(exp)
                }
            }
            Expr::Call(f, a) => f.apply(a.raw(x)),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn side(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "x_{i}"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                side(f, a, 3)
            }
            Expr::Add(a, b) => {
                side(f, a, 1)?;
                f.write_str(" + ")?;
                side(f, b, 2)
            }
            Expr::Sub(a, b) => {
                side(f, a, 1)?;
                f.write_str(" - ")?;
                side(f, b, 2)
            }
            Expr::Mul(a, b) => {
                side(f, a, 2)?;
                f.write_str("*")?;
                side(f, b, 3)
            }
            Expr::Div(a, b) => {
                side(f, a, 2)?;
                f.write_str("/")?;
                side(f, b, 4)
            }
            Expr::Pow(a, b) => {
                side(f, a, 5)?;
                f.write_str("^")?;
                side(f, b, 4)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Var(usize),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(v) => write!(f, "number {v}"),
            Token::Var(i) => write!(f, "variable x_{i}"),
            Token::Ident(s) => write!(f, "identifier `{s}`"),
            Token::Op(c) => write!(f, "`{c}`"),
            Token::LParen => f.write_str("`(`"),
            Token::RParen => f.write_str("`)`"),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push((Token::Op(c as char), start));
                i += 1;
            }
            b'(' => {
                out.push((Token::LParen, start));
                i += 1;
            }
            b')' => {
                out.push((Token::RParen, start));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| SmpfError::Parse {
                    offset: start,
                    message: format!("invalid number `{text}`"),
                })?;
                out.push((Token::Num(v), start));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = &src[start..i];
                let tok = match word.strip_prefix("x_") {
                    Some(idx) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => {
                        Token::Var(idx.parse().map_err(|_| SmpfError::Parse {
                            offset: start,
                            message: format!("variable index out of range in `{word}`"),
                        })?)
                    }
                    _ => Token::Ident(word.to_string()),
                };
                out.push((tok, start));
            }
            _ => {
                return Err(SmpfError::Parse {
                    offset: start,
                    message: format!("unexpected character `{}`", &src[start..].chars().next().unwrap()),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(SmpfError::Parse {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Num(v) => Expr::Num(-v),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("unexpected end of input");
        };
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Token::Var(i) => {
                self.pos += 1;
                Ok(Expr::Var(i))
            }
            Token::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Token::Ident(name) => {
                let Some(func) = Func::from_name(&name) else {
                    return self.err(format!("unknown function or variable `{name}`"));
                };
                self.pos += 1;
                if self.peek() != Some(&Token::LParen) {
                    return self.err(format!("expected `(` after `{name}`"));
                }
                self.pos += 1;
                let arg = self.expr()?;
                self.expect_rparen()?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            other => self.err(format!("unexpected {other}")),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        if self.peek() == Some(&Token::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.err("expected `)`")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str, x: &[f64]) -> f64 {
        Expr::parse(src).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("1 + 2*3", &[]), 7.0);
        assert_eq!(eval("8 - 3 - 2", &[]), 3.0);
        assert_eq!(eval("2^3^2", &[]), 512.0);
        assert_eq!(eval("-2^2", &[]), -4.0);
        assert_eq!(eval("(1.5e1 - 5) / 2", &[]), 5.0);
        assert_eq!(eval("3*-x_0", &[2.0]), -6.0);
        assert_eq!(eval(" x_1 * x_0 ", &[3.0, 4.0]), 12.0);
    }

    #[test]
    fn functions_and_guards() {
        assert!((eval("exp(1)", &[]) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(eval("log(-5)", &[]), (1e-6f64).ln());
        assert_eq!(eval("1/0", &[]), 1e6);
        assert_eq!(eval("sinc(0)", &[]), 1.0);
        assert!(eval("sinc(1)", &[]).abs() < 1e-15);
        assert_eq!(eval("sqrt(-4)", &[]), 0.0);
        assert_eq!(eval("exp(1000)", &[]), 1e30);
        assert!((eval("atan(1)*4", &[]) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_offsets() {
        match Expr::parse("1 + foo(2)") {
            Err(SmpfError::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match Expr::parse("(1 + 2") {
            Err(SmpfError::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("x_").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("2 $ 3").is_err());
    }

    #[test]
    fn display_reparses_to_same_tree() {
        for src in [
            "exp(-3*x_0 + x_1)",
            "x_0*x_1/(x_0^2 + x_1)",
            "sinc(x_0^2 + x_1)",
            "-(x_0 - x_1) - -2*x_2",
            "x_0/(x_1*x_2)/x_3",
            "(x_0^2)^3 - x_0^(2 - 1)",
        ] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            assert_eq!(e, again, "{src} -> {e}");
        }
    }

    #[test]
    fn dim_counts_highest_index() {
        assert_eq!(Expr::parse("x_3 + x_0").unwrap().dim(), 4);
        assert_eq!(Expr::parse("2").unwrap().dim(), 0);
    }

    #[test]
    fn evaluates_in_f32() {
        let e = Expr::parse("x_0*x_0 + 1").unwrap();
        assert_eq!(e.eval(&[3.0f32]), 10.0f32);
    }
}
