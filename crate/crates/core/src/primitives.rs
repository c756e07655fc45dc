//! Catalog of univariate parameterized primitive functions.
//!
//! Every class is evaluated under a small set of guards so that it is a total,
//! finite function of its input and parameters:
//!
//! * `LogAffine` evaluates `a*ln(max(b*x + c, 1e-6))`; while the floor is active
//!   the input derivative and the `b`, `c` gradients are zero.
//! * Rational denominators are pushed out to `|den| >= 1e-6` keeping their sign;
//!   while the clamp is active the denominator is treated as a constant.
//! * Outputs (and derivatives) are clamped to `±1e30`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::SmpfError;
use crate::scalar::{clamp_magnitude, saturate, saturate_slope, Scalar, GUARD_EPS};

/// Largest parameter count of any class.
pub const MAX_ARITY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveClass {
    /// `a*x^3 + b*x^2 + c*x + d`
    Poly3,
    /// `a*exp(-b*x)`
    ExpDecay,
    /// `a*sin(b*x + c)`
    Sinusoid,
    /// `a*log(b*x + c)`
    LogAffine,
    /// `a*x / (b*x^2 + c*x + d)`
    RationalLinOverQuad,
    /// `a*atan(b*x + c)`
    ArcTan,
    /// `(a*x + b) / (c*x + d)`
    Mobius,
}

impl PrimitiveClass {
    pub const ALL: [PrimitiveClass; 7] = [
        PrimitiveClass::Poly3,
        PrimitiveClass::ExpDecay,
        PrimitiveClass::Sinusoid,
        PrimitiveClass::LogAffine,
        PrimitiveClass::RationalLinOverQuad,
        PrimitiveClass::ArcTan,
        PrimitiveClass::Mobius,
    ];

    pub const fn arity(self) -> usize {
        match self {
            PrimitiveClass::Poly3 => 4,
            PrimitiveClass::ExpDecay => 2,
            PrimitiveClass::Sinusoid => 3,
            PrimitiveClass::LogAffine => 3,
            PrimitiveClass::RationalLinOverQuad => 4,
            PrimitiveClass::ArcTan => 3,
            PrimitiveClass::Mobius => 4,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            PrimitiveClass::Poly3 => "poly3",
            PrimitiveClass::ExpDecay => "exp_decay",
            PrimitiveClass::Sinusoid => "sinusoid",
            PrimitiveClass::LogAffine => "log_affine",
            PrimitiveClass::RationalLinOverQuad => "rational_lin_over_quad",
            PrimitiveClass::ArcTan => "arc_tan",
            PrimitiveClass::Mobius => "mobius",
        }
    }
}

impl fmt::Display for PrimitiveClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveClass {
    type Err = SmpfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrimitiveClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SmpfError::Config(format!("unknown primitive class `{s}`")))
    }
}

/// The classes available to the evolutionary search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FunctionSetRepr", into = "FunctionSetRepr")]
pub struct FunctionSet {
    classes: Vec<PrimitiveClass>,
}

impl FunctionSet {
    pub fn new(classes: Vec<PrimitiveClass>) -> Result<Self, SmpfError> {
        if classes.is_empty() {
            return Err(SmpfError::Config("function set must not be empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(SmpfError::Config(format!(
                    "function set lists `{c}` more than once"
                )));
            }
        }
        Ok(FunctionSet { classes })
    }

    /// Polynomial, exponential, sinusoid, logarithm and rational classes.
    pub fn main5() -> Self {
        use PrimitiveClass::*;
        FunctionSet {
            classes: vec![Poly3, ExpDecay, Sinusoid, LogAffine, RationalLinOverQuad],
        }
    }

    pub fn set1() -> Self {
        use PrimitiveClass::*;
        FunctionSet {
            classes: vec![ExpDecay, Sinusoid, Poly3],
        }
    }

    pub fn set2() -> Self {
        use PrimitiveClass::*;
        FunctionSet {
            classes: vec![Poly3, ArcTan, Mobius],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "main5" => Some(Self::main5()),
            "set1" => Some(Self::set1()),
            "set2" => Some(Self::set2()),
            _ => None,
        }
    }

    pub fn classes(&self) -> &[PrimitiveClass] {
        &self.classes
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> PrimitiveClass {
        self.classes[rng.random_range(0..self.classes.len())]
    }
}

impl Default for FunctionSet {
    fn default() -> Self {
        Self::main5()
    }
}

/// Either a preset name or an explicit class list.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FunctionSetRepr {
    Preset(String),
    Classes(Vec<PrimitiveClass>),
}

impl TryFrom<FunctionSetRepr> for FunctionSet {
    type Error = SmpfError;

    fn try_from(r: FunctionSetRepr) -> Result<Self, Self::Error> {
        match r {
            FunctionSetRepr::Preset(name) => FunctionSet::preset(&name).ok_or_else(|| {
                SmpfError::Config(format!(
                    "unknown function set `{name}` (expected main5, set1 or set2)"
                ))
            }),
            FunctionSetRepr::Classes(c) => FunctionSet::new(c),
        }
    }
}

impl From<FunctionSet> for FunctionSetRepr {
    fn from(s: FunctionSet) -> Self {
        for name in ["main5", "set1", "set2"] {
            if FunctionSet::preset(name).as_ref() == Some(&s) {
                return FunctionSetRepr::Preset(name.to_string());
            }
        }
        FunctionSetRepr::Classes(s.classes)
    }
}

/// Value, input derivative and parameter gradient at one point.
#[derive(Debug, Clone, Copy)]
pub struct Jet<T> {
    pub value: T,
    pub dx: T,
    pub grad: [T; MAX_ARITY],
}

/// A primitive class together with its parameter values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveFunction<T> {
    class: PrimitiveClass,
    params: [T; MAX_ARITY],
}

impl<T: Scalar> PrimitiveFunction<T> {
    /// Panics if `params.len()` differs from the class arity.
    pub fn new(class: PrimitiveClass, params: &[T]) -> Self {
        assert_eq!(
            params.len(),
            class.arity(),
            "{class} takes {} parameters",
            class.arity()
        );
        let mut p = [T::zero(); MAX_ARITY];
        p[..params.len()].copy_from_slice(params);
        PrimitiveFunction { class, params: p }
    }

    pub fn try_new(class: PrimitiveClass, params: &[T]) -> Result<Self, SmpfError> {
        if params.len() != class.arity() {
            return Err(SmpfError::InvalidTree(format!(
                "{class} takes {} parameters, got {}",
                class.arity(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SmpfError::InvalidTree(format!(
                "{class} has a non-finite parameter"
            )));
        }
        Ok(Self::new(class, params))
    }

    /// Draws every parameter from the standard normal distribution.
    pub fn random<R: Rng + ?Sized>(class: PrimitiveClass, rng: &mut R) -> Self {
        let mut p = [T::zero(); MAX_ARITY];
        for slot in p.iter_mut().take(class.arity()) {
            let z: f64 = rng.sample(StandardNormal);
            *slot = T::of(z);
        }
        PrimitiveFunction { class, params: p }
    }

    pub fn class(&self) -> PrimitiveClass {
        self.class
    }

    pub fn arity(&self) -> usize {
        self.class.arity()
    }

    pub fn params(&self) -> &[T] {
        &self.params[..self.class.arity()]
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        let n = self.class.arity();
        &mut self.params[..n]
    }

    pub fn eval(&self, x: T) -> T {
        self.jet(x).value
    }

    pub fn deriv_x(&self, x: T) -> T {
        self.jet(x).dx
    }

    pub fn grad_params(&self, x: T) -> Vec<T> {
        self.jet(x).grad[..self.arity()].to_vec()
    }

    /// Evaluates the function, its input derivative and its parameter gradient together.
    pub fn jet(&self, x: T) -> Jet<T> {
        let [a, b, c, d] = self.params;
        let zero = T::zero();
        let one = T::one();
        let two = T::of(2.0);
        let three = T::of(3.0);
        let (value, dx, grad) = match self.class {
            PrimitiveClass::Poly3 => {
                let x2 = x * x;
                let x3 = x2 * x;
                (
                    a * x3 + b * x2 + c * x + d,
                    three * a * x2 + two * b * x + c,
                    [x3, x2, x, one],
                )
            }
            PrimitiveClass::ExpDecay => {
                let e = (-b * x).exp();
                let value = if a == zero { zero } else { a * e };
                (value, -a * b * e, [e, -a * x * e, zero, zero])
            }
            PrimitiveClass::Sinusoid => {
                let u = b * x + c;
                let (s, co) = u.sin_cos();
                (a * s, a * b * co, [s, a * x * co, a * co, zero])
            }
            PrimitiveClass::LogAffine => {
                let u = b * x + c;
                let eps = T::of(GUARD_EPS);
                if u > eps {
                    let inv = u.recip();
                    (a * u.ln(), a * b * inv, [u.ln(), a * x * inv, a * inv, zero])
                } else {
                    let l = eps.ln();
                    (a * l, zero, [l, zero, zero, zero])
                }
            }
            PrimitiveClass::RationalLinOverQuad => {
                let (q, clamped) = clamp_magnitude(b * x * x + c * x + d);
                let num = a * x;
                let inv = q.recip();
                if clamped {
                    (num * inv, a * inv, [x * inv, zero, zero, zero])
                } else {
                    let dq = two * b * x + c;
                    let k = -num * inv * inv;
                    (
                        num * inv,
                        (a * q - num * dq) * inv * inv,
                        [x * inv, k * x * x, k * x, k],
                    )
                }
            }
            PrimitiveClass::ArcTan => {
                let u = b * x + c;
                let w = (one + u * u).recip();
                (a * u.atan(), a * b * w, [u.atan(), a * x * w, a * w, zero])
            }
            PrimitiveClass::Mobius => {
                let (q, clamped) = clamp_magnitude(c * x + d);
                let num = a * x + b;
                let inv = q.recip();
                if clamped {
                    (num * inv, a * inv, [x * inv, inv, zero, zero])
                } else {
                    let k = -num * inv * inv;
                    (
                        num * inv,
                        (a * q - num * c) * inv * inv,
                        [x * inv, inv, k * x, k],
                    )
                }
            }
        };
        Jet {
            value: saturate(value),
            dx: saturate_slope(dx),
            grad: grad.map(saturate_slope),
        }
    }

    /// Infix rendering with `arg` substituted for the input and coefficients
    /// rounded to `precision` decimals, e.g. `1.0*exp(-2.0*u)`.
    pub fn render(&self, arg: &str, precision: usize) -> String {
        self.render_piece(&Piece::classify(arg), precision.max(1)).text
    }

    pub(crate) fn render_piece(&self, arg: &Piece, precision: usize) -> Piece {
        let p: Vec<f64> = self.params().iter().map(|v| v.as_f64()).collect();
        let fmt = Fmt { precision };
        match self.class {
            PrimitiveClass::Poly3 => fmt.linear(&[
                (p[0], Some(arg.pow(3))),
                (p[1], Some(arg.pow(2))),
                (p[2], Some(arg.clone())),
                (p[3], None),
            ]),
            PrimitiveClass::ExpDecay => {
                let inner = fmt.linear(&[(-p[1], Some(arg.clone()))]);
                fmt.linear(&[(p[0], Some(Piece::call("exp", &inner)))])
            }
            PrimitiveClass::Sinusoid => {
                let inner = fmt.linear(&[(p[1], Some(arg.clone())), (p[2], None)]);
                fmt.linear(&[(p[0], Some(Piece::call("sin", &inner)))])
            }
            PrimitiveClass::LogAffine => {
                let inner = fmt.linear(&[(p[1], Some(arg.clone())), (p[2], None)]);
                fmt.linear(&[(p[0], Some(Piece::call("log", &inner)))])
            }
            PrimitiveClass::ArcTan => {
                let inner = fmt.linear(&[(p[1], Some(arg.clone())), (p[2], None)]);
                fmt.linear(&[(p[0], Some(Piece::call("atan", &inner)))])
            }
            PrimitiveClass::RationalLinOverQuad => {
                let num = fmt.linear(&[(p[0], Some(arg.clone()))]);
                let den = fmt.linear(&[
                    (p[1], Some(arg.pow(2))),
                    (p[2], Some(arg.clone())),
                    (p[3], None),
                ]);
                Piece::quotient(&num, &den)
            }
            PrimitiveClass::Mobius => {
                let num = fmt.linear(&[(p[0], Some(arg.clone())), (p[1], None)]);
                let den = fmt.linear(&[(p[2], Some(arg.clone())), (p[3], None)]);
                Piece::quotient(&num, &den)
            }
        }
    }
}

/// Binding strength of a rendered fragment's outermost operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Level {
    Sum,
    Product,
    Atom,
}

#[derive(Debug, Clone)]
pub(crate) struct Piece {
    pub text: String,
    pub level: Level,
}

impl Piece {
    /// Classify free text: identifiers and plain numbers are atoms, anything else is
    /// treated as a sum so it is always parenthesized where it matters.
    pub fn classify(text: &str) -> Piece {
        let atomic = !text.is_empty()
            && text
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.');
        Piece {
            text: text.to_string(),
            level: if atomic { Level::Atom } else { Level::Sum },
        }
    }

    fn at_least(&self, level: Level) -> String {
        if self.level < level || (level > Level::Sum && self.text.starts_with('-')) {
            format!("({})", self.text)
        } else {
            self.text.clone()
        }
    }

    fn pow(&self, n: u32) -> Piece {
        Piece {
            text: format!("{}^{n}", self.at_least(Level::Atom)),
            level: Level::Product,
        }
    }

    fn call(name: &str, arg: &Piece) -> Piece {
        Piece {
            text: format!("{name}({})", arg.text),
            level: Level::Atom,
        }
    }

    fn quotient(num: &Piece, den: &Piece) -> Piece {
        Piece {
            text: format!("{}/{}", num.at_least(Level::Product), den.at_least(Level::Atom)),
            level: Level::Product,
        }
    }

    /// `a + b - c ...`, folding a leading minus of each addend into the operator.
    pub fn sum(parts: &[Piece]) -> Piece {
        match parts {
            [] => Piece {
                text: "0".into(),
                level: Level::Atom,
            },
            [only] => only.clone(),
            [first, rest @ ..] => {
                let mut text = first.text.clone();
                for p in rest {
                    match p.text.strip_prefix('-') {
                        Some(tail) => {
                            text.push_str(" - ");
                            text.push_str(tail);
                        }
                        None => {
                            text.push_str(" + ");
                            text.push_str(&p.text);
                        }
                    }
                }
                Piece {
                    text,
                    level: Level::Sum,
                }
            }
        }
    }
}

struct Fmt {
    precision: usize,
}

impl Fmt {
    fn number(&self, v: f64) -> Option<String> {
        let s = format!("{:.*}", self.precision, v);
        match s.parse::<f64>() {
            Ok(r) if r == 0.0 => None,
            _ => Some(s),
        }
    }

    /// Sum of `coef*body` terms; terms whose coefficient rounds to zero are dropped.
    fn linear(&self, terms: &[(f64, Option<Piece>)]) -> Piece {
        let parts: Vec<Piece> = terms
            .iter()
            .filter_map(|(coef, body)| {
                let c = self.number(*coef)?;
                Some(match body {
                    Some(b) => Piece {
                        text: format!("{c}*{}", b.at_least(Level::Product)),
                        level: Level::Product,
                    },
                    None => Piece {
                        level: if c.starts_with('-') {
                            Level::Product
                        } else {
                            Level::Atom
                        },
                        text: c,
                    },
                })
            })
            .collect();
        if parts.is_empty() {
            return Piece {
                text: format!("{:.*}", self.precision, 0.0),
                level: Level::Atom,
            };
        }
        Piece::sum(&parts)
    }
}
