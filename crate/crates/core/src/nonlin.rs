//! Registry of coordinatewise nonlinearities.
//!
//! Names follow a small grammar:
//! - `tanh`, `relu`, ... are base functions;
//! - `d:tanh`, `d2:tanh` are derivatives;
//! - `scale:<unary>` is `(x, y) -> u(x) * y`;
//! - `bn:<unary>` is the batchnorm coordinate map with `params[0]` the coordinate;
//! - `lin` with coefficient params, and `prod`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::f64::consts::PI;
use std::fmt;

use crate::error::{unsupported, Result, TpError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinRef {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl NonlinRef {
    pub fn new(name: &str, params: &[f64]) -> Self {
        NonlinRef { name: name.to_string(), params: params.to_vec() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Base {
    Id,
    Relu,
    Abs,
    Sign,
    Step,
    Tanh,
    Erf,
    Quadratic,
    Square,
    Cube,
    SoftThreshold(f64),
}

impl Base {
    fn name(&self) -> &'static str {
        match self {
            Base::Id => "id",
            Base::Relu => "relu",
            Base::Abs => "abs",
            Base::Sign => "sign",
            Base::Step => "step",
            Base::Tanh => "tanh",
            Base::Erf => "erf",
            Base::Quadratic => "quadratic",
            Base::Square => "sq",
            Base::Cube => "cube",
            Base::SoftThreshold(_) => "soft_threshold",
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            Base::SoftThreshold(l) => vec![*l],
            _ => vec![],
        }
    }

    /// Parse a base name; returns the base and the number of params consumed.
    fn parse(name: &str, params: &[f64]) -> Result<(Base, usize)> {
        let b = match name {
            "id" => Base::Id,
            "relu" => Base::Relu,
            "abs" => Base::Abs,
            "sign" => Base::Sign,
            "step" => Base::Step,
            "tanh" => Base::Tanh,
            "erf" => Base::Erf,
            "quadratic" => Base::Quadratic,
            "sq" => Base::Square,
            "cube" => Base::Cube,
            "soft_threshold" => {
                let l = *params
                    .first()
                    .ok_or_else(|| TpError::Unsupported("soft_threshold needs a threshold param".into()))?;
                return Ok((Base::SoftThreshold(l), 1));
            }
            _ => return unsupported(format!("unknown nonlinearity '{name}'")),
        };
        Ok((b, 0))
    }
}

/// A unary function: the `order`-th derivative of a base function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unary {
    pub base: Base,
    pub order: u32,
}

/// Derivative of a unary map.
#[derive(Clone, Debug, PartialEq)]
pub enum UnaryDeriv {
    Zero,
    Const(f64),
    Fn(Unary),
    /// Sum of `scale * delta(x - loc)`.
    Delta(Vec<(f64, f64)>),
    Unsupported,
}

impl Unary {
    pub fn base(base: Base) -> Self {
        Unary { base, order: 0 }
    }

    fn canonical(self) -> Result<Unary> {
        let u = match (self.base, self.order) {
            (Base::Relu, 1) => Unary::base(Base::Step),
            (Base::Abs, 1) => Unary::base(Base::Sign),
            (Base::Quadratic, 1) => Unary::base(Base::Id),
            (Base::Id, 0)
            | (Base::Relu, 0)
            | (Base::Abs, 0)
            | (Base::Sign, 0)
            | (Base::Step, 0)
            | (Base::Quadratic, 0)
            | (Base::Square, 0..=1)
            | (Base::Cube, 0..=2)
            | (Base::SoftThreshold(_), 0..=1)
            | (Base::Tanh, 0..=3)
            | (Base::Erf, _) => self,
            _ => {
                return unsupported(format!(
                    "derivative of order {} of '{}' is not a pointwise function",
                    self.order,
                    self.base.name()
                ))
            }
        };
        Ok(u)
    }

    pub fn name(&self) -> String {
        match self.order {
            0 => self.base.name().to_string(),
            1 => format!("d:{}", self.base.name()),
            k => format!("d{}:{}", k, self.base.name()),
        }
    }

    fn parse(name: &str, params: &[f64]) -> Result<(Unary, usize)> {
        let (order, rest) = match name.split_once(':') {
            Some((d, rest)) if d == "d" => (1, rest),
            Some((d, rest)) if d.starts_with('d') && d[1..].parse::<u32>().is_ok() => {
                (d[1..].parse::<u32>().unwrap(), rest)
            }
            Some(_) => return unsupported(format!("unknown nonlinearity '{name}'")),
            None => (0, name),
        };
        let (base, used) = Base::parse(rest, params)?;
        Ok((Unary { base, order }.canonical()?, used))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match (self.base, self.order) {
            (Base::Id, 0) => x,
            (Base::Relu, 0) => x.max(0.0),
            (Base::Abs, 0) => x.abs(),
            (Base::Sign, 0) => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            (Base::Step, 0) => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            (Base::Quadratic, 0) => 0.5 * x * x,
            (Base::Square, 0) => x * x,
            (Base::Square, 1) => 2.0 * x,
            (Base::Cube, 0) => x * x * x,
            (Base::Cube, 1) => 3.0 * x * x,
            (Base::Cube, 2) => 6.0 * x,
            (Base::SoftThreshold(l), 0) => x.signum() * (x.abs() - l).max(0.0),
            (Base::SoftThreshold(l), 1) => {
                if x.abs() > l {
                    1.0
                } else {
                    0.0
                }
            }
            (Base::Tanh, k) => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                match k {
                    0 => t,
                    1 => s,
                    2 => -2.0 * t * s,
                    _ => s * (6.0 * t * t - 2.0),
                }
            }
            (Base::Erf, 0) => erf(x),
            (Base::Erf, k) => {
                let (mut h0, mut h1) = (1.0, 2.0 * x);
                let n = k - 1;
                let h = if n == 0 {
                    h0
                } else {
                    for j in 1..n {
                        let h2 = 2.0 * x * h1 - 2.0 * j as f64 * h0;
                        h0 = h1;
                        h1 = h2;
                    }
                    h1
                };
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * 2.0 / PI.sqrt() * h * (-x * x).exp()
            }
            _ => f64::NAN,
        }
    }

    pub fn derivative(&self) -> UnaryDeriv {
        match (self.base, self.order) {
            (Base::Id, 0) => UnaryDeriv::Const(1.0),
            (Base::Relu, 0) => UnaryDeriv::Fn(Unary::base(Base::Step)),
            (Base::Abs, 0) => UnaryDeriv::Fn(Unary::base(Base::Sign)),
            (Base::Sign, 0) => UnaryDeriv::Delta(vec![(2.0, 0.0)]),
            (Base::Step, 0) => UnaryDeriv::Delta(vec![(1.0, 0.0)]),
            (Base::Quadratic, 0) => UnaryDeriv::Fn(Unary::base(Base::Id)),
            (Base::Square, 1) => UnaryDeriv::Const(2.0),
            (Base::Cube, 2) => UnaryDeriv::Const(6.0),
            (Base::SoftThreshold(l), 1) => UnaryDeriv::Delta(vec![(1.0, l), (-1.0, -l)]),
            (Base::Tanh, 3) => UnaryDeriv::Unsupported,
            (b, k) => UnaryDeriv::Fn(Unary { base: b, order: k + 1 }),
        }
    }

    /// Points where the function is not smooth.
    pub fn kinks(&self) -> Vec<f64> {
        match (self.base, self.order) {
            (Base::Relu, 0) | (Base::Abs, 0) | (Base::Sign, 0) | (Base::Step, 0) => vec![0.0],
            (Base::SoftThreshold(l), _) => vec![-l, l],
            _ => vec![],
        }
    }

    /// Closed form of `E[u(Y)]` for `Y ~ N(m, s2)` when available.
    pub fn gaussian_mean(&self, m: f64, s2: f64) -> Option<f64> {
        let s = s2.max(0.0).sqrt();
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        let cdf = |x: f64| 0.5 * (1.0 + erf(x / 2f64.sqrt()));
        match (self.base, self.order) {
            (Base::Id, 0) => Some(m),
            (Base::Step, 0) if s > 0.0 => Some(cdf(m / s)),
            (Base::Relu, 0) if s > 0.0 => Some(m * cdf(m / s) + s * pdf(m / s)),
            (Base::Quadratic, 0) => Some(0.5 * (m * m + s2)),
            (Base::Square, 0) => Some(m * m + s2),
            _ => None,
        }
    }
}

/// A resolved registry function.
#[derive(Clone, Debug, PartialEq)]
pub enum Func {
    Unary(Unary),
    /// `(x, y) -> u(x) * y`.
    Scale(Unary),
    Lin(Vec<f64>),
    Prod,
    /// Batchnorm coordinate map: `u((z_i - mean) / std)` for coordinate `index`.
    BatchNorm { inner: Unary, index: usize },
}

/// Partial derivative of a [`Func`] with respect to one argument, in terms of the
/// original arguments.
#[derive(Clone, Debug, PartialEq)]
pub enum Partial {
    Zero,
    Const(f64),
    Arg(usize),
    Apply(Func, Vec<usize>),
    Delta { arg: usize, points: Vec<(f64, f64)> },
    Mul(Box<Partial>, Box<Partial>),
    Unsupported,
}

impl Func {
    pub fn resolve(r: &NonlinRef) -> Result<Func> {
        let name = r.name.as_str();
        if name == "lin" {
            return Ok(Func::Lin(r.params.clone()));
        }
        if name == "prod" {
            return Ok(Func::Prod);
        }
        if let Some(rest) = name.strip_prefix("scale:") {
            let (u, _) = Unary::parse(rest, &r.params)?;
            return Ok(Func::Scale(u));
        }
        if let Some(rest) = name.strip_prefix("bn:") {
            let index = *r
                .params
                .first()
                .ok_or_else(|| TpError::Unsupported("bn needs a coordinate index param".into()))?;
            if index < 0.0 || index.fract() != 0.0 {
                return unsupported("bn coordinate index must be a non-negative integer");
            }
            let (inner, _) = Unary::parse(rest, &r.params[1..])?;
            return Ok(Func::BatchNorm { inner, index: index as usize });
        }
        let (u, _) = Unary::parse(name, &r.params)?;
        Ok(Func::Unary(u))
    }

    pub fn to_ref(&self) -> NonlinRef {
        match self {
            Func::Unary(u) => NonlinRef { name: u.name(), params: u.base.params() },
            Func::Scale(u) => NonlinRef { name: format!("scale:{}", u.name()), params: u.base.params() },
            Func::Lin(c) => NonlinRef { name: "lin".into(), params: c.clone() },
            Func::Prod => NonlinRef { name: "prod".into(), params: vec![] },
            Func::BatchNorm { inner, index } => {
                let mut p = vec![*index as f64];
                p.extend(inner.base.params());
                NonlinRef { name: format!("bn:{}", inner.name()), params: p }
            }
        }
    }

    pub fn unary(name: &str) -> Result<Func> {
        Func::resolve(&NonlinRef::new(name, &[]))
    }

    /// Check an arity; `None` accepts any positive arity.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Func::Unary(_) => Some(1),
            Func::Scale(_) => Some(2),
            Func::Lin(c) => Some(c.len()),
            Func::Prod | Func::BatchNorm { .. } => None,
        }
    }

    pub fn check_arity(&self, n: usize) -> Result<()> {
        if n == 0 {
            return unsupported("nonlinearity applied to no arguments");
        }
        if let Some(a) = self.arity() {
            if a != n {
                return unsupported(format!("'{}' expects {} arguments, got {}", self.to_ref().name, a, n));
            }
        }
        if let Func::BatchNorm { index, .. } = self {
            if *index >= n {
                return unsupported(format!("bn coordinate {index} out of range for batch {n}"));
            }
        }
        Ok(())
    }

    /// Kink points in the first argument, for maps that are smooth elsewhere.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Func::Unary(u) | Func::Scale(u) => u.kinks(),
            _ => vec![],
        }
    }

    /// Polynomial maps, for which Gauss-Hermite rules are exact.
    pub fn is_polynomial(&self) -> bool {
        let poly = |u: &Unary| matches!(u.base, Base::Id | Base::Quadratic | Base::Square | Base::Cube);
        match self {
            Func::Unary(u) | Func::Scale(u) => poly(u),
            Func::Lin(_) | Func::Prod => true,
            Func::BatchNorm { .. } => false,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Func::Lin(_) | Func::Unary(Unary { base: Base::Id, order: 0 }))
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        match self {
            Func::Unary(u) => u.eval(args[0]),
            Func::Scale(u) => u.eval(args[0]) * args[1],
            Func::Lin(c) => c.iter().zip(args).map(|(a, x)| a * x).sum(),
            Func::Prod => args.iter().product(),
            Func::BatchNorm { inner, index } => {
                let b = args.len() as f64;
                let mean = args.iter().sum::<f64>() / b;
                let var = args.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / b;
                if var <= 0.0 {
                    return inner.eval(0.0);
                }
                inner.eval((args[*index] - mean) / var.sqrt())
            }
        }
    }

    pub fn partial(&self, k: usize, nargs: usize) -> Partial {
        match self {
            Func::Unary(u) => unary_partial(u, 0),
            Func::Scale(u) => {
                if k == 1 {
                    return Partial::Apply(Func::Unary(*u), vec![0]);
                }
                match unary_partial(u, 0) {
                    Partial::Zero => Partial::Zero,
                    Partial::Unsupported => Partial::Unsupported,
                    p => Partial::Mul(Box::new(p), Box::new(Partial::Arg(1))),
                }
            }
            Func::Lin(c) => Partial::Const(c[k]),
            Func::Prod => {
                let others: Vec<usize> = (0..nargs).filter(|&j| j != k).collect();
                if others.is_empty() {
                    Partial::Const(1.0)
                } else {
                    Partial::Apply(Func::Prod, others)
                }
            }
            Func::BatchNorm { .. } => Partial::Unsupported,
        }
    }
}

fn unary_partial(u: &Unary, arg: usize) -> Partial {
    match u.derivative() {
        UnaryDeriv::Zero => Partial::Zero,
        UnaryDeriv::Const(c) => Partial::Const(c),
        UnaryDeriv::Fn(d) => Partial::Apply(Func::Unary(d), vec![arg]),
        UnaryDeriv::Delta(points) => Partial::Delta { arg, points },
        UnaryDeriv::Unsupported => Partial::Unsupported,
    }
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.to_ref();
        if r.params.is_empty() {
            write!(f, "{}", r.name)
        } else {
            let p: Vec<String> = r.params.iter().map(|x| format!("{x}")).collect();
            write!(f, "{}[{}]", r.name, p.join(", "))
        }
    }
}

impl Serialize for Func {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_ref().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Func {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = NonlinRef::deserialize(d)?;
        Func::resolve(&r).map_err(serde::de::Error::custom)
    }
}
