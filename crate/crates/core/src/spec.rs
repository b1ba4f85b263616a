//! Sampling data: matrix scales, input laws and width ratios.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;

use crate::cdc::{CdcPartition, ClassId};
use crate::dsl::{DimRef, Directive};
use crate::error::{Result, TpError};
use crate::linalg::psd_eigen;
use crate::program::{Line, Skeleton, VarId};

/// Unspecified entries default to: sigma 1, mean 0, variance 1, covariance 0,
/// relative width 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingSpec {
    pub sigma: BTreeMap<VarId, f64>,
    pub input_mean: BTreeMap<VarId, f64>,
    pub input_cov: BTreeMap<(VarId, VarId), f64>,
    /// Relative width of each class; `ratio(c, d) = scale[c] / scale[d]`.
    pub scale: BTreeMap<ClassId, f64>,
    pub widths: BTreeMap<ClassId, usize>,
}

fn key(a: VarId, b: VarId) -> (VarId, VarId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl SamplingSpec {
    pub fn new() -> Self {
        SamplingSpec::default()
    }

    /// Scale of an A-var; transposes inherit their source's.
    pub fn sigma_of(&self, sk: &Skeleton, a: VarId) -> f64 {
        let (root, _) = sk.matrix_root(a);
        *self.sigma.get(&root).unwrap_or(&1.0)
    }

    pub fn set_sigma(&mut self, a: VarId, s: f64) -> &mut Self {
        self.sigma.insert(a, s);
        self
    }

    pub fn mean_of(&self, v: VarId) -> f64 {
        *self.input_mean.get(&v).unwrap_or(&0.0)
    }

    pub fn set_mean(&mut self, v: VarId, m: f64) -> &mut Self {
        self.input_mean.insert(v, m);
        self
    }

    pub fn cov_of(&self, a: VarId, b: VarId) -> f64 {
        match self.input_cov.get(&key(a, b)) {
            Some(c) => *c,
            None if a == b => 1.0,
            None => 0.0,
        }
    }

    pub fn set_cov(&mut self, a: VarId, b: VarId, c: f64) -> &mut Self {
        self.input_cov.insert(key(a, b), c);
        self
    }

    pub fn set_var(&mut self, a: VarId, c: f64) -> &mut Self {
        self.set_cov(a, a, c)
    }

    pub fn ratio(&self, c: ClassId, d: ClassId) -> f64 {
        self.scale_of(c) / self.scale_of(d)
    }

    pub fn scale_of(&self, c: ClassId) -> f64 {
        *self.scale.get(&c).unwrap_or(&1.0)
    }

    /// Width ratio `n1 / n2` of an A-var (rows over columns).
    pub fn aspect(&self, cdc: &CdcPartition, a: VarId) -> f64 {
        match cdc.sides(a) {
            (Some(r), Some(c)) => self.ratio(r, c),
            _ => 1.0,
        }
    }

    /// Input G-vars of a class with their mean vector and covariance.
    pub fn input_block(&self, sk: &Skeleton, cdc: &CdcPartition, class: ClassId) -> (Vec<VarId>, DVector<f64>, DMatrix<f64>) {
        let vars: Vec<VarId> = cdc
            .members(class)
            .into_iter()
            .filter(|v| matches!(sk.line(*v), Line::VecIn { .. }))
            .collect();
        let n = vars.len();
        let mean = DVector::from_fn(n, |i, _| self.mean_of(vars[i]));
        let cov = DMatrix::from_fn(n, n, |i, j| self.cov_of(vars[i], vars[j]));
        (vars, mean, cov)
    }

    pub fn validate(&self, sk: &Skeleton, cdc: &CdcPartition) -> Result<()> {
        let bad = |m: String| Err(TpError::InvalidSpec(m));
        for (a, s) in &self.sigma {
            if a.line == 0 || a.line > sk.len() || !matches!(sk.line(*a), Line::MatIn { .. }) {
                return bad(format!("sigma given for {a}, which is not an input matrix"));
            }
            if !(s.is_finite() && *s >= 0.0) {
                return bad(format!("sigma of {} must be non-negative", sk.name(*a)));
            }
        }
        for v in self.input_mean.keys().chain(self.input_cov.keys().flat_map(|(a, b)| [a, b])) {
            if v.line == 0 || v.line > sk.len() || !matches!(sk.line(*v), Line::VecIn { .. }) {
                return bad(format!("input law given for {v}, which is not an input vector"));
            }
        }
        for ((a, b), _) in &self.input_cov {
            if cdc.class(*a) != cdc.class(*b) {
                return bad(format!("covariance between {} and {} in different classes", sk.name(*a), sk.name(*b)));
            }
        }
        for (c, s) in &self.scale {
            if !(s.is_finite() && *s > 0.0) {
                return bad(format!("relative width of class {c} must be positive"));
            }
        }
        for (c, w) in &self.widths {
            if *w == 0 {
                return bad(format!("width of class {c} must be positive"));
            }
        }
        for c in 0..cdc.n_classes {
            let (vars, _, cov) = self.input_block(sk, cdc, c);
            if !vars.is_empty() && psd_eigen(&cov).is_err() {
                return bad(format!("input covariance of class {c} is not positive semi-definite"));
            }
        }
        Ok(())
    }

    /// Class of a dimension reference.
    pub fn resolve_dim(sk: &Skeleton, cdc: &CdcPartition, r: &DimRef) -> Result<ClassId> {
        let none = || TpError::InvalidSpec("dimension reference has no class".into());
        match r {
            DimRef::Var(v) => {
                if v.is_a() {
                    return Err(TpError::InvalidSpec(format!("{} is a matrix, not a dimension", sk.name(*v))));
                }
                cdc.class(*v).ok_or_else(none)
            }
            DimRef::Label(l) => {
                for v in sk.vars() {
                    match sk.line(v) {
                        Line::VecIn { hint: Some(h) } if h == l => return cdc.class(v).ok_or_else(none),
                        Line::MatIn { rows, cols } => {
                            let (r, c) = cdc.sides(v);
                            if rows.as_deref() == Some(l.as_str()) {
                                return r.ok_or_else(none);
                            }
                            if cols.as_deref() == Some(l.as_str()) {
                                return c.ok_or_else(none);
                            }
                        }
                        _ => {}
                    }
                }
                Err(TpError::InvalidSpec(format!("unknown dimension label '{l}'")))
            }
        }
    }

    pub fn from_directives(sk: &Skeleton, cdc: &CdcPartition, ds: &[Directive]) -> Result<SamplingSpec> {
        let mut s = SamplingSpec::new();
        for d in ds {
            match d {
                Directive::Sigma { matrix, value } => {
                    s.set_sigma(*matrix, *value);
                }
                Directive::Mean { var, value } => {
                    s.set_mean(*var, *value);
                }
                Directive::Cov { a, b, value } => {
                    s.set_cov(*a, *b, *value);
                }
                Directive::Scale { target, value } => {
                    let c = Self::resolve_dim(sk, cdc, target)?;
                    s.scale.insert(c, *value);
                }
                Directive::Width { target, value } => {
                    let c = Self::resolve_dim(sk, cdc, target)?;
                    s.widths.insert(c, *value);
                }
            }
        }
        s.validate(sk, cdc)?;
        Ok(s)
    }

    pub fn to_json(&self, sk: &Skeleton) -> Value {
        let name = |v: &VarId| {
            if v.line >= 1 && v.line <= sk.len() {
                sk.name(*v).to_string()
            } else {
                v.to_string()
            }
        };
        let mut sigma = Map::new();
        for (a, s) in &self.sigma {
            sigma.insert(name(a), json!(s));
        }
        let mut mean = Map::new();
        for (a, s) in &self.input_mean {
            mean.insert(name(a), json!(s));
        }
        let cov: Vec<Value> = self.input_cov.iter().map(|((a, b), c)| json!([name(a), name(b), c])).collect();
        let scale: Map<String, Value> = self.scale.iter().map(|(c, s)| (c.to_string(), json!(s))).collect();
        let widths: Map<String, Value> = self.widths.iter().map(|(c, s)| (c.to_string(), json!(s))).collect();
        json!({"sigma": sigma, "input_mean": mean, "input_cov": cov, "scale": scale, "widths": widths})
    }
}
