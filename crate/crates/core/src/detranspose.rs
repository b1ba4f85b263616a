//! Compile transposes away: an extended-syntax, transpose-free program whose
//! limits describe the original one.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use std::collections::BTreeMap;

use crate::cdc::{CdcPartition, ClassId};
use crate::error::{unsupported, Result, TpError};
use crate::expr::{expand_base, expand_definition, ExprDag};
use crate::gaussian::{DerivRoute, Engine};
use crate::limits::{LimitTable, Mode, Recursion};
use crate::linalg::{independent_subset, pinv, rank, PINV_RTOL};
use crate::program::{Line, Skeleton, SkeletonBuilder, Syntax, VarId};
use crate::spec::SamplingSpec;

/// How the correction coefficients of a matrix product are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffRule {
    /// `a = alpha C^+ v`.
    Projection,
    /// `a_i = alpha sigma^2 E d f / d z_i`.
    Derivative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoeffRecord {
    /// Check-program images of the arguments `h^j` of earlier products with the opposite matrix.
    pub h_vars: Vec<VarId>,
    /// Check-program outputs of those earlier products.
    pub g_vars: Vec<VarId>,
    pub c: DMatrix<f64>,
    pub v: DVector<f64>,
    pub a: DVector<f64>,
    pub alpha: f64,
    /// Scale of the check matrix that produced `g_vars`.
    pub sigma: f64,
    /// "empty", "pinv", "subset" or "derivative".
    pub route: &'static str,
    /// Whether the correction line is a linear combination of G-vars.
    pub typecast: bool,
}

/// A check-program input matrix standing in for a transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct FreshInput {
    pub check_var: VarId,
    pub transpose: VarId,
    pub source: VarId,
}

#[derive(Clone, Debug)]
pub struct DetransposeResult {
    pub check_sk: Skeleton,
    pub check_cdc: CdcPartition,
    pub check_spec: SamplingSpec,
    /// Image of every vector and matrix var.
    pub phi: BTreeMap<VarId, VarId>,
    /// Image of matrix products before the correction.
    pub phi_g: BTreeMap<VarId, VarId>,
    /// Keyed by the original matrix-product line.
    pub coeffs: BTreeMap<VarId, CoeffRecord>,
    pub fresh: Vec<FreshInput>,
    pub limits: LimitTable,
}

impl DetransposeResult {
    /// `f^{phi(v)}` over check-program G-vars.
    pub fn image_definition(&self, v: VarId) -> Result<ExprDag> {
        let w = self.phi.get(&v).ok_or_else(|| TpError::Unsupported(format!("{v} has no image")))?;
        expand_definition(&self.check_sk, *w)
    }

    /// Rewrite a test function over original vars into one over check G-vars.
    pub fn pull_back(&self, phi: &ExprDag) -> Result<ExprDag> {
        let mut err = None;
        let out = phi.substitute(&mut |v| match self.image_definition(v) {
            Ok(d) => Some(d),
            Err(e) => {
                err = Some(e);
                None
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn coeffs_json(&self, sk: &Skeleton) -> Value {
        let mut out = serde_json::Map::new();
        for (l, r) in &self.coeffs {
            let names = |vs: &[VarId]| vs.iter().map(|v| self.check_sk.name(*v).to_string()).collect::<Vec<_>>();
            let rows: Vec<Vec<f64>> = (0..r.c.nrows()).map(|i| r.c.row(i).iter().cloned().collect()).collect();
            out.insert(
                sk.name(*l).to_string(),
                json!({
                    "h_vars": names(&r.h_vars),
                    "g_vars": names(&r.g_vars),
                    "C": rows,
                    "v": r.v.iter().cloned().collect::<Vec<_>>(),
                    "a": r.a.iter().cloned().collect::<Vec<_>>(),
                    "alpha": r.alpha,
                    "sigma": r.sigma,
                    "route": r.route,
                    "typecast": r.typecast,
                }),
            );
        }
        Value::Object(out)
    }

    /// `name -> image name` pairs in line order.
    pub fn phi_names(&self, sk: &Skeleton) -> Vec<(String, String)> {
        self.phi.iter().map(|(v, w)| (sk.name(*v).to_string(), self.check_sk.name(*w).to_string())).collect()
    }
}

pub fn detranspose(sk: &Skeleton, cdc: &CdcPartition, spec: &SamplingSpec, engine: &Engine) -> Result<DetransposeResult> {
    run(sk, cdc, spec, engine, CoeffRule::Projection)
}

/// Detransposition with coefficients from expected derivatives.
pub fn detranspose_derivative(
    sk: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    engine: &Engine,
) -> Result<DetransposeResult> {
    run(sk, cdc, spec, engine, CoeffRule::Derivative)
}

struct State<'e> {
    rec: Recursion<'e>,
    phi: BTreeMap<VarId, VarId>,
    phi_g: BTreeMap<VarId, VarId>,
    /// Check matrix of each matrix identity `(root, transposed)`.
    matrices: BTreeMap<(VarId, bool), VarId>,
}

impl State<'_> {
    fn push(&mut self, name: &str, line: Line, class: Option<ClassId>) -> Result<VarId> {
        let mut b = SkeletonBuilder::from_skeleton(std::mem::replace(&mut self.rec.sk, Skeleton::new(Syntax::Extended)));
        let mut n = name.to_string();
        let mut k = 1;
        while b.skeleton().find(&n).is_some() {
            n = format!("{name}_{k}");
            k += 1;
        }
        let r = match line {
            Line::LinComb { terms } => b.lincomb(Some(&n), &terms),
            Line::Nonlin { f, args } | Line::Comp { f, args } => b.apply(Some(&n), f, &args),
            l => b.push(Some(&n), l),
        };
        self.rec.sk = b.finish();
        let v = r?;
        if let Some(c) = class {
            self.rec.cdc.assign(v, c);
        }
        Ok(v)
    }
}

fn run(sk: &Skeleton, cdc: &CdcPartition, spec: &SamplingSpec, engine: &Engine, rule: CoeffRule) -> Result<DetransposeResult> {
    if sk.syntax != Syntax::Original {
        return unsupported("detransposition is defined for original-syntax programs");
    }
    let diags = sk.validate_structure();
    if !diags.is_empty() {
        return Err(TpError::Validation(diags));
    }
    let mut check_spec = SamplingSpec { scale: spec.scale.clone(), widths: spec.widths.clone(), ..Default::default() };
    let mut check_cdc = CdcPartition::empty();
    check_cdc.n_classes = cdc.n_classes;
    let mut st = State {
        rec: Recursion::new(Skeleton::new(Syntax::Extended), check_cdc, SamplingSpec::default(), Mode::NoTranspose, engine),
        phi: BTreeMap::new(),
        phi_g: BTreeMap::new(),
        matrices: BTreeMap::new(),
    };
    let mut coeffs = BTreeMap::new();
    let mut fresh = vec![];
    let map = |st: &State, v: &VarId| st.phi[v];
    for v in sk.vars() {
        let name = sk.name(v).to_string();
        let class = cdc.class(v);
        match sk.line(v).clone() {
            Line::VecIn { hint } => {
                let w = st.push(&name, Line::VecIn { hint }, class)?;
                check_spec.set_mean(w, spec.mean_of(v));
                for (u, img) in &st.phi {
                    if matches!(sk.line(*u), Line::VecIn { .. }) && cdc.class(*u) == class {
                        check_spec.set_cov(*img, w, spec.cov_of(*u, v));
                    }
                }
                check_spec.set_var(w, spec.cov_of(v, v));
                st.phi.insert(v, w);
            }
            Line::MatIn { rows, cols } => {
                let w = st.push(&name, Line::MatIn { rows, cols }, None)?;
                let (r, c) = cdc.sides(v);
                st.rec.cdc.assign_sides(w, r, c);
                check_spec.set_sigma(w, spec.sigma_of(sk, v));
                st.phi.insert(v, w);
                st.matrices.insert((v, false), w);
            }
            Line::Transpose { .. } => {
                let id = sk.matrix_root(v);
                if let Some(w) = st.matrices.get(&id) {
                    let w = *w;
                    st.phi.insert(v, w);
                    continue;
                }
                let w = st.push(&name, Line::MatIn { rows: None, cols: None }, None)?;
                let (r, c) = cdc.sides(v);
                st.rec.cdc.assign_sides(w, r, c);
                let root = id.0;
                let s = spec.aspect(cdc, root).sqrt() * spec.sigma_of(sk, root);
                check_spec.set_sigma(w, s);
                st.phi.insert(v, w);
                st.matrices.insert(id, w);
                fresh.push(FreshInput { check_var: w, transpose: v, source: root });
            }
            Line::LinComb { terms } => {
                let t: Vec<(f64, VarId)> = terms.iter().map(|(a, g)| (*a, map(&st, g))).collect();
                let w = st.push(&name, Line::LinComb { terms: t }, class)?;
                st.phi.insert(v, w);
            }
            Line::Nonlin { f, args } | Line::Comp { f, args } => {
                let a: Vec<VarId> = args.iter().map(|g| map(&st, g)).collect();
                let w = st.push(&name, Line::Nonlin { f, args: a }, class)?;
                st.phi.insert(v, w);
            }
            Line::MatMul { matrix, arg } => {
                st.rec.spec = check_spec.clone();
                st.rec.advance()?;
                let (root, tr) = sk.matrix_root(matrix);
                let record = coefficients(sk, cdc, &st, v, matrix, arg, (root, !tr), rule)?;
                let mat = st.matrices[&(root, tr)];
                let g = st.push(&format!("{name}_g"), Line::MatMul { matrix: mat, arg: map(&st, &arg) }, class)?;
                let mut terms = vec![(1.0, g)];
                terms.extend(record.a.iter().zip(&record.h_vars).map(|(a, h)| (*a, *h)));
                let typecast = record.h_vars.iter().all(|h| h.is_g());
                let w = if typecast {
                    st.push(&name, Line::LinComb { terms }, class)?
                } else {
                    let f = crate::nonlin::Func::Lin(terms.iter().map(|t| t.0).collect());
                    st.push(&name, Line::Comp { f, args: terms.iter().map(|t| t.1).collect() }, class)?
                };
                st.phi.insert(v, w);
                st.phi_g.insert(v, g);
                coeffs.insert(v, CoeffRecord { typecast, ..record });
            }
        }
    }
    st.rec.spec = check_spec.clone();
    check_spec.validate(&st.rec.sk, &st.rec.cdc)?;
    st.rec.advance()?;
    let State { rec, phi, phi_g, .. } = st;
    Ok(DetransposeResult {
        check_sk: rec.sk,
        check_cdc: rec.cdc,
        check_spec,
        phi,
        phi_g,
        coeffs,
        fresh,
        limits: rec.table,
    })
}

/// Step for `g^l := A h^m`: correction coefficients from earlier products `g^i := A' h^i`.
#[allow(clippy::too_many_arguments)]
fn coefficients(
    sk: &Skeleton,
    cdc: &CdcPartition,
    st: &State,
    l: VarId,
    matrix: VarId,
    arg: VarId,
    opposite: (VarId, bool),
    rule: CoeffRule,
) -> Result<CoeffRecord> {
    let earlier: Vec<VarId> = sk
        .vars()
        .take_while(|u| *u != l)
        .filter(|u| match sk.line(*u) {
            Line::MatMul { matrix: m, .. } => sk.matrix_root(*m) == opposite,
            _ => false,
        })
        .collect();
    let alpha = 1.0 / st.rec.spec.aspect(cdc, matrix);
    let sigma = match st.matrices.get(&opposite) {
        Some(w) => st.rec.spec.sigma_of(&st.rec.sk, *w),
        None => 0.0,
    };
    let s = earlier.len();
    let h_vars: Vec<VarId> = earlier
        .iter()
        .map(|u| match sk.line(*u) {
            Line::MatMul { arg, .. } => st.phi[arg],
            _ => unreachable!(),
        })
        .collect();
    let g_vars: Vec<VarId> = earlier.iter().map(|u| st.phi_g[u]).collect();
    if s == 0 {
        return Ok(CoeffRecord {
            h_vars,
            g_vars,
            c: DMatrix::zeros(0, 0),
            v: DVector::zeros(0),
            a: DVector::zeros(0),
            alpha,
            sigma,
            route: "empty",
            typecast: true,
        });
    }
    let engine = st.rec.engine;
    let table = &st.rec.table;
    let class_of = |v: VarId| {
        st.rec
            .cdc
            .class(v)
            .ok_or_else(|| TpError::Validation(vec![format!("{} has no dimension class", st.rec.sk.name(v))]))
    };
    let target = expand_definition(&st.rec.sk, st.phi[&arg])?;
    let c_class = class_of(h_vars[0])?;
    let v_class = class_of(st.phi[&arg])?;
    let hdefs: Vec<ExprDag> = h_vars.iter().map(|h| expand_definition(&st.rec.sk, *h)).collect::<Result<_>>()?;
    let gdefs: Vec<ExprDag> = g_vars.iter().map(|g| ExprDag::leaf(*g)).collect();
    let c_pairs: Vec<(usize, usize)> = (0..s).flat_map(|i| (i..s).map(move |j| (i, j))).collect();
    let (cvals, vvals) = if c_class == v_class {
        let mut fns = hdefs.clone();
        fns.extend(gdefs.iter().cloned());
        fns.push(target.clone());
        let t = fns.len() - 1;
        let mut pairs = c_pairs.clone();
        pairs.extend((0..s).map(|i| (s + i, t)));
        let vals = engine.expect_pairs(&fns, &pairs, &table.class_gaussian(c_class))?;
        (vals[..c_pairs.len()].to_vec(), vals[c_pairs.len()..].to_vec())
    } else {
        let cv = engine.expect_pairs(&hdefs, &c_pairs, &table.class_gaussian(c_class))?;
        let mut fns = gdefs.clone();
        fns.push(target.clone());
        let vpairs: Vec<(usize, usize)> = (0..s).map(|i| (i, s)).collect();
        let vv = engine.expect_pairs(&fns, &vpairs, &table.class_gaussian(v_class))?;
        (cv, vv)
    };
    let mut c = DMatrix::zeros(s, s);
    for ((i, j), x) in c_pairs.iter().zip(&cvals) {
        c[(*i, *j)] = *x;
        c[(*j, *i)] = *x;
    }
    let v = DVector::from_vec(vvals);
    let (a, route) = match rule {
        CoeffRule::Projection => {
            if rank(&c) == s {
                (pinv(&c) * &v * alpha, "pinv")
            } else {
                let idx = independent_subset(&c, &[], PINV_RTOL);
                let mut a = DVector::zeros(s);
                if !idx.is_empty() {
                    let ci = DMatrix::from_fn(idx.len(), idx.len(), |r, q| c[(idx[r], idx[q])]);
                    let vi = DVector::from_fn(idx.len(), |r, _| v[idx[r]]);
                    let sol = ci
                        .cholesky()
                        .ok_or_else(|| TpError::Numeric("singular Gram matrix after subset reduction".into()))?
                        .solve(&vi);
                    for (r, i) in idx.iter().enumerate() {
                        a[*i] = alpha * sol[r];
                    }
                }
                (a, "subset")
            }
        }
        CoeffRule::Derivative => {
            let base = expand_base(&st.rec.sk, st.phi[&arg])?;
            let gs = table.class_gaussian(v_class);
            let mut a = DVector::zeros(s);
            for (i, g) in g_vars.iter().enumerate() {
                let d = engine.derivative_expectation(&base, &gs, *g, DerivRoute::Auto)?;
                a[i] = alpha * sigma * sigma * d;
            }
            (a, "derivative")
        }
    };
    if a.iter().any(|x| !x.is_finite()) {
        return Err(TpError::Numeric(format!("non-finite correction coefficients for {}", sk.name(l))));
    }
    Ok(CoeffRecord { h_vars, g_vars, c, v, a, alpha, sigma, route, typecast: true })
}

/// `E phi` for a test function over one class of an original-syntax program.
pub fn general_limit_moment(
    sk: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    class: ClassId,
    phi: &ExprDag,
    engine: &Engine,
) -> Result<f64> {
    let d = detranspose(sk, cdc, spec, engine)?;
    image_moment(&d, class, phi, engine)
}

/// `E phi` using an existing detransposition.
pub fn image_moment(d: &DetransposeResult, class: ClassId, phi: &ExprDag, engine: &Engine) -> Result<f64> {
    let pulled = d.pull_back(phi)?;
    let gs = d.limits.class_gaussian(class);
    for l in pulled.leaves() {
        if gs.index_of(l).is_none() {
            return unsupported(format!("leaf {l} is not in class {class}"));
        }
    }
    engine.mean(&pulled, &gs)
}
