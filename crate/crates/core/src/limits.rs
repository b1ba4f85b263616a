//! Infinite-width limits of the mean/covariance recursion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, HashMap};

use crate::cdc::{CdcPartition, ClassId};
use crate::error::{unsupported, Result, TpError};
use crate::expr::{expand_definition, ExprDag};
use crate::gaussian::{Engine, GaussianSpec};
use crate::linalg::{psd_eigen, rank_with, PINV_RTOL};
use crate::program::{Line, Skeleton, VarId};
use crate::seeds;
use crate::spec::SamplingSpec;

/// How matrix products with transposed matrices are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Transposes are rejected.
    NoTranspose,
    /// Each transposed matrix acts as an independent matrix whose covariance
    /// picks up the width ratio of its source.
    GradientIndependent,
}

/// Looser cutoff used to probe whether a numeric rank is stable.
pub const RANK_PROBE_RTOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankDiag {
    pub matrix: String,
    pub transposed: bool,
    pub size: usize,
    pub rank: usize,
    pub rank_loose: usize,
    pub previous_rank: Option<usize>,
    pub stable: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RankDiagnostics {
    pub entries: Vec<RankDiag>,
}

impl RankDiagnostics {
    pub fn warnings(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|d| !d.stable)
            .map(|d| {
                format!(
                    "rank of the argument Gram matrix of {}{} is unstable ({} at cutoff {:e}, {} at {:e})",
                    d.matrix,
                    if d.transposed { "^T" } else { "" },
                    d.rank,
                    PINV_RTOL,
                    d.rank_loose,
                    RANK_PROBE_RTOL
                )
            })
            .collect()
    }
}

/// Limiting means and covariances of the G-vars of a program.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LimitTable {
    pub mu: BTreeMap<VarId, f64>,
    /// Same-class pairs, stored with the smaller var first.
    pub k: BTreeMap<(VarId, VarId), f64>,
    /// G-vars of each class in line order.
    pub order: BTreeMap<ClassId, Vec<VarId>>,
    pub rank: RankDiagnostics,
}

fn key(a: VarId, b: VarId) -> (VarId, VarId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl LimitTable {
    pub fn mean(&self, v: VarId) -> Option<f64> {
        self.mu.get(&v).copied()
    }

    pub fn cov(&self, a: VarId, b: VarId) -> Option<f64> {
        self.k.get(&key(a, b)).copied()
    }

    /// The Gaussian `N(mu^c, K^c)` over the class's G-vars.
    pub fn class_gaussian(&self, c: ClassId) -> GaussianSpec {
        let vars = self.order.get(&c).cloned().unwrap_or_default();
        self.gaussian_over(&vars)
    }

    fn gaussian_over(&self, vars: &[VarId]) -> GaussianSpec {
        let n = vars.len();
        let mean = DVector::from_fn(n, |i, _| self.mu[&vars[i]]);
        let cov = DMatrix::from_fn(n, n, |i, j| *self.k.get(&key(vars[i], vars[j])).unwrap_or(&0.0));
        GaussianSpec { labels: vars.to_vec(), mean, cov }
    }

    /// Classes whose covariance block is not PSD to tolerance.
    pub fn psd_violations(&self) -> Vec<String> {
        let mut out = vec![];
        for c in self.order.keys() {
            let g = self.class_gaussian(*c);
            if let Err(e) = psd_eigen(&g.cov) {
                out.push(format!("class {c}: {e}"));
            }
        }
        out
    }

    pub fn to_json(&self, sk: &Skeleton) -> Value {
        let mut mu = Map::new();
        for (v, m) in &self.mu {
            mu.insert(sk.name(*v).to_string(), json!(m));
        }
        let blocks: Vec<Value> = self
            .order
            .iter()
            .map(|(c, vars)| {
                let g = self.class_gaussian(*c);
                let rows: Vec<Vec<f64>> = (0..vars.len()).map(|i| g.cov.row(i).iter().cloned().collect()).collect();
                json!({
                    "class": c,
                    "vars": vars.iter().map(|v| sk.name(*v)).collect::<Vec<_>>(),
                    "cov": rows,
                })
            })
            .collect();
        json!({"mu": mu, "K": blocks, "rank_diagnostics": self.rank})
    }
}

struct ArgGram {
    args: Vec<ExprDag>,
    c: DMatrix<f64>,
    rank: Option<usize>,
}

/// The recursion state; lines appended to `sk` are processed by [`Recursion::advance`].
pub struct Recursion<'e> {
    pub sk: Skeleton,
    pub cdc: CdcPartition,
    pub spec: SamplingSpec,
    pub mode: Mode,
    pub engine: &'e Engine,
    pub table: LimitTable,
    grams: BTreeMap<(VarId, bool), ArgGram>,
    slot: HashMap<VarId, usize>,
    done: usize,
}

impl<'e> Recursion<'e> {
    pub fn new(sk: Skeleton, cdc: CdcPartition, spec: SamplingSpec, mode: Mode, engine: &'e Engine) -> Self {
        Recursion {
            sk,
            cdc,
            spec,
            mode,
            engine,
            table: LimitTable::default(),
            grams: BTreeMap::new(),
            slot: HashMap::new(),
            done: 0,
        }
    }

    /// Process every line not yet seen.
    pub fn advance(&mut self) -> Result<()> {
        while self.done < self.sk.len() {
            let v = self.sk.var(self.done + 1);
            self.process(v)?;
            self.done += 1;
        }
        Ok(())
    }

    /// Matrix identity and its covariance factor `sigma^2 * alpha`.
    fn matrix_scale(&self, matrix: VarId) -> Result<((VarId, bool), f64)> {
        let (root, transposed) = self.sk.matrix_root(matrix);
        if transposed && self.mode == Mode::NoTranspose {
            return unsupported("transposed matrices require the gradient-independent mode or detransposition");
        }
        let s = self.spec.sigma_of(&self.sk, root);
        let alpha = if transposed { self.spec.aspect(&self.cdc, root) } else { 1.0 };
        Ok(((root, transposed), s * s * alpha))
    }

    fn process(&mut self, v: VarId) -> Result<()> {
        let line = self.sk.line(v).clone();
        match &line {
            Line::Transpose { .. } if self.mode == Mode::NoTranspose => {
                return unsupported(format!("line {}: transpose present; use detransposition", v.line));
            }
            Line::MatMul { matrix, arg } => self.update_gram(v, *matrix, *arg)?,
            _ => {}
        }
        if !v.is_g() {
            return Ok(());
        }
        let c = self
            .cdc
            .class(v)
            .ok_or_else(|| TpError::Validation(vec![format!("{} has no dimension class", self.sk.name(v))]))?;
        let mean = match &line {
            Line::VecIn { .. } => self.spec.mean_of(v),
            Line::LinComb { terms } => terms.iter().map(|(a, g)| a * self.table.mu[g]).sum(),
            _ => 0.0,
        };
        let prior = self.table.order.get(&c).cloned().unwrap_or_default();
        let mut row: HashMap<VarId, f64> = HashMap::new();
        for &m in prior.iter().chain(std::iter::once(&v)) {
            let val = if let Line::LinComb { terms } = &line {
                terms.iter().map(|(a, g)| a * self.k_with(&row, v, *g, m)).sum()
            } else if let Line::LinComb { terms } = self.sk.line(m) {
                terms.iter().map(|(b, g)| b * row[g]).sum()
            } else {
                self.atomic(v, m)?
            };
            row.insert(m, val);
        }
        self.table.mu.insert(v, mean);
        for (m, val) in row {
            self.table.k.insert(key(v, m), val);
        }
        self.table.order.entry(c).or_default().push(v);
        Ok(())
    }

    /// `K(g, m)` where `g` is a term of the line `v` being processed.
    fn k_with(&self, row: &HashMap<VarId, f64>, v: VarId, g: VarId, m: VarId) -> f64 {
        if m == v {
            row[&g]
        } else {
            self.table.k[&key(g, m)]
        }
    }

    /// Covariance of two non-combination G-vars.
    fn atomic(&self, a: VarId, b: VarId) -> Result<f64> {
        Ok(match (self.sk.line(a), self.sk.line(b)) {
            (Line::VecIn { .. }, Line::VecIn { .. }) => self.spec.cov_of(a, b),
            (Line::MatMul { matrix: ma, .. }, Line::MatMul { matrix: mb, .. }) => {
                let (ia, scale) = self.matrix_scale(*ma)?;
                let (ib, _) = self.matrix_scale(*mb)?;
                if ia != ib {
                    return Ok(0.0);
                }
                let g = &self.grams[&ia];
                scale * g.c[(self.slot[&a], self.slot[&b])]
            }
            _ => 0.0,
        })
    }

    fn update_gram(&mut self, v: VarId, matrix: VarId, arg: VarId) -> Result<()> {
        let (id, _) = self.matrix_scale(matrix)?;
        let f = expand_definition(&self.sk, arg)?;
        let c = self
            .cdc
            .class(arg)
            .ok_or_else(|| TpError::Validation(vec![format!("{} has no dimension class", self.sk.name(arg))]))?;
        let gs = self.table.class_gaussian(c);
        let entry = self.grams.entry(id).or_insert(ArgGram { args: vec![], c: DMatrix::zeros(0, 0), rank: None });
        let mut fns = entry.args.clone();
        fns.push(f.clone());
        let n = fns.len();
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, n - 1)).collect();
        let vals = self.engine.expect_pairs(&fns, &pairs, &gs)?;
        let mut cm = DMatrix::zeros(n, n);
        cm.view_mut((0, 0), (n - 1, n - 1)).copy_from(&entry.c);
        for (i, val) in vals.iter().enumerate() {
            cm[(i, n - 1)] = *val;
            cm[(n - 1, i)] = *val;
        }
        entry.args.push(f);
        entry.c = cm;
        self.slot.insert(v, n - 1);
        let rank = rank_with(&entry.c, PINV_RTOL);
        let loose = rank_with(&entry.c, RANK_PROBE_RTOL);
        let previous = entry.rank.replace(rank);
        let name = self.sk.name(id.0).to_string();
        let diag = RankDiag {
            matrix: name.clone(),
            transposed: id.1,
            size: n,
            rank,
            rank_loose: loose,
            previous_rank: previous,
            stable: rank == loose,
        };
        let entries = &mut self.table.rank.entries;
        match entries.iter_mut().find(|d| d.matrix == name && d.transposed == id.1) {
            Some(d) => *d = diag,
            None => entries.push(diag),
        }
        Ok(())
    }

    /// Argument Gram matrix `C` of a matrix identity, in line order.
    pub fn arg_gram(&self, root: VarId, transposed: bool) -> Option<&DMatrix<f64>> {
        self.grams.get(&(root, transposed)).map(|g| &g.c)
    }
}

/// Limits for a program without transposes.
pub fn compute_limits_no_transpose(sk: &Skeleton, cdc: &CdcPartition, spec: &SamplingSpec, engine: &Engine) -> Result<LimitTable> {
    if sk.has_transpose() {
        return unsupported("program has transposes; use the backprop or detransposition route");
    }
    let mut r = Recursion::new(sk.clone(), cdc.clone(), spec.clone(), Mode::NoTranspose, engine);
    r.advance()?;
    Ok(r.table)
}

/// Limits for a transpose-free program extended by a backward pass.
pub fn compute_limits_backprop(
    fwd: &Skeleton,
    ext: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    engine: &Engine,
) -> Result<LimitTable> {
    let diags = check_extension(fwd, ext, spec);
    if !diags.is_empty() {
        return Err(TpError::Validation(diags));
    }
    let mut r = Recursion::new(ext.clone(), cdc.clone(), spec.clone(), Mode::GradientIndependent, engine);
    r.advance()?;
    Ok(r.table)
}

/// Gradient-independent limits without the validity checks. Every transposed
/// matrix is treated as independent of its source, which can be wrong.
pub fn compute_limits_naive(sk: &Skeleton, cdc: &CdcPartition, spec: &SamplingSpec, engine: &Engine) -> Result<LimitTable> {
    let mut r = Recursion::new(sk.clone(), cdc.clone(), spec.clone(), Mode::GradientIndependent, engine);
    r.advance()?;
    Ok(r.table)
}

const ODD_POINTS: usize = 64;
const ODD_TOL: f64 = 1e-9;

/// Conditions under which the gradient-independent computation is valid.
pub fn check_extension(fwd: &Skeleton, ext: &Skeleton, spec: &SamplingSpec) -> Vec<String> {
    let mut out = vec![];
    let n = fwd.len();
    if fwd.has_transpose() {
        out.push("forward program must not contain transposes".into());
    }
    if ext.len() < n || ext.lines[..n] != fwd.lines[..] {
        out.push("extension must start with the forward program unchanged".into());
        return out;
    }
    let fwd_inputs: Vec<VarId> = fwd.vars().filter(|v| matches!(fwd.line(*v), Line::VecIn { .. })).collect();
    let is_new = |v: &VarId| v.line > n;
    let mut rng = seeds::stream(seeds::derive(0, &[0x0dd]), 0);
    for v in ext.vars().skip(n) {
        let name = ext.name(v);
        match ext.line(v) {
            Line::MatIn { .. } => out.push(format!("{name}: extensions may not introduce new input matrices")),
            Line::Transpose { source } => {
                if source.line > n {
                    out.push(format!("{name}: only matrices of the forward program may be transposed"));
                }
            }
            Line::VecIn { .. } => {
                if spec.mean_of(v) != 0.0 {
                    out.push(format!("{name}: new input vectors must have zero mean"));
                }
                for x in &fwd_inputs {
                    if spec.cov_of(v, *x) != 0.0 {
                        out.push(format!("{name}: new input vectors must be independent of {}", fwd.name(*x)));
                    }
                }
            }
            Line::MatMul { matrix, arg } => {
                let (root, transposed) = ext.matrix_root(*matrix);
                if !transposed || root.line > n {
                    out.push(format!("{name}: new matrix products must use a transposed forward matrix"));
                }
                if !is_new(arg) {
                    out.push(format!("{name}: new matrix products must act on vars introduced by the extension"));
                }
            }
            Line::LinComb { terms } => {
                if terms.iter().any(|t| !is_new(&t.1)) {
                    out.push(format!("{name}: linear combinations may not involve forward G-vars"));
                }
            }
            Line::Nonlin { .. } | Line::Comp { .. } => {
                let d = match expand_definition(ext, v) {
                    Ok(d) => d,
                    Err(e) => {
                        out.push(format!("{name}: {e}"));
                        continue;
                    }
                };
                let leaves = d.leaves();
                let mut odd = true;
                for _ in 0..ODD_POINTS {
                    let vals: HashMap<VarId, f64> = leaves.iter().map(|l| (*l, rng.random_range(-3.0..3.0))).collect();
                    let plus = d.eval(&|l| vals[&l]);
                    let minus = d.eval(&|l| if is_new(&l) { -vals[&l] } else { vals[&l] });
                    if !plus.is_finite() || (plus + minus).abs() > ODD_TOL * (1.0 + plus.abs()) {
                        odd = false;
                        break;
                    }
                }
                if !odd {
                    out.push(format!("{name}: must be an odd function of the new input vectors"));
                }
            }
        }
    }
    out
}

/// `E phi(Z)` with `Z ~ N(mu^c, K^c)`.
pub fn limit_moment(table: &LimitTable, class: ClassId, phi: &ExprDag, engine: &Engine) -> Result<f64> {
    let gs = table.class_gaussian(class);
    for l in phi.leaves() {
        if gs.index_of(l).is_none() {
            return unsupported(format!("leaf {l} is not a G-var of class {class}"));
        }
    }
    engine.mean(phi, &gs)
}
