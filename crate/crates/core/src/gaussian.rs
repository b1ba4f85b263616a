//! Expectations of functions of jointly Gaussian vectors.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{numeric, unsupported, Result, TpError};
use crate::expr::{Affine, Bound, ExprDag};
use crate::linalg::{independent_subset, psd_eigen, psd_factor};
use crate::nonlin::Func;
use crate::program::{Kind, VarId};
use crate::seeds;

/// Jointly Gaussian coordinates labelled by program variables.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub labels: Vec<VarId>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(labels: Vec<VarId>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = labels.len();
        if mean.len() != n || cov.shape() != (n, n) {
            return Err(TpError::InvalidSpec("gaussian dimensions do not match labels".into()));
        }
        if (&cov - cov.transpose()).amax() > 1e-9 * cov.amax().max(1.0) {
            return Err(TpError::InvalidSpec("covariance is not symmetric".into()));
        }
        psd_eigen(&cov)?;
        Ok(GaussianSpec { labels, mean, cov })
    }

    /// Standard layout for anonymous coordinates `0..n`.
    pub fn anonymous(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let labels = (1..=mean.len()).map(|l| VarId::new(l, Kind::G)).collect();
        GaussianSpec::new(labels, mean, cov)
    }

    pub fn index_of(&self, v: VarId) -> Option<usize> {
        self.labels.iter().position(|l| *l == v)
    }

    pub fn marginal(&self, vars: &[VarId]) -> Result<GaussianSpec> {
        let idx: Vec<usize> = vars
            .iter()
            .map(|v| self.index_of(*v).ok_or_else(|| TpError::Unsupported(format!("leaf {v} outside class"))))
            .collect::<Result<_>>()?;
        Ok(GaussianSpec {
            labels: vars.to_vec(),
            mean: DVector::from_fn(idx.len(), |r, _| self.mean[idx[r]]),
            cov: DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.cov[(idx[r], idx[c])]),
        })
    }

    fn affine_mean(&self, a: &Affine) -> f64 {
        a.constant + a.coeffs.iter().map(|(v, w)| w * self.mean[self.index_of(*v).unwrap()]).sum::<f64>()
    }

    fn affine_cov(&self, a: &Affine, b: &Affine) -> f64 {
        let mut s = 0.0;
        for (u, wu) in &a.coeffs {
            let i = self.index_of(*u).unwrap();
            for (v, wv) in &b.coeffs {
                s += wu * wv * self.cov[(i, self.index_of(*v).unwrap())];
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Quadrature,
    #[serde(rename = "mc")]
    MonteCarlo,
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub quad_points: usize,
    pub mc_samples: usize,
    pub quad_dim_max: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { quad_points: 40, mc_samples: 200_000, quad_dim_max: 3, seed: 0, method: Method::Auto }
    }
}

/// `E[f_i]` and `E[f_i f_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub gram: DMatrix<f64>,
    /// Whether any entry used Monte Carlo.
    pub used_mc: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivRoute {
    Auto,
    Direct,
    Stein,
}

struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

fn grid(points: usize, dim: usize) -> Arc<Grid> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Grid>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(g) = cache.lock().unwrap().get(&(points, dim)) {
        return g.clone();
    }
    let rule = gauss_quad::hermite::GaussHermite::new(points.try_into().expect("at least one point"));
    let nw: Vec<(f64, f64)> =
        rule.as_node_weight_pairs().iter().map(|(x, w)| (x * 2f64.sqrt(), w / PI.sqrt())).collect();
    let total = nw.len().pow(dim as u32);
    let mut pts = Vec::with_capacity(total * dim);
    let mut ws = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut w = 1.0;
        for &i in &idx {
            pts.push(nw[i].0);
            w *= nw[i].1;
        }
        ws.push(w);
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < nw.len() {
                break;
            }
            idx[d] = 0;
        }
    }
    let g = Arc::new(Grid { points: pts, weights: ws });
    cache.lock().unwrap().insert((points, dim), g.clone());
    g
}

/// Truncation and panel widths of the composite Gauss-Legendre rule.
const TAIL: f64 = 9.0;
const PANEL: f64 = 1.5;
const PANEL_3D: f64 = 3.0;

fn legendre_rule() -> Arc<Vec<(f64, f64)>> {
    static RULE: OnceLock<Arc<Vec<(f64, f64)>>> = OnceLock::new();
    RULE.get_or_init(|| {
        let r = gauss_quad::legendre::GaussLegendre::new(16.try_into().unwrap());
        Arc::new(r.as_node_weight_pairs().to_vec())
    })
    .clone()
}

fn rotation_candidates(r: usize) -> Arc<Vec<DMatrix<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<DMatrix<f64>>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut c = cache.lock().unwrap();
    c.entry(r)
        .or_insert_with(|| {
            let mut rng = seeds::stream(0x9e37, r as u64);
            let mut out = vec![DMatrix::identity(r, r)];
            for _ in 0..64 {
                let m = DMatrix::from_fn(r, r, |_, _| StandardNormal.sample(&mut rng));
                out.push(m.qr().q());
            }
            Arc::new(out)
        })
        .clone()
}

/// Rotation keeping every kink hyperplane transversal to the innermost axis and
/// every pairwise intersection transversal to the outermost axis.
fn kink_rotation(r: usize, normals: &[DVector<f64>]) -> DMatrix<f64> {
    let mut lines = vec![];
    if r == 3 {
        for i in 0..normals.len() {
            for j in i + 1..normals.len() {
                let d = normals[i].cross(&normals[j]);
                if d.norm() > 1e-9 * normals[i].norm() * normals[j].norm() {
                    lines.push(d.normalize());
                }
            }
        }
    }
    let unit: Vec<DVector<f64>> = normals.iter().map(|n| n.normalize()).collect();
    let score = |q: &DMatrix<f64>| {
        let last = q.column(r - 1);
        let first = q.column(0);
        let a = unit.iter().map(|n| n.dot(&last).abs()).fold(f64::INFINITY, f64::min);
        let b = lines.iter().map(|d| d.dot(&first).abs()).fold(f64::INFINITY, f64::min);
        a.min(b)
    };
    let cands = rotation_candidates(r);
    let mut best = &cands[0];
    let mut best_score = score(best);
    for q in cands.iter().skip(1) {
        let s = score(q);
        if s > best_score {
            best = q;
            best_score = s;
        }
    }
    best.clone()
}

/// Breakpoints of coordinate `d` given the outer coordinates: projections of the
/// points where `r - d` hyperplanes meet inside the remaining subspace.
fn breakpoints(d: usize, r: usize, xi: &[f64], planes: &[(DVector<f64>, f64)]) -> Vec<f64> {
    let k = r - d;
    let mut out = vec![];
    if planes.len() < k {
        return out;
    }
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let a = DMatrix::from_fn(k, k, |i, j| planes[subset[i]].0[d + j]);
        let rhs = DVector::from_fn(k, |i, _| {
            let (n, t) = &planes[subset[i]];
            t - (0..d).map(|j| n[j] * xi[j]).sum::<f64>()
        });
        let scale = a.amax();
        if scale > 0.0 {
            if let Some(lu) = Some(a.clone().lu()) {
                let det = lu.determinant();
                if det.abs() > 1e-10 * scale.powi(k as i32) {
                    if let Some(sol) = lu.solve(&rhs) {
                        if sol[0].abs() < TAIL {
                            out.push(sol[0]);
                        }
                    }
                }
            }
        }
        // Next k-subset in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                out.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
                return out;
            }
            i -= 1;
            if subset[i] < planes.len() - k + i {
                subset[i] += 1;
                for j in i + 1..k {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// One-dimensional rules for [`nested`]: Gauss-Hermite on smooth levels when
/// given, composite Gauss-Legendre otherwise.
struct Rule {
    gh: Option<Arc<Grid>>,
    panel: f64,
}

/// Nested integration over standard normal coordinates `d..r`.
fn nested(
    d: usize,
    r: usize,
    xi: &mut Vec<f64>,
    planes: &[(DVector<f64>, f64)],
    rule: &Rule,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    if d == r {
        return f(xi);
    }
    let cuts = breakpoints(d, r, xi, planes);
    let mut acc = 0.0;
    if let (true, Some(gh)) = (cuts.is_empty(), &rule.gh) {
        for (x, w) in gh.points.iter().zip(&gh.weights) {
            xi[d] = *x;
            acc += w * nested(d + 1, r, xi, planes, rule, f);
        }
        return acc;
    }
    let gl = legendre_rule();
    let mut edges = vec![-TAIL];
    edges.extend(cuts);
    edges.push(TAIL);
    for seg in edges.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        if hi <= lo {
            continue;
        }
        let panels = ((hi - lo) / rule.panel).ceil().max(1.0) as usize;
        let h = (hi - lo) / panels as f64;
        for k in 0..panels {
            let a = lo + k as f64 * h;
            for (x, wx) in gl.iter() {
                let y = a + 0.5 * h * (x + 1.0);
                xi[d] = y;
                let dens = (-0.5 * y * y).exp() / (2.0 * PI).sqrt();
                acc += 0.5 * h * wx * dens * nested(d + 1, r, xi, planes, rule, f);
            }
        }
    }
    acc
}

/// Relative eigenvalue cutoff defining the effective dimension.
const RANK_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Engine {
    pub cfg: EngineConfig,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        Engine { cfg }
    }

    /// Effective dimension of the sub-Gaussian on `vars`.
    pub fn effective_dim(&self, gs: &GaussianSpec, vars: &[VarId]) -> Result<usize> {
        let m = gs.marginal(vars)?;
        Ok(psd_factor(&m.cov, RANK_RTOL)?.ncols())
    }

    /// Integrate `combine(values of fns)` by quadrature over the sub-Gaussian on `vars`.
    ///
    /// Polynomial integrands use the tensor Gauss-Hermite rule. Otherwise the
    /// coordinates are integrated one at a time by composite Gauss-Legendre on
    /// `[-TAIL, TAIL]`. When some node has a kink along an affine hyperplane, the
    /// basis is rotated so the kinks are transversal to the axes and each
    /// coordinate is split at the projected hyperplane intersections.
    fn quad(&self, gs: &GaussianSpec, vars: &[VarId], fns: &[&ExprDag], combine: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
        let m = gs.marginal(vars)?;
        let b = psd_factor(&m.cov, RANK_RTOL)?;
        let r = b.ncols();
        let bound: Vec<Bound> = fns.iter().map(|f| f.bind(vars)).collect::<Result<_>>()?;
        let mut kinks: Vec<(DVector<f64>, f64)> = vec![];
        for f in fns {
            for (a, loc) in f.kinks().0 {
                let w = DVector::from_fn(vars.len(), |i, _| *a.coeffs.get(&vars[i]).unwrap_or(&0.0));
                let n = b.transpose() * &w;
                let t = loc - a.constant - w.dot(&m.mean);
                if n.norm() > 1e-12 * w.norm().max(1e-300) {
                    kinks.push((n, t));
                }
            }
        }
        let mut z = vec![0.0; vars.len()];
        let mut vals = vec![0.0; fns.len()];
        let mut scratch = vec![];
        let mut eval_at = |xi: &[f64], bz: &DMatrix<f64>| -> f64 {
            for (i, zi) in z.iter_mut().enumerate() {
                let mut s = m.mean[i];
                for (k, x) in xi.iter().enumerate() {
                    s += bz[(i, k)] * x;
                }
                *zi = s;
            }
            for (k, f) in bound.iter().enumerate() {
                vals[k] = f.eval(&z, &mut scratch);
            }
            combine(&vals)
        };
        let polynomial = fns.iter().all(|f| f.is_polynomial());
        if (kinks.is_empty() && polynomial) || r == 0 {
            let g = grid(self.cfg.quad_points, r);
            let mut acc = 0.0;
            for (p, w) in g.weights.iter().enumerate() {
                acc += w * eval_at(&g.points[p * r..(p + 1) * r], &b);
            }
            return Ok(acc);
        }
        let normals: Vec<DVector<f64>> = kinks.iter().map(|(n, _)| n.clone()).collect();
        let q = if normals.is_empty() { DMatrix::identity(r, r) } else { kink_rotation(r, &normals) };
        let bq = &b * &q;
        let planes: Vec<(DVector<f64>, f64)> = kinks.into_iter().map(|(n, t)| (q.transpose() * n, t)).collect();
        let rule = Rule {
            gh: if polynomial { Some(grid(self.cfg.quad_points, 1)) } else { None },
            panel: if r <= 2 { PANEL } else { PANEL_3D },
        };
        let mut xi = vec![0.0; r];
        let mut f = |x: &[f64]| eval_at(x, &bq);
        Ok(nested(0, r, &mut xi, &planes, &rule, &mut f))
    }

    fn mc_seed(&self, vars: &[VarId]) -> u64 {
        let path: Vec<u64> = vars.iter().map(|v| v.line as u64).collect();
        seeds::derive(self.cfg.seed, &path)
    }

    /// Values of `fns` at Monte Carlo samples from the sub-Gaussian on `vars`.
    fn mc_values(&self, gs: &GaussianSpec, vars: &[VarId], fns: &[&ExprDag]) -> Result<Vec<Vec<f64>>> {
        let m = gs.marginal(vars)?;
        let b = psd_factor(&m.cov, RANK_RTOL)?;
        let r = b.ncols();
        let bound: Vec<Bound> = fns.iter().map(|f| f.bind(vars)).collect::<Result<_>>()?;
        let mut rng = seeds::stream(self.mc_seed(vars), 0);
        let n = self.cfg.mc_samples;
        let mut out = vec![Vec::with_capacity(n); fns.len()];
        let mut xi = vec![0.0; r];
        let mut z = vec![0.0; vars.len()];
        let mut scratch = vec![];
        for _ in 0..n {
            for x in xi.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            for (i, zi) in z.iter_mut().enumerate() {
                let mut s = m.mean[i];
                for (k, x) in xi.iter().enumerate() {
                    s += b[(i, k)] * x;
                }
                *zi = s;
            }
            for (k, f) in bound.iter().enumerate() {
                out[k].push(f.eval(&z, &mut scratch));
            }
        }
        Ok(out)
    }

    pub fn expect(&self, fns: &[ExprDag], gs: &GaussianSpec) -> Result<Moments> {
        self.expect_with(fns, gs, self.cfg.method)
    }

    pub fn expect_with(&self, fns: &[ExprDag], gs: &GaussianSpec, method: Method) -> Result<Moments> {
        let k = fns.len();
        let means: Vec<usize> = (0..k).collect();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
        let (m, p, used_mc) = self.moments(fns, &means, &pairs, gs, method)?;
        let mut gram = DMatrix::zeros(k, k);
        for ((i, j), v) in pairs.iter().zip(p) {
            gram[(*i, *j)] = v;
            gram[(*j, *i)] = v;
        }
        Ok(Moments { mean: DVector::from_vec(m), gram, used_mc })
    }

    /// `E[f_i f_j]` for the listed pairs only; Monte Carlo entries share one sample set.
    pub fn expect_pairs(&self, fns: &[ExprDag], pairs: &[(usize, usize)], gs: &GaussianSpec) -> Result<Vec<f64>> {
        Ok(self.moments(fns, &[], pairs, gs, self.cfg.method)?.1)
    }

    fn moments(
        &self,
        fns: &[ExprDag],
        means: &[usize],
        pairs: &[(usize, usize)],
        gs: &GaussianSpec,
        method: Method,
    ) -> Result<(Vec<f64>, Vec<f64>, bool)> {
        let leaves: Vec<Vec<VarId>> = fns.iter().map(|f| f.leaves()).collect();
        for l in leaves.iter().flatten() {
            if gs.index_of(*l).is_none() {
                return unsupported(format!("leaf {l} outside class"));
            }
        }
        let affine: Vec<Option<Affine>> =
            fns.iter().map(|f| if method == Method::MonteCarlo { None } else { f.affine() }).collect();
        let union = |a: &[VarId], b: &[VarId]| -> Vec<VarId> {
            let s: BTreeSet<VarId> = a.iter().chain(b.iter()).cloned().collect();
            s.into_iter().collect()
        };
        let too_big = |dim: usize| -> Result<()> {
            unsupported(format!("quadrature requested for effective dimension {dim} > {}", self.cfg.quad_dim_max))
        };
        let mut mean_out = vec![0.0; means.len()];
        let mut pair_out = vec![0.0; pairs.len()];
        let mut mc_means: Vec<usize> = vec![];
        let mut mc_pairs: Vec<usize> = vec![];
        for (slot, &i) in means.iter().enumerate() {
            if let Some(a) = &affine[i] {
                mean_out[slot] = gs.affine_mean(a);
                continue;
            }
            let dim = self.effective_dim(gs, &leaves[i])?;
            if method != Method::MonteCarlo && dim <= self.cfg.quad_dim_max {
                mean_out[slot] = self.quad(gs, &leaves[i], &[&fns[i]], &|v| v[0])?;
            } else if let Some(v) = self.factored(method, fns[i].factors(), gs)? {
                mean_out[slot] = v;
            } else if method == Method::Quadrature {
                too_big(dim)?;
            } else {
                mc_means.push(slot);
            }
        }
        for (slot, &(i, j)) in pairs.iter().enumerate() {
            if let (Some(a), Some(b)) = (&affine[i], &affine[j]) {
                pair_out[slot] = gs.affine_cov(a, b) + gs.affine_mean(a) * gs.affine_mean(b);
                continue;
            }
            let u = union(&leaves[i], &leaves[j]);
            let dim = self.effective_dim(gs, &u)?;
            if method != Method::MonteCarlo && dim <= self.cfg.quad_dim_max {
                pair_out[slot] = self.quad(gs, &u, &[&fns[i], &fns[j]], &|v| v[0] * v[1])?;
            } else if let Some(v) = self.factored(method, [fns[i].factors(), fns[j].factors()].concat(), gs)? {
                pair_out[slot] = v;
            } else if method == Method::Quadrature {
                too_big(dim)?;
            } else {
                mc_pairs.push(slot);
            }
        }
        let used_mc = !mc_pairs.is_empty() || !mc_means.is_empty();
        if used_mc {
            let mut need: BTreeSet<usize> = mc_means.iter().map(|s| means[*s]).collect();
            for s in &mc_pairs {
                need.insert(pairs[*s].0);
                need.insert(pairs[*s].1);
            }
            let need: Vec<usize> = need.into_iter().collect();
            let vars: Vec<VarId> = {
                let s: BTreeSet<VarId> = need.iter().flat_map(|i| leaves[*i].iter().cloned()).collect();
                s.into_iter().collect()
            };
            let refs: Vec<&ExprDag> = need.iter().map(|i| &fns[*i]).collect();
            let vals = self.mc_values(gs, &vars, &refs)?;
            let pos = |i: usize| need.iter().position(|x| *x == i).unwrap();
            let n = self.cfg.mc_samples as f64;
            for s in mc_means {
                mean_out[s] = vals[pos(means[s])].iter().sum::<f64>() / n;
            }
            for s in mc_pairs {
                let (a, b) = (&vals[pos(pairs[s].0)], &vals[pos(pairs[s].1)]);
                pair_out[s] = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
            }
        }
        if mean_out.iter().chain(pair_out.iter()).any(|x| !x.is_finite()) {
            return numeric("non-finite expectation");
        }
        Ok((mean_out, pair_out, used_mc))
    }

    /// `E[prod factors]` as a product over mutually independent blocks of leaves,
    /// when there are at least two such blocks.
    fn factored(&self, method: Method, factors: Vec<ExprDag>, gs: &GaussianSpec) -> Result<Option<f64>> {
        if method == Method::MonteCarlo || factors.len() < 2 {
            return Ok(None);
        }
        let leaves: Vec<Vec<VarId>> = factors.iter().map(|f| f.leaves()).collect();
        let all: Vec<VarId> = leaves.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let mut parent: Vec<usize> = (0..all.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let pos = |v: &VarId| all.iter().position(|x| x == v).unwrap();
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                let (i, j) = (gs.index_of(all[a]).unwrap(), gs.index_of(all[b]).unwrap());
                if gs.cov[(i, j)] != 0.0 {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        for l in &leaves {
            for w in l.windows(2) {
                let (ra, rb) = (find(&mut parent, pos(&w[0])), find(&mut parent, pos(&w[1])));
                parent[ra] = rb;
            }
        }
        let mut groups: BTreeMap<Option<usize>, Vec<&ExprDag>> = BTreeMap::new();
        for (f, l) in factors.iter().zip(&leaves) {
            let key = l.first().map(|v| find(&mut parent, pos(v)));
            groups.entry(key).or_default().push(f);
        }
        if groups.keys().filter(|k| k.is_some()).count() < 2 {
            let Some(k) = factors.iter().position(|f| f.lin_terms().is_some()) else {
                return Ok(None);
            };
            let mut total = 0.0;
            for (w, term) in factors[k].lin_terms().unwrap() {
                if w == 0.0 {
                    continue;
                }
                let mut rest: Vec<&ExprDag> = factors.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, f)| f).collect();
                rest.push(&term);
                total += w * self.mean(&ExprDag::prod(&rest), gs)?;
            }
            return Ok(Some(total));
        }
        let mut total = 1.0;
        for fs in groups.values() {
            total *= self.mean(&ExprDag::prod(fs), gs)?;
        }
        Ok(Some(total))
    }

    /// `E[f]` for a single function.
    pub fn mean(&self, f: &ExprDag, gs: &GaussianSpec) -> Result<f64> {
        let leaves = f.leaves();
        for l in &leaves {
            if gs.index_of(*l).is_none() {
                return unsupported(format!("leaf {l} outside class"));
            }
        }
        if self.cfg.method != Method::MonteCarlo {
            if let Some(a) = f.affine() {
                return Ok(gs.affine_mean(&a));
            }
            let dim = self.effective_dim(gs, &leaves)?;
            if dim <= self.cfg.quad_dim_max {
                return self.quad(gs, &leaves, &[f], &|v| v[0]);
            }
            if let Some(v) = self.factored(self.cfg.method, f.factors(), gs)? {
                return Ok(v);
            }
            if self.cfg.method == Method::Quadrature {
                return unsupported(format!("quadrature requested for effective dimension {dim}"));
            }
        }
        let v = self.mc_values(gs, &leaves, &[f])?;
        Ok(v[0].iter().sum::<f64>() / v[0].len() as f64)
    }

    /// `E[d f / d z_wrt]`.
    ///
    /// The direct route differentiates `f` symbolically; Dirac deltas of affine
    /// arguments are integrated by conditioning. The Stein route inverts
    /// `E[(Z - mu) f] = K E[grad f]` over a maximal well-conditioned subset of the
    /// leaves containing `wrt`.
    pub fn derivative_expectation(&self, f: &ExprDag, gs: &GaussianSpec, wrt: VarId, route: DerivRoute) -> Result<f64> {
        match route {
            DerivRoute::Direct => self.direct_derivative(f, gs, wrt),
            DerivRoute::Stein => self.stein_derivative(f, gs, wrt),
            DerivRoute::Auto => match self.direct_derivative(f, gs, wrt) {
                Err(TpError::Unsupported(_)) => self.stein_derivative(f, gs, wrt),
                r => r,
            },
        }
    }

    fn direct_derivative(&self, f: &ExprDag, gs: &GaussianSpec, wrt: VarId) -> Result<f64> {
        let terms = f.derivative(wrt)?;
        let mut total = 0.0;
        for t in terms {
            match &t.delta {
                None => total += self.mean(&t.factor_dag(), gs)?,
                Some(a) => {
                    let m = gs.affine_mean(a);
                    let s2 = gs.affine_cov(a, a);
                    if s2 <= 1e-14 * gs.cov.amax().max(1e-300) {
                        return numeric("Dirac delta of a degenerate Gaussian argument");
                    }
                    let dens = (-0.5 * m * m / s2).exp() / (2.0 * PI * s2).sqrt();
                    // Condition on a(Z) = 0.
                    let n = gs.labels.len();
                    let mut w = DVector::zeros(n);
                    for (v, c) in &a.coeffs {
                        w[gs.index_of(*v).unwrap()] += c;
                    }
                    let kw = &gs.cov * &w;
                    let mean = &gs.mean - &kw * (m / s2);
                    let cov = &gs.cov - &kw * kw.transpose() / s2;
                    let cov = (&cov + cov.transpose()) * 0.5;
                    let cond = GaussianSpec { labels: gs.labels.clone(), mean, cov };
                    total += dens * self.mean(&t.factor_dag(), &cond)?;
                }
            }
        }
        Ok(total)
    }

    fn stein_derivative(&self, f: &ExprDag, gs: &GaussianSpec, wrt: VarId) -> Result<f64> {
        let mut leaves = f.leaves();
        if !leaves.contains(&wrt) {
            leaves.insert(0, wrt);
        }
        let m = gs.marginal(&leaves)?;
        let w = leaves.iter().position(|v| *v == wrt).unwrap();
        let sub = independent_subset(&m.cov, &[w], 1e-9);
        if !sub.contains(&w) {
            return numeric(format!("coordinate {wrt} has degenerate variance"));
        }
        let mut fns = vec![f.clone()];
        for &i in &sub {
            fns.push(ExprDag::leaf(leaves[i]));
        }
        let mom = self.expect(&fns, &m)?;
        let ef = mom.mean[0];
        let rhs = DVector::from_fn(sub.len(), |r, _| mom.gram[(0, r + 1)] - m.mean[sub[r]] * ef);
        let kii = DMatrix::from_fn(sub.len(), sub.len(), |r, c| m.cov[(sub[r], sub[c])]);
        let sol = kii
            .cholesky()
            .ok_or_else(|| TpError::Numeric("singular covariance in Stein inversion".into()))?
            .solve(&rhs);
        Ok(sol[sub.iter().position(|i| *i == w).unwrap()])
    }

    /// `E[f(z_a) g(z_b)]` for every pair of coordinates of `N(0, sigma)`, where
    /// `f`, `g` are one-leaf templates.
    pub fn v_op_pair(&self, f: &ExprDag, g: &ExprDag, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = sigma.nrows();
        let x = template_leaf(f)?;
        let y = template_leaf(g)?;
        let (a, b) = (VarId::new(1, Kind::G), VarId::new(2, Kind::G));
        let fa = f.substitute(&mut |v| if v == x { Some(ExprDag::leaf(a)) } else { None });
        let gb = g.substitute(&mut |v| if v == y { Some(ExprDag::leaf(b)) } else { None });
        let ga = g.substitute(&mut |v| if v == y { Some(ExprDag::leaf(a)) } else { None });
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let cov = DMatrix::from_row_slice(2, 2, &[sigma[(i, i)], sigma[(i, j)], sigma[(j, i)], sigma[(j, j)]]);
                let gs = GaussianSpec::new(vec![a, b], DVector::zeros(2), cov)?;
                let pair = if i == j { ExprDag::prod(&[&fa, &ga]) } else { ExprDag::prod(&[&fa, &gb]) };
                out[(i, j)] = self.mean(&pair, &gs)?;
                if i != j {
                    let pair = ExprDag::prod(&[&ExprDag::substitute(f, &mut |v| if v == x { Some(ExprDag::leaf(b)) } else { None }), &ga]);
                    out[(j, i)] = self.mean(&pair, &gs)?;
                }
            }
        }
        Ok(out)
    }

    /// `V_phi(sigma)_{ab} = E[phi(z_a) phi(z_b)]`, `z ~ N(0, sigma)`.
    pub fn v_op(&self, phi: &Func, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let t = unary_template(phi);
        self.v_op_pair(&t, &t, sigma)
    }
}

/// `phi(x)` on the template leaf.
pub fn unary_template(phi: &Func) -> ExprDag {
    ExprDag::apply(phi.clone(), &[&ExprDag::leaf(VarId::new(1, Kind::G))])
}

fn template_leaf(f: &ExprDag) -> Result<VarId> {
    let l = f.leaves();
    match l.len() {
        1 => Ok(l[0]),
        0 => Ok(VarId::new(1, Kind::G)),
        _ => unsupported("V-operator templates must have one leaf"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(l: usize) -> VarId {
        VarId::new(l, Kind::G)
    }

    fn std1() -> GaussianSpec {
        GaussianSpec::new(vec![g(1)], DVector::zeros(1), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn relu_second_moment() {
        let e = Engine::default();
        let f = ExprDag::apply(Func::unary("relu").unwrap(), &[&ExprDag::leaf(g(1))]);
        let m = e.expect(&[f], &std1()).unwrap();
        assert!((m.gram[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((m.mean[0] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn arccos_kernels() {
        let e = Engine::default();
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.95] {
            let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let v = e.v_op(&Func::unary("sign").unwrap(), &s).unwrap();
            assert!((v[(0, 1)] - 2.0 / PI * f64::asin(rho)).abs() < 1e-8, "sign {rho} {}", v[(0, 1)] - 2.0 / PI * f64::asin(rho));
            let v = e.v_op(&Func::unary("relu").unwrap(), &s).unwrap();
            let exact = ((1.0 - rho * rho).sqrt() + (PI - f64::acos(rho)) * rho) / (2.0 * PI);
            assert!((v[(0, 1)] - exact).abs() < 1e-9, "relu {rho}");
        }
    }

    #[test]
    fn orthant_probability_in_three_dimensions() {
        let e = Engine::default();
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.2, 0.3, 2.0, 0.5, 0.2, 0.5, 1.5]);
        let gs = GaussianSpec::anonymous(DVector::zeros(3), s).unwrap();
        let step = Func::unary("step").unwrap();
        let l: Vec<ExprDag> = (1..=3).map(|i| ExprDag::leaf(g(i))).collect();
        let f = ExprDag::prod(&[&ExprDag::apply(step.clone(), &[&l[0]]), &ExprDag::apply(step.clone(), &[&l[1]]), &ExprDag::apply(step, &[&l[2]])]);
        let r = |i: usize, j: usize| gs.cov[(i, j)] / (gs.cov[(i, i)] * gs.cov[(j, j)]).sqrt();
        let exact = 0.125 + (r(0, 1).asin() + r(0, 2).asin() + r(1, 2).asin()) / (4.0 * PI);
        assert!((e.mean(&f, &gs).unwrap() - exact).abs() < 1e-8);
    }

    #[test]
    fn constant_is_exact() {
        let e = Engine::default();
        let m = e.expect(&[ExprDag::constant(1.0)], &std1()).unwrap();
        assert_eq!(m.mean[0], 1.0);
        assert_eq!(m.gram[(0, 0)], 1.0);
    }

    #[test]
    fn outside_leaf_is_an_error() {
        let e = Engine::default();
        assert!(e.expect(&[ExprDag::leaf(g(5))], &std1()).is_err());
    }

    #[test]
    fn relu_delta_closed_form() {
        let e = Engine::default();
        let gs = GaussianSpec::new(vec![g(1)], DVector::zeros(1), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let f = ExprDag::apply(Func::unary("step").unwrap(), &[&ExprDag::leaf(g(1))]);
        let d = e.derivative_expectation(&f, &gs, g(1), DerivRoute::Direct).unwrap();
        assert!((d - 1.0 / (2.0 * PI * 2.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn v_op_identity_is_exact() {
        let e = Engine::default();
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let v = e.v_op(&Func::unary("id").unwrap(), &s).unwrap();
        assert!((v - s).amax() < 1e-14);
    }
}
