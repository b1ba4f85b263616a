//! Finite-width realizations of programs and convergence studies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

use crate::cdc::{CdcPartition, ClassId};
use crate::detranspose::{detranspose, image_moment};
use crate::error::{Result, TpError};
use crate::expr::{expand_leaves, ExprDag};
use crate::gaussian::Engine;
use crate::limits::{compute_limits_backprop, compute_limits_no_transpose, limit_moment, LimitTable};
use crate::linalg::psd_factor;
use crate::program::{Line, Skeleton, VarId};
use crate::seeds::{derive, stream};
use crate::spec::SamplingSpec;

/// Default upper bound on any class width.
pub const MAX_WIDTH: usize = 1 << 15;

const INPUT_TAG: u64 = 0x1e9;
const MATRIX_TAG: u64 = 0x3a7;

#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub widths: BTreeMap<ClassId, usize>,
    pub vectors: BTreeMap<VarId, DVector<f64>>,
    /// Sampled input matrices keyed by their `MatIn` var.
    pub matrices: BTreeMap<VarId, DMatrix<f64>>,
    pub seed: u64,
}

impl Realization {
    pub fn vector(&self, v: VarId) -> Option<&DVector<f64>> {
        self.vectors.get(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RealizeOptions {
    /// Reuse the leading block of a common infinite array across widths.
    pub coupled: bool,
    /// Keep matrices in the realization instead of dropping them after last use.
    pub keep_matrices: bool,
    pub max_width: usize,
}

impl Default for RealizeOptions {
    fn default() -> Self {
        RealizeOptions { coupled: false, keep_matrices: true, max_width: MAX_WIDTH }
    }
}

/// Widths `round(n * scale)` for every class.
pub fn widths_for(n: usize, cdc: &CdcPartition, spec: &SamplingSpec) -> BTreeMap<ClassId, usize> {
    (0..cdc.n_classes).map(|c| (c, ((n as f64 * spec.scale_of(c)).round() as usize).max(1))).collect()
}

fn width_tag(widths: &BTreeMap<ClassId, usize>, coupled: bool) -> u64 {
    if coupled {
        return 0;
    }
    let path: Vec<u64> = widths.iter().flat_map(|(c, n)| [*c as u64, *n as u64]).collect();
    derive(1, &path)
}

pub fn realize(sk: &Skeleton, cdc: &CdcPartition, spec: &SamplingSpec, seed: u64) -> Result<Realization> {
    let widths = spec.widths.clone();
    realize_with(sk, cdc, spec, &widths, seed, RealizeOptions::default())
}

pub fn realize_with(
    sk: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    widths: &BTreeMap<ClassId, usize>,
    seed: u64,
    opts: RealizeOptions,
) -> Result<Realization> {
    let width = |c: Option<ClassId>, what: &str| -> Result<usize> {
        let c = c.ok_or_else(|| TpError::Validation(vec![format!("{what} has no dimension class")]))?;
        let n = *widths.get(&c).ok_or_else(|| TpError::InvalidSpec(format!("no width given for class {c}")))?;
        if n == 0 || n > opts.max_width {
            return Err(TpError::InvalidSpec(format!("width {n} of class {c} outside 1..={}", opts.max_width)));
        }
        Ok(n)
    };
    let tag = width_tag(widths, opts.coupled);
    let mut last_use: HashMap<VarId, usize> = HashMap::new();
    for v in sk.vars() {
        if let Line::MatMul { matrix, .. } = sk.line(v) {
            last_use.insert(sk.matrix_root(*matrix).0, v.line);
        }
    }
    let mut out = Realization { widths: widths.clone(), vectors: BTreeMap::new(), matrices: BTreeMap::new(), seed };
    let mut inputs_done: BTreeMap<ClassId, ()> = BTreeMap::new();
    for v in sk.vars() {
        let name = sk.name(v).to_string();
        match sk.line(v) {
            Line::VecIn { .. } => {
                let c = cdc.class(v);
                let n = width(c, &name)?;
                let c = c.unwrap();
                if inputs_done.insert(c, ()).is_none() {
                    let (vars, mean, cov) = spec.input_block(sk, cdc, c);
                    let f = psd_factor(&cov, 0.0)?;
                    let k = vars.len();
                    let mut cols = vec![DVector::zeros(n); k];
                    let base = derive(seed, &[INPUT_TAG, c as u64, tag]);
                    let mut xi = DVector::zeros(f.ncols());
                    for i in 0..n {
                        let mut rng = stream(base, i as u64);
                        for x in xi.iter_mut() {
                            *x = rng.sample(StandardNormal);
                        }
                        let z = &mean + &f * &xi;
                        for (j, col) in cols.iter_mut().enumerate() {
                            col[i] = z[j];
                        }
                    }
                    for (u, col) in vars.into_iter().zip(cols) {
                        out.vectors.insert(u, col);
                    }
                }
            }
            Line::MatIn { .. } => {
                let (r, c) = cdc.sides(v);
                if r.is_none() || c.is_none() {
                    continue;
                }
                let (n1, n2) = (width(r, &name)?, width(c, &name)?);
                let s = spec.sigma_of(sk, v) / (n2 as f64).sqrt();
                let base = derive(seed, &[MATRIX_TAG, v.line as u64, tag]);
                let mut m = DMatrix::zeros(n1, n2);
                for (j, mut col) in m.column_iter_mut().enumerate() {
                    let mut rng = stream(base, j as u64);
                    for x in col.iter_mut() {
                        *x = s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                out.matrices.insert(v, m);
            }
            Line::Transpose { .. } => {}
            Line::MatMul { matrix, arg } => {
                let (root, tr) = sk.matrix_root(*matrix);
                let m = out.matrices.get(&root).ok_or_else(|| TpError::Validation(vec![format!("{name}: matrix not sampled")]))?;
                let x = &out.vectors[arg];
                let y = if tr { m.tr_mul(x) } else { m * x };
                if !opts.keep_matrices && last_use.get(&root) == Some(&v.line) {
                    out.matrices.remove(&root);
                }
                out.vectors.insert(v, y);
            }
            Line::LinComb { terms } => {
                let n = width(cdc.class(v), &name)?;
                let mut y = DVector::zeros(n);
                for (a, g) in terms {
                    y.axpy(*a, &out.vectors[g], 1.0);
                }
                out.vectors.insert(v, y);
            }
            Line::Nonlin { f, args } | Line::Comp { f, args } => {
                let cols: Vec<&DVector<f64>> = args.iter().map(|a| &out.vectors[a]).collect();
                let n = cols.first().map(|c| c.len()).unwrap_or(0);
                let mut buf = vec![0.0; cols.len()];
                let y = DVector::from_fn(n, |i, _| {
                    for (b, c) in buf.iter_mut().zip(&cols) {
                        *b = c[i];
                    }
                    f.eval(&buf)
                });
                out.vectors.insert(v, y);
            }
        }
    }
    if !opts.keep_matrices {
        out.matrices.clear();
    }
    Ok(out)
}

/// Coordinate average of `phi` over the aligned vectors of its leaves.
pub fn empirical_moment(r: &Realization, phi: &ExprDag) -> Result<f64> {
    let leaves = phi.leaves();
    let cols: Vec<&DVector<f64>> = leaves
        .iter()
        .map(|v| r.vector(*v).ok_or_else(|| TpError::Unsupported(format!("no realized value for {v}"))))
        .collect::<Result<_>>()?;
    let n = match cols.first() {
        Some(c) => c.len(),
        None => return Ok(phi.eval(&|_| 0.0)),
    };
    if cols.iter().any(|c| c.len() != n) {
        return Err(TpError::Unsupported("test function mixes dimension classes".into()));
    }
    let b = phi.bind(&leaves)?;
    let mut z = vec![0.0; leaves.len()];
    let mut scratch = Vec::with_capacity(16);
    let mut acc = 0.0;
    for i in 0..n {
        for (x, c) in z.iter_mut().zip(&cols) {
            *x = c[i];
        }
        acc += b.eval(&z, &mut scratch);
    }
    Ok(acc / n as f64)
}

/// Which limit computation supplies the theory column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryRoute {
    NoTranspose,
    GradientIndependent,
    Detransposed,
}

/// Limits of several observables by the route matching the program's shape.
pub fn theory_values(
    sk: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    quantities: &[(String, ExprDag)],
    engine: &Engine,
) -> Result<(TheoryRoute, Vec<f64>)> {
    let eval_table = |t: &LimitTable| -> Result<Vec<f64>> {
        quantities
            .iter()
            .map(|(_, phi)| {
                let e = expand_leaves(sk, phi)?;
                let class = cdc.common_class(sk, &phi.leaves())?;
                limit_moment(t, class, &e, engine)
            })
            .collect()
    };
    if !sk.has_transpose() {
        let t = compute_limits_no_transpose(sk, cdc, spec, engine)?;
        return Ok((TheoryRoute::NoTranspose, eval_table(&t)?));
    }
    let first = sk.vars().find(|v| matches!(sk.line(*v), Line::Transpose { .. })).unwrap();
    let fwd = Skeleton { syntax: sk.syntax, lines: sk.lines[..first.line - 1].to_vec() };
    if let Ok(t) = compute_limits_backprop(&fwd, sk, cdc, spec, engine) {
        return Ok((TheoryRoute::GradientIndependent, eval_table(&t)?));
    }
    let d = detranspose(sk, cdc, spec, engine)?;
    let vals = quantities
        .iter()
        .map(|(_, phi)| image_moment(&d, cdc.common_class(sk, &phi.leaves())?, phi, engine))
        .collect::<Result<_>>()?;
    Ok((TheoryRoute::Detransposed, vals))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub quantity: String,
    pub width: usize,
    pub empirical: f64,
    pub stderr: f64,
    pub theory: Option<f64>,
    pub abs_err: Option<f64>,
    /// `None` when the theory value is zero.
    pub rel_err: Option<f64>,
}

impl ReportRow {
    pub fn new(quantity: &str, width: usize, samples: &[f64], theory: Option<f64>) -> Self {
        let (empirical, stderr) = mean_stderr(samples);
        let abs_err = theory.map(|t| (empirical - t).abs());
        let rel_err = match (abs_err, theory) {
            (Some(e), Some(t)) if t != 0.0 => Some(e / t.abs()),
            _ => None,
        };
        ReportRow { quantity: quantity.to_string(), width, empirical, stderr, theory, abs_err, rel_err }
    }
}

/// Sample mean and `std / sqrt(trials)` with the unbiased standard deviation.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationReport {
    pub rows: Vec<ReportRow>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub route: Option<TheoryRoute>,
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    pub trials: usize,
    pub seed: u64,
    pub coupled: bool,
    pub max_width: usize,
    pub workers: usize,
    /// Skip the theory column.
    pub no_theory: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions { trials: 10, seed: 0, coupled: false, max_width: MAX_WIDTH, workers: worker_count(), no_theory: false }
    }
}

/// Worker count from `TP_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("TP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Per-trial seed.
pub fn trial_seed(root: u64, trial: usize) -> u64 {
    derive(root, &[trial as u64])
}

/// Run `f` for each trial on a pool of `workers` threads, preserving trial order.
pub fn run_trials<T: Send>(trials: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..trials).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TpError::Numeric(format!("thread pool: {e}")))?;
    pool.install(|| (0..trials).into_par_iter().map(&f).collect())
}

pub fn convergence_study(
    sk: &Skeleton,
    cdc: &CdcPartition,
    spec: &SamplingSpec,
    quantities: &[(String, ExprDag)],
    schedule: &[usize],
    opts: &StudyOptions,
    engine: &Engine,
) -> Result<SimulationReport> {
    if opts.trials < 2 {
        return Err(TpError::InvalidSpec("at least two trials are needed".into()));
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TpError::InvalidSpec("width schedule must be non-empty and increasing".into()));
    }
    let (route, theory) = if opts.no_theory {
        (None, vec![None; quantities.len()])
    } else {
        let (r, t) = theory_values(sk, cdc, spec, quantities, engine)?;
        (Some(r), t.into_iter().map(Some).collect())
    };
    let seeds: Vec<u64> = (0..opts.trials).map(|t| trial_seed(opts.seed, t)).collect();
    let ropts = RealizeOptions { coupled: opts.coupled, keep_matrices: false, max_width: opts.max_width };
    let mut rows = vec![];
    for &n in schedule {
        let widths = widths_for(n, cdc, spec);
        let per_trial = run_trials(opts.trials, opts.workers, |t| {
            let r = realize_with(sk, cdc, spec, &widths, seeds[t], ropts)?;
            quantities.iter().map(|(_, phi)| empirical_moment(&r, phi)).collect::<Result<Vec<f64>>>()
        })?;
        for (q, (name, _)) in quantities.iter().enumerate() {
            let xs: Vec<f64> = per_trial.iter().map(|v| v[q]).collect();
            rows.push(ReportRow::new(name, n, &xs, theory[q]));
        }
    }
    Ok(SimulationReport { rows, trials: opts.trials, seeds, route })
}
