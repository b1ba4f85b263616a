//! Random programs and seed-driven property checks shared by the property
//! tests and the acceptance run.
#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tp_core::cdc::{compute_cdc, CdcPartition};
use tp_core::detranspose::general_limit_moment;
use tp_core::dsl::parse_program;
use tp_core::expr::{expand_base, expand_leaves, parse_expr, ExprDag};
use tp_core::gaussian::{DerivRoute, Engine, EngineConfig, GaussianSpec, Method};
use tp_core::limits::{compute_limits_no_transpose, limit_moment};
use tp_core::linalg::{condition_gaussian, conditioning_trick, jacobi_svd, pinv, psd_factor};
use tp_core::nonlin::Func;
use tp_core::program::{DimConstraints, Kind, Line, Skeleton, VarId};
use tp_core::seeds::stream;
use tp_core::simulate::{convergence_study, realize_with, widths_for, RealizeOptions, StudyOptions};
use tp_core::spec::SamplingSpec;

pub type Check = std::result::Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 0x5eed)
}

pub struct Loaded {
    pub sk: Skeleton,
    pub lam: DimConstraints,
    pub cdc: CdcPartition,
    pub spec: SamplingSpec,
    pub observables: Vec<(String, ExprDag)>,
}

pub fn load(text: &str) -> std::result::Result<Loaded, String> {
    let p = parse_program(text).map_err(|e| format!("{e}\n{text}"))?;
    let cdc = compute_cdc(&p.skeleton, &p.constraints).map_err(|e| format!("{e}\n{text}"))?;
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).map_err(|e| format!("{e}\n{text}"))?;
    Ok(Loaded { sk: p.skeleton, lam: p.constraints, cdc, spec, observables: p.observables })
}

fn pick<'a, T>(r: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(r).expect("non-empty")
}

fn coef(r: &mut ChaCha8Rng) -> f64 {
    *pick(r, &[-1.5, -1.0, -0.5, 0.5, 1.0, 2.0])
}

/// A random transpose-free program of at most `max_lines` lines over one or two
/// dimension classes, with random input laws and a few observables.
pub fn transpose_free_program(seed: u64, max_lines: usize) -> String {
    let r = &mut rng(seed);
    let two = r.random_bool(0.5);
    let classes: Vec<&str> = if two { vec!["n", "m"] } else { vec!["n"] };
    let mut text = String::new();
    let mut directives = String::new();
    let mut g: HashMap<&str, Vec<String>> = classes.iter().map(|c| (*c, vec![])).collect();
    let mut h: HashMap<&str, Vec<String>> = classes.iter().map(|c| (*c, vec![])).collect();
    let mut mats: Vec<(String, &str, &str)> = vec![];
    let mut lines = 0;

    let n_in = r.random_range(1..=2);
    for i in 0..n_in {
        let x = format!("x{i}");
        text += &format!("input vec {x} : n\n");
        directives += &format!("cov {x} {x} = {:.2}\n", r.random_range(0.5..1.5));
        if r.random_bool(0.5) {
            directives += &format!("mean {x} = {:.2}\n", r.random_range(-0.8..0.8));
        }
        g.get_mut("n").unwrap().push(x);
        lines += 1;
    }
    if n_in == 2 {
        directives += &format!("cov x0 x1 = {:.2}\n", r.random_range(-0.4..0.4));
    }
    let shapes: Vec<(&str, &str)> = if two { vec![("n", "n"), ("m", "n"), ("n", "m")] } else { vec![("n", "n")] };
    let n_mat = r.random_range(1..=shapes.len().min(2));
    for (j, (rows, cols)) in shapes.iter().take(n_mat).enumerate() {
        let w = format!("W{j}");
        text += &format!("input mat {w} : {rows} x {cols}\n");
        if r.random_bool(0.5) {
            directives += &format!("sigma {w} = {:.2}\n", r.random_range(0.6..1.4));
        }
        mats.push((w, *rows, *cols));
        lines += 1;
    }
    let mut k = 0;
    while lines < max_lines {
        let name = format!("v{k}");
        let choice = r.random_range(0..4);
        let (w, rows, cols) = pick(r, &mats).clone();
        let args: Vec<String> = g[cols].iter().chain(h[cols].iter()).cloned().collect();
        let c = *pick(r, &classes);
        if choice == 0 || g[c].is_empty() {
            if args.is_empty() {
                break;
            }
            let a = pick(r, &args).clone();
            text += &format!("{name} = {w} * {a}\n");
            g.get_mut(rows).unwrap().push(name);
        } else if choice == 1 {
            let a = pick(r, &g[c]).clone();
            let b = pick(r, &g[c]).clone();
            text += &format!("{name} = {}*{a} + {}*{b}\n", coef(r), coef(r));
            g.get_mut(c).unwrap().push(name);
        } else if choice == 2 {
            let f = *pick(r, &["tanh", "relu", "erf", "abs", "sq", "id"]);
            let a = pick(r, &g[c]).clone();
            text += &format!("{name} = {f}({a})\n");
            h.get_mut(c).unwrap().push(name);
        } else {
            let a = pick(r, &g[c]).clone();
            let b = pick(r, &g[c]).clone();
            text += &format!("{name} = prod({a}, {b})\n");
            h.get_mut(c).unwrap().push(name);
        }
        k += 1;
        lines += 1;
    }
    let mut obs = 0;
    for c in &classes {
        if g[c].is_empty() {
            continue;
        }
        for _ in 0..2 {
            let a = pick(r, &g[c]).clone();
            let b = pick(r, &g[c]).clone();
            let e = match r.random_range(0..4) {
                0 => format!("{a} * {b}"),
                1 => format!("tanh({a}) * {b}"),
                2 => format!("relu({a}) * relu({b})"),
                _ => format!("{a} + 0.5*{b}*{b}"),
            };
            directives += &format!("observe q{obs} = {e}\n");
            obs += 1;
        }
    }
    text + &directives
}

/// A random unlabelled skeleton with transposes, reuse and explicit constraints.
pub fn cdc_program(seed: u64) -> String {
    let r = &mut rng(seed);
    let mut text = String::new();
    let mut gs: Vec<String> = vec![];
    let mut vecs: Vec<String> = vec![];
    let mut mats: Vec<String> = vec![];
    for i in 0..r.random_range(1..=3) {
        text += &format!("input vec x{i}\n");
        gs.push(format!("x{i}"));
        vecs.push(format!("x{i}"));
    }
    for j in 0..r.random_range(1..=3) {
        text += &format!("input mat M{j}\n");
        mats.push(format!("M{j}"));
        if r.random_bool(0.5) {
            text += &format!("trans T{j} = M{j}\n");
            mats.push(format!("T{j}"));
        }
    }
    let mut k = 0;
    while vecs.len() < 8 {
        let name = format!("v{k}");
        k += 1;
        match r.random_range(0..4) {
            0 | 1 => {
                let a = pick(r, &vecs).clone();
                text += &format!("{name} = {} * {a}\n", pick(r, &mats));
                gs.push(name.clone());
            }
            2 => {
                let a = pick(r, &gs).clone();
                if r.random_bool(0.5) {
                    let b = pick(r, &gs).clone();
                    text += &format!("{name} = 1*{a} + 1*{b}\n");
                } else {
                    text += &format!("{name} = 2*{a}\n");
                }
                gs.push(name.clone());
            }
            _ => {
                let a = pick(r, &gs).clone();
                text += &format!("{name} = tanh({a})\n");
            }
        }
        vecs.push(name);
    }
    for _ in 0..r.random_range(0..=2) {
        let a = pick(r, &gs).clone();
        let b = pick(r, &gs).clone();
        text += &format!("constrain dim({a}) = dim({b})\n");
    }
    text
}

/// Finest partition of the vector vars satisfying every equality constraint,
/// by exhaustive search over set partitions. Returns a block id per var.
pub fn brute_force_classes(sk: &Skeleton, lam: &DimConstraints) -> Vec<(VarId, usize)> {
    let vars: Vec<VarId> = sk.vars().filter(|v| !v.is_a()).collect();
    let idx: HashMap<VarId, usize> = vars.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut pairs: Vec<(usize, usize)> = vec![];
    let mut cols: HashMap<VarId, Vec<usize>> = HashMap::new();
    let mut rows: HashMap<VarId, Vec<usize>> = HashMap::new();
    for v in sk.vars() {
        match sk.line(v) {
            Line::MatMul { matrix, arg } => {
                let (root, t) = sk.matrix_root(*matrix);
                let (inn, out) = if t { (&mut rows, &mut cols) } else { (&mut cols, &mut rows) };
                inn.entry(root).or_default().push(idx[arg]);
                out.entry(root).or_default().push(idx[&v]);
            }
            Line::LinComb { terms } => pairs.extend(terms.iter().map(|(_, a)| (idx[&v], idx[a]))),
            Line::Nonlin { args, .. } | Line::Comp { args, .. } => pairs.extend(args.iter().map(|a| (idx[&v], idx[a]))),
            _ => {}
        }
    }
    for set in cols.values().chain(rows.values()) {
        pairs.extend(set.windows(2).map(|w| (w[0], w[1])));
    }
    pairs.extend(lam.iter().map(|(a, b)| (idx[a], idx[b])));

    let n = vars.len();
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut cur = vec![0usize; n];
    fn walk(i: usize, used: usize, cur: &mut Vec<usize>, pairs: &[(usize, usize)], best: &mut Option<(usize, Vec<usize>)>) {
        if i == cur.len() {
            if pairs.iter().all(|(a, b)| cur[*a] == cur[*b]) && best.as_ref().is_none_or(|(k, _)| used > *k) {
                *best = Some((used, cur.clone()));
            }
            return;
        }
        for b in 0..=used {
            cur[i] = b;
            walk(i + 1, used.max(b + 1), cur, pairs, best);
        }
    }
    walk(0, 0, &mut cur, &pairs, &mut best);
    let blocks = best.expect("the one-block partition is always consistent").1;
    vars.into_iter().zip(blocks).collect()
}

pub fn check_cdc(seed: u64) -> Check {
    let l = load(&cdc_program(seed))?;
    let brute = brute_force_classes(&l.sk, &l.lam);
    for (u, bu) in &brute {
        for (v, bv) in &brute {
            let same = l.cdc.class(*u).is_some() && l.cdc.class(*u) == l.cdc.class(*v);
            if same != (bu == bv) {
                return Err(format!("{} and {}: union-find says {same}", l.sk.name(*u), l.sk.name(*v)));
            }
        }
    }
    Ok(())
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-2.0..2.0))
}

/// Random matrix of random shape and rank.
pub fn random_low_rank(seed: u64) -> DMatrix<f64> {
    let r = &mut rng(seed);
    let (m, n) = (r.random_range(1..=6), r.random_range(1..=6));
    let k = r.random_range(0..=m.min(n));
    if k == 0 {
        return DMatrix::zeros(m, n);
    }
    random_matrix(r, m, k) * random_matrix(r, k, n)
}

fn close(what: &str, a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Check {
    let d = (a - b).amax();
    if d <= tol * (1.0 + b.amax()) {
        Ok(())
    } else {
        Err(format!("{what}: residual {d:.3e}"))
    }
}

pub fn check_moore_penrose(seed: u64) -> Check {
    let a = random_low_rank(seed);
    let p = pinv(&a);
    let ap = &a * &p;
    let pa = &p * &a;
    close("A A+ A = A", &(&ap * &a), &a, 1e-8)?;
    close("A+ A A+ = A+", &(&pa * &p), &p, 1e-8)?;
    close("A A+ symmetric", &ap.transpose(), &ap, 1e-8)?;
    close("A+ A symmetric", &pa.transpose(), &pa, 1e-8)
}

/// Conditioning a Gaussian matrix on `A Q = Y`, `A^T P = X`, against generic
/// Gaussian conditioning of the vectorized matrix.
pub fn check_conditioning_trick(seed: u64) -> Check {
    let r = &mut rng(seed);
    let (n, m) = (r.random_range(1..=4), r.random_range(1..=4));
    let (nq, np) = (r.random_range(0..=2), r.random_range(0..=2));
    let a0 = random_matrix(r, n, m);
    let mut q = random_matrix(r, m, nq);
    if nq == 2 && r.random_bool(0.3) {
        let c = q.column(0) * -0.5;
        q.set_column(1, &c);
    }
    let p = random_matrix(r, n, np);
    let y = &a0 * &q;
    let x = a0.transpose() * &p;
    let c = conditioning_trick(&y, &q, &x, &p).map_err(|e| e.to_string())?;
    close("E Q = Y", &(&c.mean * &q), &y, 1e-8)?;
    close("P^T E = X^T", &(p.transpose() * &c.mean), &x.transpose(), 1e-8)?;

    let rows = n * q.ncols() + m * p.ncols();
    let mut d = DMatrix::zeros(rows, n * m);
    let mut value = DVector::zeros(rows);
    let mut k = 0;
    for i in 0..n {
        for t in 0..q.ncols() {
            for j in 0..m {
                d[(k, i * m + j)] = q[(j, t)];
            }
            value[k] = y[(i, t)];
            k += 1;
        }
    }
    for j in 0..m {
        for t in 0..p.ncols() {
            for i in 0..n {
                d[(k, i * m + j)] = p[(i, t)];
            }
            value[k] = x[(j, t)];
            k += 1;
        }
    }
    let size = n * m + rows;
    let mut joint = DMatrix::zeros(size, size);
    joint.view_mut((0, 0), (n * m, n * m)).fill_with_identity();
    joint.view_mut((n * m, 0), (rows, n * m)).copy_from(&d);
    joint.view_mut((0, n * m), (n * m, rows)).copy_from(&d.transpose());
    joint.view_mut((n * m, n * m), (rows, rows)).copy_from(&(&d * d.transpose()));
    let i1: Vec<usize> = (0..n * m).collect();
    let i2: Vec<usize> = (n * m..size).collect();
    let (mean, cov) = condition_gaussian(&DVector::zeros(size), &joint, &i1, &i2, &value);
    let e = DMatrix::from_fn(n, m, |i, j| mean[i * m + j]);
    close("conditional mean", &c.mean, &e, 1e-8)?;
    let want = DMatrix::from_fn(n * m, n * m, |a, b| c.proj_left[(a / m, b / m)] * c.proj_right[(a % m, b % m)]);
    close("conditional covariance", &want, &cov, 1e-8)?;

    if np > 0 && nq > 0 {
        let mut bad = x.clone();
        bad[(0, 0)] += 0.5;
        if conditioning_trick(&y, &q, &bad, &p).is_ok() {
            return Err("inconsistent constraints were accepted".into());
        }
    }
    Ok(())
}

pub fn random_cov(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let k = r.random_range(1..=n);
    let b = random_matrix(r, n, k);
    &b * b.transpose() * 0.5 + DMatrix::identity(n, n) * r.random_range(0.0..0.3)
}

pub fn engine() -> Engine {
    Engine::new(EngineConfig::default())
}

pub fn check_v_op_identity(seed: u64) -> Check {
    let r = &mut rng(seed);
    let n = r.random_range(1..=4);
    let s = random_cov(r, n);
    let v = engine().v_op(&Func::unary("id").map_err(|e| e.to_string())?, &s).map_err(|e| e.to_string())?;
    close("V_id(S) = S", &v, &s, 1e-10)
}

/// `E[d f / d z_a]` by differentiating `f` against Stein's identity.
pub fn check_stein(seed: u64) -> Check {
    let r = &mut rng(seed);
    let n = r.random_range(2..=3);
    let labels: Vec<VarId> = (1..=n).map(|l| VarId::new(l, Kind::G)).collect();
    let cov = random_cov(r, n) + DMatrix::identity(n, n) * 0.2;
    let mean = DVector::from_fn(n, |_, _| r.random_range(-0.5..0.5));
    let gs = GaussianSpec::new(labels.clone(), mean, cov).map_err(|e| e.to_string())?;
    let names = ["a", "b", "c"];
    let f = *pick(
        r,
        &["tanh(a) * b", "a * a * b", "erf(a) + b * b", "tanh(1*a + 1*b)", "cube(a) - tanh(b)", "sq(tanh(a)) * b"],
    );
    let phi = parse_expr(f, &|s| names.iter().position(|x| *x == s).map(|i| labels[i])).map_err(|e| e.to_string())?;
    let wrt = labels[r.random_range(0..2)];
    let e = engine();
    let direct = e.derivative_expectation(&phi, &gs, wrt, DerivRoute::Direct).map_err(|e| e.to_string())?;
    let stein = e.derivative_expectation(&phi, &gs, wrt, DerivRoute::Stein).map_err(|e| e.to_string())?;
    if (direct - stein).abs() <= 1e-6 * (1.0 + direct.abs()) {
        Ok(())
    } else {
        Err(format!("{f} wrt {wrt}: direct {direct} vs Stein {stein}"))
    }
}

/// The interpreter's vectors equal the expanded definitions evaluated coordinatewise.
pub fn check_expansion(seed: u64) -> Check {
    let l = load(&transpose_free_program(seed, 10))?;
    let widths = widths_for(17, &l.cdc, &l.spec);
    let real = realize_with(&l.sk, &l.cdc, &l.spec, &widths, seed, RealizeOptions::default()).map_err(|e| e.to_string())?;
    for v in l.sk.vars().filter(|v| !v.is_a()) {
        let d = expand_base(&l.sk, v).map_err(|e| e.to_string())?;
        let got = real.vector(v).ok_or_else(|| format!("{} was not realized", l.sk.name(v)))?;
        for i in 0..got.len() {
            let want = d.eval(&|u| real.vector(u).map(|x| x[i]).unwrap_or(f64::NAN));
            if (want - got[i]).abs() > 1e-12 * (1.0 + want.abs()) {
                return Err(format!("{}[{i}]: interpreter {} vs expansion {want}", l.sk.name(v), got[i]));
            }
        }
    }
    Ok(())
}

fn study(l: &Loaded, seed: u64, workers: usize) -> std::result::Result<String, String> {
    let opts = StudyOptions { trials: 3, seed, workers, ..StudyOptions::default() };
    let e = Engine::new(EngineConfig { seed, method: Method::Auto, mc_samples: 20_000, ..EngineConfig::default() });
    let s = convergence_study(&l.sk, &l.cdc, &l.spec, &l.observables, &[8, 24], &opts, &e).map_err(|e| e.to_string())?;
    Ok(format!("{s:?}"))
}

/// Same seed gives bit-identical realizations and reports; another seed differs.
pub fn check_reproducible(seed: u64) -> Check {
    let l = load(&transpose_free_program(seed, 8))?;
    let widths = widths_for(12, &l.cdc, &l.spec);
    let opts = RealizeOptions::default();
    let a = realize_with(&l.sk, &l.cdc, &l.spec, &widths, seed, opts).map_err(|e| e.to_string())?;
    let b = realize_with(&l.sk, &l.cdc, &l.spec, &widths, seed, opts).map_err(|e| e.to_string())?;
    let c = realize_with(&l.sk, &l.cdc, &l.spec, &widths, seed ^ 1, opts).map_err(|e| e.to_string())?;
    if a != b {
        return Err("realizations differ under the same seed".into());
    }
    let x = l.sk.find("x0").unwrap();
    if a.vector(x) == c.vector(x) {
        return Err("different seeds gave the same input".into());
    }
    if study(&l, seed, 1)? != study(&l, seed, 1)? {
        return Err("reports differ under the same seed".into());
    }
    Ok(())
}

pub fn check_parallel_equals_serial(seed: u64) -> Check {
    let l = load(&transpose_free_program(seed, 8))?;
    let serial = study(&l, seed, 1)?;
    for w in [2, 4] {
        if study(&l, seed, w)? != serial {
            return Err(format!("report with {w} workers differs from the serial one"));
        }
    }
    Ok(())
}

/// On transpose-free programs the detransposed route reduces to the plain limit.
pub fn check_degeneracy(seed: u64) -> Check {
    let l = load(&transpose_free_program(seed, 10))?;
    let e = engine();
    let table = compute_limits_no_transpose(&l.sk, &l.cdc, &l.spec, &e).map_err(|e| e.to_string())?;
    for (name, phi) in &l.observables {
        let class = l.cdc.common_class(&l.sk, &phi.leaves()).map_err(|e| e.to_string())?;
        let plain = limit_moment(&table, class, &expand_leaves(&l.sk, phi).map_err(|e| e.to_string())?, &e)
            .map_err(|e| e.to_string())?;
        let general = general_limit_moment(&l.sk, &l.cdc, &l.spec, class, phi, &e).map_err(|e| e.to_string())?;
        if (plain - general).abs() > 1e-10 * (1.0 + plain.abs()) {
            return Err(format!("{name}: plain {plain} vs detransposed {general}"));
        }
    }
    Ok(())
}

pub fn check_svd(seed: u64) -> Check {
    let a = random_low_rank(seed);
    let a = if a.nrows() < a.ncols() { a.transpose() } else { a };
    let (u, s, v) = jacobi_svd(&a);
    close("U S V^T = A", &(&u * DMatrix::from_diagonal(&s) * v.transpose()), &a, 1e-12)?;
    close("V^T V = I", &(v.transpose() * &v), &DMatrix::identity(v.ncols(), v.ncols()), 1e-12)
}

/// Square-root factors of rank-deficient covariances reproduce them.
pub fn check_psd_factor(seed: u64) -> Check {
    let r = &mut rng(seed);
    let n = r.random_range(1..=8);
    let k = r.random_range(0..=n);
    let b = random_matrix(r, n, k);
    let cov = &b * b.transpose();
    let f = psd_factor(&cov, 1e-12).map_err(|e| e.to_string())?;
    close("B B^T = K", &(&f * f.transpose()), &cov, 1e-10)
}
