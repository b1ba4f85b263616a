use tp_core::cdc::compute_cdc;
use tp_core::detranspose::{detranspose, detranspose_derivative, image_moment};
use tp_core::dsl::parse_program;
use tp_core::expr::parse_expr;
use tp_core::gaussian::Engine;
use tp_core::limits::compute_limits_no_transpose;
use tp_core::program::{Line, Skeleton};
use tp_core::spec::SamplingSpec;

fn load(src: &str) -> (Skeleton, tp_core::cdc::CdcPartition, SamplingSpec) {
    let p = parse_program(src).unwrap();
    let cdc = compute_cdc(&p.skeleton, &p.constraints).unwrap();
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).unwrap();
    (p.skeleton, cdc, spec)
}

fn simpson(f: impl Fn(f64) -> f64, s2: f64) -> f64 {
    let s = s2.sqrt();
    let n = 20000;
    let (a, b) = (-12.0 * s, 12.0 * s);
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let x = a + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(x) * (-0.5 * x * x / s2).exp();
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI * s2).sqrt()
}

fn moment(src: &str, expr: &str) -> f64 {
    let (sk, cdc, spec) = load(src);
    let e = Engine::default();
    let d = detranspose(&sk, &cdc, &spec, &e).unwrap();
    let names = sk.name_map();
    let phi = parse_expr(expr, &|s| names.get(s).copied()).unwrap();
    let class = cdc.class(phi.leaves()[0]).unwrap();
    image_moment(&d, class, &phi, &e).unwrap()
}

const MLP: &str = "
input vec wx : c1
input vec b1 : c1
input mat W2 : c2 x c1
g1 = 1*wx + 1*b1
h1 = tanh(g1)
g2 = W2 * h1
h2 = relu(g2)
cov wx wx = 2.0
sigma W2 = 1.3
";

#[test]
fn transpose_free_programs_are_unchanged() {
    let (sk, cdc, spec) = load(MLP);
    let e = Engine::default();
    let d = detranspose(&sk, &cdc, &spec, &e).unwrap();
    let direct = compute_limits_no_transpose(&sk, &cdc, &spec, &e).unwrap();
    assert!(d.coeffs.values().all(|r| r.route == "empty" && r.a.is_empty()));
    for g in ["wx", "b1", "g1", "g2"] {
        let v = sk.find(g).unwrap();
        let w = d.phi[&v];
        assert!((d.limits.cov(w, w).unwrap() - direct.cov(v, v).unwrap()).abs() < 1e-12, "{g}");
    }
    assert!(d.fresh.is_empty());
    assert!(!d.check_sk.has_transpose());
}

const GRAD: &str = "
input vec x : n0
input vec one : n1
input mat W : n1 x n0
trans WT = W
g = W * x
h = tanh(g)
u = WT * h
mean x = 0.4
cov x x = 1.5
mean one = 1
cov one one = 0
sigma W = 1.2
scale n1 = 2
";

#[test]
fn correction_coefficient_matches_stein() {
    let (sk, cdc, spec) = load(GRAD);
    let e = Engine::default();
    let u = sk.find("u").unwrap();
    let proj = detranspose(&sk, &cdc, &spec, &e).unwrap();
    let der = detranspose_derivative(&sk, &cdc, &spec, &e).unwrap();
    let (a, b) = (proj.coeffs[&u].a[0], der.coeffs[&u].a[0]);
    let alpha = 2.0;
    let var_g = 1.44 * (1.5 + 0.16);
    let want = alpha * 1.44 * simpson(|z| 1.0 - z.tanh().powi(2), var_g);
    assert!((a - want).abs() < 1e-9, "{a} vs {want}");
    assert!((b - want).abs() < 1e-9, "{b} vs {want}");
    assert_eq!(proj.coeffs[&u].route, "pinv");
    assert!(proj.coeffs[&u].typecast);
    let fresh = &proj.fresh[0];
    assert_eq!(proj.check_spec.sigma[&fresh.check_var], 1.2 * 2f64.sqrt());
}

const QUAD: &str = "
input vec x : n
input vec one : n
input mat W : n x n
trans WT = W
g = W * x
h = prod(g, one)
u = WT * h
mean x = 0.75
cov x x = 2
mean one = 1
cov one one = 0
cov x one = 0
";

#[test]
fn quadratic_gradient_recovers_input_mean() {
    assert!((moment(QUAD, "u") - 0.75).abs() < 1e-12);
    // Treating WT as independent of W gives a mean of zero.
    let (sk, cdc, spec) = load(QUAD);
    let d = detranspose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    let g = d.phi_g[&sk.find("u").unwrap()];
    assert_eq!(d.limits.mean(g), Some(0.0));
}

fn goe(k: usize) -> String {
    let mut s = String::from("input vec x : n\ninput mat W : n x n\ntrans WT = W\n");
    let mut prev = "x".to_string();
    for i in 1..=k {
        s += &format!("a{i} = W * {prev}\nb{i} = WT * {prev}\ny{i} = 0.7071067811865476*a{i} + 0.7071067811865476*b{i}\n");
        prev = format!("y{i}");
    }
    s
}

#[test]
fn symmetrized_matrix_has_catalan_moments() {
    for (k, c) in [(1, 1.0), (2, 2.0), (3, 5.0)] {
        let m = moment(&goe(k), &format!("y{k} * y{k}"));
        assert!((m - c).abs() < 1e-9, "k={k}: {m}");
    }
    let odd = moment(&goe(3), "x * y3");
    assert!(odd.abs() < 1e-9);
}

#[test]
fn check_program_is_well_formed() {
    let (sk, cdc, spec) = load(&goe(2));
    let d = detranspose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    assert!(d.check_sk.validate_structure().is_empty());
    assert!(d.check_spec.validate(&d.check_sk, &d.check_cdc).is_ok());
    assert_eq!(d.fresh.len(), 1);
    let n_mat = d.check_sk.vars().filter(|v| matches!(d.check_sk.line(*v), Line::MatIn { .. })).count();
    assert_eq!(n_mat, 2);
    for r in d.coeffs.values() {
        assert_eq!(r.c.nrows(), r.h_vars.len());
        assert_eq!(r.g_vars.len(), r.h_vars.len());
    }
    assert!(d.limits.psd_violations().is_empty());
}

#[test]
fn extended_syntax_is_rejected() {
    let (mut sk, cdc, spec) = load("input vec x\nh = tanh(x)\n");
    sk.syntax = tp_core::program::Syntax::Extended;
    assert!(detranspose(&sk, &cdc, &spec, &Engine::default()).is_err());
}
