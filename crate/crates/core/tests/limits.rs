use tp_core::cdc::compute_cdc;
use tp_core::dsl::parse_program;
use tp_core::expr::{parse_expr, ExprDag};
use tp_core::gaussian::Engine;
use tp_core::limits::{check_extension, compute_limits_backprop, compute_limits_no_transpose, limit_moment};
use tp_core::spec::SamplingSpec;

/// Simpson rule for `E f(Z)`, `Z ~ N(0, s2)`.
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

fn load(src: &str) -> (tp_core::program::Skeleton, tp_core::cdc::CdcPartition, SamplingSpec) {
    let p = parse_program(src).unwrap();
    let cdc = compute_cdc(&p.skeleton, &p.constraints).unwrap();
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).unwrap();
    (p.skeleton, cdc, spec)
}

const MLP: &str = "
input vec wx : c1
input vec b1 : c1
input vec b2 : c2
input mat W2 : c2 x c1
g1 = 1*wx + 1*b1
h1 = tanh(g1)
m2 = W2 * h1
g2 = 1*m2 + 1*b2
h2 = tanh(g2)
cov wx wx = 2.0
";

#[test]
fn one_hidden_layer_tanh() {
    let (sk, cdc, spec) = load(MLP);
    let t = compute_limits_no_transpose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    let g1 = sk.find("g1").unwrap();
    let g2 = sk.find("g2").unwrap();
    assert_eq!(t.cov(g1, g1).unwrap(), 3.0);
    let want = simpson(|z| z.tanh().powi(2), 3.0) + 1.0;
    assert!((t.cov(g2, g2).unwrap() - want).abs() < 1e-10, "{} {want}", t.cov(g2, g2).unwrap());
    assert_eq!(t.mean(sk.find("m2").unwrap()), Some(0.0));
    assert!(t.psd_violations().is_empty());
}

#[test]
fn linear_input_norm() {
    let (sk, cdc, spec) = load("input vec wx\ninput mat W\ng = W * wx\ncov wx wx = 1\n");
    let t = compute_limits_no_transpose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    let g = sk.find("g").unwrap();
    assert_eq!(t.cov(g, g).unwrap(), 1.0);
}

#[test]
fn tied_linear_chain_decorrelates() {
    let (sk, cdc, spec) = load("input vec x : n\ninput mat A : n x n\ng1 = A * x\ng2 = A * g1\ng3 = A * g2\ncov x x = 1.7\n");
    let t = compute_limits_no_transpose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    let v: Vec<_> = ["x", "g1", "g2", "g3"].iter().map(|n| sk.find(n).unwrap()).collect();
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 1.7 } else { 0.0 };
            assert!((t.cov(v[i], v[j]).unwrap() - want).abs() < 1e-12, "{i} {j}");
        }
    }
}

#[test]
fn transposes_are_rejected_without_detransposition() {
    let (sk, cdc, spec) = load("input vec x\ninput mat W\ntrans T = W\ng = W * x\ny = T * g\n");
    assert!(compute_limits_no_transpose(&sk, &cdc, &spec, &Engine::default()).is_err());
}

#[test]
fn widths_do_not_enter_the_limit() {
    let (sk, cdc, mut spec) = load(MLP);
    let e = Engine::default();
    let a = compute_limits_no_transpose(&sk, &cdc, &spec, &e).unwrap();
    for c in 0..cdc.n_classes {
        spec.widths.insert(c, 2048);
    }
    let b = compute_limits_no_transpose(&sk, &cdc, &spec, &e).unwrap();
    assert_eq!(a, b);
}

#[test]
fn second_moments() {
    let (sk, cdc, spec) = load("input vec x : n\ninput vec y : n\nmean x = 0.5\nmean y = -1\ncov x y = 0.25\ncov x x = 2\n");
    let t = compute_limits_no_transpose(&sk, &cdc, &spec, &Engine::default()).unwrap();
    let names = sk.name_map();
    let e = Engine::default();
    let c = cdc.class(names["x"]).unwrap();
    let sq = parse_expr("x * x", &|s| names.get(s).copied()).unwrap();
    assert!((limit_moment(&t, c, &sq, &e).unwrap() - 2.25).abs() < 1e-14);
    let xy = parse_expr("x * y", &|s| names.get(s).copied()).unwrap();
    assert!((limit_moment(&t, c, &xy, &e).unwrap() - (0.25 - 0.5)).abs() < 1e-14);
    assert!(limit_moment(&t, c, &ExprDag::leaf(tp_core::program::VarId::new(9, tp_core::program::Kind::G)), &e).is_err());
}

const BACKWARD: &str = "
trans W2T = W2
input vec v : c2
d2 = scale:d:tanh(g2, v)
u1 = W2T * d2
d1 = scale:d:tanh(g1, u1)
";

fn fwd_and_ext(extra: &str) -> (tp_core::program::Skeleton, tp_core::program::Skeleton) {
    let fwd = parse_program(MLP).unwrap().skeleton;
    let ext = parse_program(&format!("{MLP}{extra}")).unwrap().skeleton;
    (fwd, ext)
}

#[test]
fn backward_extension_passes_checks() {
    let (fwd, ext) = fwd_and_ext(BACKWARD);
    let (_, cdc, spec) = load(&format!("{MLP}{BACKWARD}"));
    let _ = cdc;
    assert!(check_extension(&fwd, &ext, &spec).is_empty(), "{:?}", check_extension(&fwd, &ext, &spec));
}

#[test]
fn even_function_of_readout_is_rejected() {
    let extra = "trans W2T = W2\ninput vec v : c2\nd2 = sq(v)\n";
    let (fwd, ext) = fwd_and_ext(extra);
    let (_, _, spec) = load(&format!("{MLP}{extra}"));
    let d = check_extension(&fwd, &ext, &spec);
    assert!(d.iter().any(|m| m.contains("odd")), "{d:?}");
}

#[test]
fn untransposed_reuse_is_rejected() {
    let extra = "input vec v : c1\nd = tanh(v)\nu = W2 * d\n";
    let (fwd, ext) = fwd_and_ext(extra);
    let (_, _, spec) = load(&format!("{MLP}{extra}"));
    let d = check_extension(&fwd, &ext, &spec);
    assert!(d.iter().any(|m| m.contains("transposed")), "{d:?}");
}

fn gradient_cov(ratio: f64, readout_var: f64) -> f64 {
    let src = format!("{MLP}{BACKWARD}scale c2 = {ratio}\ncov v v = {readout_var}\n");
    let p = parse_program(&src).unwrap();
    let fwd = parse_program(MLP).unwrap().skeleton;
    let cdc = compute_cdc(&p.skeleton, &p.constraints).unwrap();
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).unwrap();
    let t = compute_limits_backprop(&fwd, &p.skeleton, &cdc, &spec, &Engine::default()).unwrap();
    let u = p.skeleton.find("u1").unwrap();
    // Cross-covariances with the forward pass vanish.
    let g1 = p.skeleton.find("g1").unwrap();
    assert_eq!(t.cov(u, g1).unwrap(), 0.0);
    t.cov(u, u).unwrap()
}

#[test]
fn gradient_covariance_matches_backward_recursion() {
    let sigma2 = 1.0 + simpson(|z| z.tanh().powi(2), 3.0);
    let dphi2 = simpson(|z| (1.0 - z.tanh().powi(2)).powi(2), sigma2);
    let pi = gradient_cov(1.0, 0.7);
    assert!((pi - 0.7 * dphi2).abs() < 1e-9, "{pi} vs {}", 0.7 * dphi2);
    let pi2 = gradient_cov(2.0, 0.7);
    assert!((pi2 / pi - 2.0).abs() < 1e-12);
    assert_eq!(gradient_cov(1.0, 0.0), 0.0);
}
