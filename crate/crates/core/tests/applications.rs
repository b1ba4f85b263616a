use nalgebra::{DMatrix, DVector};
use tp_core::applications::*;
use tp_core::cdc::compute_cdc;
use tp_core::detranspose::{detranspose, image_moment};
use tp_core::dsl::parse_program;
use tp_core::expr::parse_expr;
use tp_core::gaussian::Engine;
use tp_core::limits::{compute_limits_backprop, compute_limits_no_transpose};
use tp_core::program::{Kind, Line};
use tp_core::spec::SamplingSpec;

fn inputs(k: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..k)
        .map(|_| {
            (0..d)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect()
        })
        .collect()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    m == &m.transpose() && m.clone().symmetric_eigen().eigenvalues.iter().all(|l| *l > -1e-9 * m.amax().max(1.0))
}

fn kinds(b: &Built) -> Vec<&'static str> {
    b.sk.vars()
        .map(|v| match b.sk.line(v) {
            Line::VecIn { .. } => "vec",
            Line::MatIn { .. } => "mat",
            Line::Transpose { .. } => "trans",
            Line::MatMul { .. } => "matmul",
            Line::LinComb { .. } => "lin",
            Line::Nonlin { .. } => "nonlin",
            Line::Comp { .. } => "comp",
        })
        .collect()
}

#[test]
fn two_layer_mlp_has_nine_lines() {
    let a = ArchSpec::new(Variant::Mlp, 2, "tanh", 1.0, 0.5, inputs(1, 4, 1));
    let b = build_program(&a).unwrap();
    assert_eq!(kinds(&b), ["vec", "vec", "lin", "nonlin", "mat", "vec", "matmul", "lin", "nonlin"]);
    let v = |l: usize| b.sk.var(l);
    assert_eq!(b.sk.line(v(7)), &Line::MatMul { matrix: v(5), arg: v(4) });
    assert_eq!(b.sk.line(v(8)), &Line::LinComb { terms: vec![(1.0, v(7)), (1.0, v(6))] });
}

#[test]
fn simple_rnn_ties_weights() {
    let a = ArchSpec::new(Variant::SimpleRnn, 2, "tanh", 1.0, 0.5, inputs(1, 4, 2));
    let b = build_program(&a).unwrap();
    assert_eq!(b.sk.len(), 11);
    let mats: Vec<_> = b
        .sk
        .vars()
        .filter_map(|v| match b.sk.line(v) {
            Line::MatMul { matrix, .. } => Some(*matrix),
            _ => None,
        })
        .collect();
    assert_eq!(mats.len(), 2);
    assert_eq!(mats[0], mats[1]);
}

#[test]
fn cnn_first_layer_matches_three_pixel_layout() {
    let a = ArchSpec::new(Variant::Cnn1dCircular, 2, "tanh", 1.0, 0.0, inputs(1, 6, 3));
    let b = build_program(&a).unwrap();
    assert_eq!(&kinds(&b)[..12], ["vec"; 6].iter().chain(&["lin"; 3]).chain(&["nonlin"; 3]).copied().collect::<Vec<_>>());
    let v = |l: usize| b.sk.var(l);
    for (line, x, y) in [(7, 1, 5), (8, 2, 6), (9, 3, 4)] {
        assert_eq!(b.sk.line(v(line)), &Line::LinComb { terms: vec![(1.0, v(x)), (1.0, v(y))] });
    }
    assert_eq!(b.sk.len(), 26);
}

#[test]
fn every_builder_validates() {
    for variant in [
        Variant::Mlp,
        Variant::MlpBackward,
        Variant::MlpGmp,
        Variant::Resnet,
        Variant::SimpleRnn,
        Variant::BatchnormForward,
        Variant::Cnn1dCircular,
    ] {
        let a = ArchSpec::new(variant, 3, "tanh", 1.2, 0.3, inputs(2, 6, 4));
        let b = build_program(&a).unwrap();
        assert!(b.sk.validate_structure().is_empty(), "{variant:?}");
        assert!(tp_core::cdc::validate(&b.sk, &b.constraints).is_empty(), "{variant:?}");
        assert!(b.spec.validate(&b.sk, &b.cdc).is_ok());
    }
    let mut bad = ArchSpec::new(Variant::Mlp, 2, "tanh", 1.0, 0.0, vec![]);
    assert!(build_program(&bad).is_err());
    bad.inputs = vec![vec![1.0]];
    bad.activation = "prod".into();
    assert!(build_program(&bad).is_err());
}

#[test]
fn linear_kernels_are_constant_in_depth() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 4, "id", 1.0, 0.0, inputs(3, 5, 5));
    let s = mlp_sigma(&a, &e).unwrap();
    for m in &s {
        assert!(close(m, &s[0], 1e-12));
    }
    let x = inputs(1, 5, 6);
    let a = ArchSpec::new(Variant::Mlp, 4, "relu", 2f64.sqrt(), 0.0, vec![x[0].clone(), x[0].clone()]);
    let s = mlp_sigma(&a, &e).unwrap();
    for m in &s[..4] {
        assert!((m[(0, 0)] - s[0][(0, 0)]).abs() < 1e-10);
        assert!((m[(0, 1)] - s[0][(0, 0)]).abs() < 1e-10);
    }
}

#[test]
fn kernels_are_symmetric_psd() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 3, "tanh", 1.5, 0.1, inputs(5, 7, 7));
    for m in mlp_sigma(&a, &e).unwrap() {
        assert!(is_psd(&m));
    }
    assert!(is_psd(&mlp_ntk(&a, &e).unwrap()));
    for m in signal_prop(&a, &e, true).unwrap().pi.unwrap() {
        assert!(is_psd(&m));
    }
}

#[test]
fn gradient_covariances_match_backprop_limits() {
    let e = Engine::default();
    for ratio in [1.0, 2.0] {
        let mut a = ArchSpec::new(Variant::MlpBackward, 3, "tanh", 1.3, 0.2, inputs(2, 4, 8));
        a.ratios = vec![1.0, ratio, 1.0];
        let b = build_program(&a).unwrap();
        let fwd = build_program(&ArchSpec { variant: Variant::Mlp, ..a.clone() }).unwrap();
        let t = compute_limits_backprop(&fwd.sk, &b.sk, &b.cdc, &b.spec, &e).unwrap();
        let pi = signal_prop(&a, &e, true).unwrap().pi.unwrap();
        for l in 1..3 {
            for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                let got = t.cov(b.var(&format!("u{l}_{i}")).unwrap(), b.var(&format!("u{l}_{j}")).unwrap()).unwrap();
                assert!((got - pi[l - 1][(i, j)]).abs() < 1e-9, "ratio {ratio} layer {l}: {got} vs {}", pi[l - 1][(i, j)]);
            }
        }
    }
}

#[test]
fn one_layer_linear_ntk() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 1, "id", 1.0, 1.0, inputs(3, 4, 9));
    let s1 = a.input_gram().add_scalar(1.0);
    assert!(close(&mlp_ntk(&a, &e).unwrap(), &(s1 * 2.0), 1e-12));
}

#[test]
fn odd_activation_has_no_mean_pooling_correction() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 3, "tanh", 1.2, 0.3, inputs(3, 4, 10));
    let t = gmp_terms(&a, &e, false).unwrap();
    assert!(t.a.iter().flatten().all(|x| x.abs() < 1e-12));
    let forced = gmp_ntk_from(&a, &gmp_terms(&a, &e, true).unwrap(), &e).unwrap();
    assert!(close(&mlp_ntk_gmp(&a, &e).unwrap(), &forced, 1e-12));
}

#[test]
fn relu_mean_pooling_coefficient() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 3, "relu", 1.0, 0.2, inputs(2, 4, 11));
    let t = gmp_terms(&a, &e, false).unwrap();
    let s_top = &t.sigma[2];
    for i in 0..2 {
        let want = 1.0 / (2.0 * std::f64::consts::PI * s_top[(i, i)]).sqrt();
        assert!((t.a[1][i] - want).abs() < 1e-10, "{} vs {want}", t.a[1][i]);
        assert!((t.a[0][i] - 0.5 * want).abs() < 1e-10);
    }
    assert_eq!(t.a[2], DVector::zeros(2));
}

#[test]
fn mean_pooling_backward_matches_detransposition() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::MlpGmp, 3, "relu", 1.1, 0.3, inputs(2, 4, 12));
    let b = build_program(&a).unwrap();
    let d = detranspose(&b.sk, &b.cdc, &b.spec, &e).unwrap();
    let t = gmp_terms(&a, &e, false).unwrap();
    let names = b.sk.name_map();
    for l in 1..=2 {
        let sigma = &t.sigma[l - 1];
        let step = |s: f64, c: f64| {
            let rho = (c / s).clamp(-1.0, 1.0);
            0.5 - rho.acos() / (2.0 * std::f64::consts::PI)
        };
        let relu2 = |s1: f64, s2: f64, c: f64| {
            let rho = (c / (s1 * s2).sqrt()).clamp(-1.0, 1.0);
            (s1 * s2).sqrt() / (2.0 * std::f64::consts::PI) * ((1.0 - rho * rho).sqrt() + (std::f64::consts::PI - rho.acos()) * rho)
        };
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let phi = parse_expr(&format!("d{l}_{i} * d{l}_{j}"), &|s| names.get(s).copied()).unwrap();
            let class = b.cdc.class(phi.leaves()[0]).unwrap();
            let got = image_moment(&d, class, &phi, &e).unwrap();
            let (si, sj, c) = (sigma[(i, i)], sigma[(j, j)], sigma[(i, j)]);
            let vd = step((si * sj).sqrt(), c);
            let want = t.pi[l - 1][(i, j)] * vd + t.a[l - 1][i] * t.a[l - 1][j] * relu2(si, sj, c);
            assert!((got - want).abs() < 1e-8, "layer {l} ({i},{j}): {got} vs {want}");
        }
    }
}

#[test]
fn resnet_with_silent_branch_accumulates_bias() {
    let e = Engine::default();
    let mut a = ArchSpec::new(Variant::Resnet, 3, "tanh", 1.0, 0.2, inputs(2, 4, 13));
    a.sigma_v = 0.0;
    a.sigma_a = 0.5;
    let p = signal_prop(&a, &e, false).unwrap();
    for l in 1..=3 {
        assert!(close(&p.sigma_tilde[l], &p.sigma_tilde[l - 1].add_scalar(0.25), 1e-14));
    }
}

#[test]
fn resnet_kernels_match_limit_engine() {
    let e = Engine::default();
    let mut a = ArchSpec::new(Variant::Resnet, 2, "tanh", 1.1, 0.2, inputs(2, 4, 14));
    a.sigma_v = 0.8;
    a.sigma_a = 0.3;
    let b = build_program(&a).unwrap();
    let t = compute_limits_no_transpose(&b.sk, &b.cdc, &b.spec, &e).unwrap();
    let p = signal_prop(&a, &e, false).unwrap();
    for l in 1..=2 {
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let g = t.cov(b.var(&format!("g{l}_{i}")).unwrap(), b.var(&format!("g{l}_{j}")).unwrap()).unwrap();
            let x = t.cov(b.var(&format!("x{l}_{i}")).unwrap(), b.var(&format!("x{l}_{j}")).unwrap()).unwrap();
            assert!((g - p.sigma[l - 1][(i, j)]).abs() < 1e-10);
            assert!((x - p.sigma_tilde[l][(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn resnet_gradient_matches_backprop_limits() {
    let src = "
input vec x0 : n
input mat W1 : n x n
input vec b1 : n
input mat V1 : n x n
input vec a1 : n
m1 = W1 * x0
g1 = 1*m1 + 1*b1
h1 = tanh(g1)
r1 = V1 * h1
x1 = 1*x0 + 1*r1 + 1*a1
cov x0 x0 = 0.8
cov b1 b1 = 0.04
cov a1 a1 = 0.09
sigma W1 = 1.1
sigma V1 = 0.8
";
    let back = "
trans V1T = V1
trans W1T = W1
input vec v : n
s1 = V1T * v
d1 = scale:d:tanh(g1, s1)
t1 = W1T * d1
u0 = 1*v + 1*t1
cov v v = 1.44
";
    let fwd = parse_program(src).unwrap();
    let p = parse_program(&format!("{src}{back}")).unwrap();
    let cdc = compute_cdc(&p.skeleton, &p.constraints).unwrap();
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).unwrap();
    let e = Engine::default();
    let t = compute_limits_backprop(&fwd.skeleton, &p.skeleton, &cdc, &spec, &e).unwrap();
    let u0 = p.skeleton.find("u0").unwrap();
    let mut a = ArchSpec::new(Variant::Resnet, 1, "tanh", 1.1, 0.2, vec![vec![0.8f64.sqrt()]]);
    a.sigma_v = 0.8;
    a.sigma_a = 0.3;
    a.sigma_w[1] = 1.2;
    let pi = signal_prop(&a, &e, true).unwrap().pi.unwrap();
    assert!((t.cov(u0, u0).unwrap() - pi[0][(0, 0)]).abs() < 1e-9, "{} vs {}", t.cov(u0, u0).unwrap(), pi[0][(0, 0)]);
}

#[test]
fn cnn_kernels_match_limit_engine() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Cnn1dCircular, 2, "tanh", 1.3, 0.2, inputs(2, 6, 15));
    let b = build_program(&a).unwrap();
    let t = compute_limits_no_transpose(&b.sk, &b.cdc, &b.spec, &e).unwrap();
    let p = signal_prop(&a, &e, true).unwrap();
    for l in 1..=2 {
        for x in 0..6 {
            for y in 0..6 {
                let (gx, gy) = (format!("g{l}_{}_{}", x % 2, x / 2), format!("g{l}_{}_{}", y % 2, y / 2));
                let c = t.cov(b.var(&gx).unwrap(), b.var(&gy).unwrap()).unwrap();
                assert!((c - p.sigma[l - 1][(x, y)]).abs() < 1e-10, "{gx} {gy}");
            }
        }
    }
    for m in p.pi.unwrap() {
        assert!(is_psd(&m));
    }
}

#[test]
fn batchnorm_kernels_match_limit_engine() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::BatchnormForward, 2, "relu", 1.2, 0.1, inputs(3, 4, 16));
    let b = build_program(&a).unwrap();
    let t = compute_limits_no_transpose(&b.sk, &b.cdc, &b.spec, &e).unwrap();
    let p = signal_prop(&a, &e, false).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let c = t.cov(b.var(&format!("g2_{i}")).unwrap(), b.var(&format!("g2_{j}")).unwrap()).unwrap();
            assert!((c - p.sigma[1][(i, j)]).abs() < 1e-10);
        }
    }
    let err = signal_prop(&a, &e, true).unwrap_err();
    assert!(err.to_string().contains("singular at the origin"));
}

#[test]
fn tied_rnn_matches_untied_mlp() {
    let e = Engine::default();
    let x = inputs(2, 4, 17);
    let rnn = ArchSpec::new(Variant::SimpleRnn, 3, "tanh", 1.4, 0.3, x.clone());
    let mlp = ArchSpec::new(Variant::Mlp, 3, "tanh", 1.4, 0.3, x);
    let (br, bm) = (build_program(&rnn).unwrap(), build_program(&mlp).unwrap());
    let tr = compute_limits_no_transpose(&br.sk, &br.cdc, &br.spec, &e).unwrap();
    let tm = compute_limits_no_transpose(&bm.sk, &bm.cdc, &bm.spec, &e).unwrap();
    for l in 1..=3 {
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let (gi, gj) = (format!("g{l}_{i}"), format!("g{l}_{j}"));
            let a = tr.cov(br.var(&gi).unwrap(), br.var(&gj).unwrap()).unwrap();
            let b = tm.cov(bm.var(&gi).unwrap(), bm.var(&gj).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-12, "{l}: {a} vs {b}");
        }
    }
    let s = mlp_sigma(&mlp, &e).unwrap();
    let g = tm.cov(bm.var("g3_0").unwrap(), bm.var("g3_1").unwrap()).unwrap();
    assert!((g - s[2][(0, 1)]).abs() < 1e-10);
}

#[test]
fn semicircle_moments() {
    let want = [1, 0, 1, 0, 2, 0, 5, 0, 14, 0, 42];
    for (k, w) in want.iter().enumerate() {
        assert_eq!(goe_moment_exact(k), *w, "k={k}");
    }
    for j in 0..20 {
        let c: u128 = (0..j).map(|i| catalan(i) * catalan(j - 1 - i)).sum();
        if j > 0 {
            assert_eq!(catalan(j), c);
        }
        assert_eq!(goe_moment_exact(2 * j), catalan(j));
    }
}

#[test]
fn marchenko_pastur_moments() {
    assert_eq!(mp_moment(0, 0.3), 1.0);
    assert_eq!(mp_moment(1, 0.3), 1.0);
    assert_eq!(mp_moment(2, 1.0), 2.0);
    for k in 0..12 {
        assert_eq!(mp_moment(k, 1.0), catalan(k) as f64);
        for alpha in [0.25, 0.5, 1.0, 2.0, 3.5] {
            let (r, c) = (mp_moment(k, alpha), mp_closed_form(k, alpha));
            assert!((r - c).abs() <= 1e-12 * c.abs().max(1.0), "k={k} alpha={alpha}: {r} vs {c}");
            if k > 0 {
                let shifted: f64 = (0..k)
                    .map(|j| {
                        let b = (0..j).fold(1.0, |acc, i| acc * (k - 1 - i) as f64 / (i + 1) as f64);
                        b * alpha.sqrt().powi(j as i32) * (1.0 + alpha).powi((k - 1 - j) as i32) * goe_moment(j)
                    })
                    .sum();
                assert!((shifted - r).abs() <= 1e-12 * r.abs(), "k={k} alpha={alpha}");
            }
        }
    }
}

#[test]
fn random_matrix_programs_parse() {
    for src in [goe_program(3, 1), mp_program(3, 0.5, 2)] {
        let p = parse_program(&src).unwrap();
        let cdc = compute_cdc(&p.skeleton, &p.constraints).unwrap();
        SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives).unwrap();
    }
    let p = parse_program(&mp_program(2, 2.0, 3)).unwrap();
    assert_eq!(p.skeleton.vars().filter(|v| v.kind == Kind::G).count(), 15);
    let names = p.skeleton.name_map();
    let e = parse_expr(&probe_moment_text(2, 3), &|n| names.get(n).copied()).unwrap();
    assert_eq!(e.leaves().len(), 6);
}

fn linear_amp() -> AmpConfig {
    let id = tp_core::nonlin::Func::unary("id").unwrap();
    AmpConfig {
        delta: 0.5,
        sigma_x0_sq: 1.5,
        sigma_w_sq: 0.3,
        f: AmpFn::additive(id.clone()),
        g: AmpFn::additive(id),
        steps: 3,
        n_big: 60,
        seed: 4,
    }
}

#[test]
fn linear_state_evolution() {
    let c = linear_amp();
    let se = amp_state_evolution(&c, &Engine::default()).unwrap();
    let mut tau = 0.0;
    for t in 0..3 {
        let s = tau / c.delta + c.sigma_x0_sq / c.delta;
        assert!((se.sigma2[t] - s).abs() < 1e-12);
        assert!((se.tau2[t] - (s + c.sigma_w_sq)).abs() < 1e-12);
        tau = se.tau2[t];
    }
}

#[test]
fn first_linear_step_by_hand() {
    let c = linear_amp();
    let (n, big) = (c.n_small(), c.n_big);
    let a = DMatrix::from_fn(n, big, |i, j| (((i * 7 + j * 13) % 11) as f64 - 5.0) / (10.0 * (n as f64).sqrt()));
    let x0 = DVector::from_fn(big, |i, _| ((i % 5) as f64 - 2.0) * 0.4);
    let w = DVector::from_fn(n, |i, _| ((i % 3) as f64 - 1.0) * 0.3);
    let se = amp_state_evolution(&c, &Engine::default()).unwrap();
    let p = amp_iterate(&c, &se, &a, &x0, &w).unwrap();
    let b0 = &a * &x0;
    let m0 = &b0 + &w;
    let xi = b0.dot(&m0) / (n as f64 * se.sigma2[0]);
    let h1 = a.transpose() * &m0 - &x0 * xi;
    assert!((&p.h[0] - &h1).amax() < 1e-12);
    let lam = h1.dot(&(&h1 + &x0)) / (n as f64 * se.tau2[0]);
    let b1 = &a * (&h1 + &x0) - &m0 * lam;
    assert!((&p.b[1] - &b1).amax() < 1e-12);
}

#[test]
fn zero_amp_stays_zero() {
    let mut c = AmpConfig::soft_threshold(0.5);
    c.sigma_x0_sq = 0.0;
    c.sigma_w_sq = 0.0;
    c.n_big = 200;
    c.steps = 4;
    let se = amp_state_evolution(&c, &Engine::default()).unwrap();
    assert!(se.tau2.iter().chain(&se.sigma2).all(|x| *x == 0.0));
    let r = amp_run(&c, &se).unwrap();
    assert!(r.h_sq.iter().chain(&r.b_sq).chain(&r.q_sq).all(|x| *x == 0.0));
}

#[test]
fn soft_threshold_amp_tracks_state_evolution() {
    let c = AmpConfig { n_big: 2000, ..AmpConfig::soft_threshold(1.0) };
    let (se, runs) = amp_trials(&c, 4, 1, &Engine::default()).unwrap();
    let (_, again) = amp_trials(&c, 4, 2, &Engine::default()).unwrap();
    assert_eq!(runs, again);
    for t in 0..c.steps {
        let m = runs.iter().map(|r| r.h_sq[t]).sum::<f64>() / 4.0;
        assert!((m / se.tau2[t] - 1.0).abs() < 0.05, "t={t}: {m} vs {}", se.tau2[t]);
        // With g the identity the Onsager coefficient is E g' = 1.
        let xi = runs.iter().map(|r| r.xi[t]).sum::<f64>() / 4.0;
        assert!((xi - 1.0).abs() < 0.05, "t={t}: xi {xi}");
    }
}

#[test]
fn finite_ntk_approaches_limit() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Mlp, 2, "tanh", 1.3, 0.2, inputs(2, 5, 18));
    let theory = mlp_ntk(&a, &e).unwrap();
    let draws = empirical_ntk(&a, 512, Readout::Gaussian, 8, 3, 1).unwrap();
    let mean = draws.iter().fold(DMatrix::zeros(2, 2), |acc, m| acc + m) / draws.len() as f64;
    assert!(close(&mean, &theory, 0.05), "{mean} vs {theory}");
}

#[test]
fn finite_mean_pooling_ntk_approaches_limit() {
    let e = Engine::default();
    for act in ["tanh", "relu"] {
        let a = ArchSpec::new(Variant::Mlp, 3, act, 1.2, 0.2, inputs(2, 5, 19));
        let theory = mlp_ntk_gmp(&a, &e).unwrap();
        let draws = empirical_ntk(&a, 768, Readout::MeanPool, 6, 5, 1).unwrap();
        let mean = draws.iter().fold(DMatrix::zeros(2, 2), |acc, m| acc + m) / draws.len() as f64;
        assert!(close(&mean, &theory, 0.06), "{act}: {mean} vs {theory}");
    }
}

#[test]
fn finite_cnn_ntk_approaches_limit() {
    let e = Engine::default();
    let a = ArchSpec::new(Variant::Cnn1dCircular, 2, "tanh", 1.2, 0.2, inputs(2, 6, 20));
    let theory = cnn_ntk(&a, &e).unwrap();
    let draws = empirical_ntk(&a, 384, Readout::Gaussian, 6, 7, 1).unwrap();
    let mean = draws.iter().fold(DMatrix::zeros(2, 2), |acc, m| acc + m) / draws.len() as f64;
    assert!(close(&mean, &theory, 0.06), "{mean} vs {theory}");
}
