use serde_json::{json, Value};
use tp_core::applications::{
    amp_trials, build_program, catalan, cnn_ntk, empirical_ntk, gmp_ntk_from, gmp_terms, goe_moment, goe_program, mlp_ntk,
    mlp_ntk_gmp, mlp_sigma, mp_closed_form, mp_moment, mp_program, probe_moment_text, signal_prop, AmpConfig, ArchSpec, Built, KernelMatrix,
    Readout, Variant, CNN_PIXELS,
};
use tp_core::cdc::compute_cdc;
use tp_core::dsl::parse_program;
use tp_core::expr::ExprDag;
use tp_core::gaussian::Engine;
use tp_core::simulate::{convergence_study, theory_values, StudyOptions};
use tp_core::spec::SamplingSpec;
use tp_core::{Result, TpError};

use crate::commands::expr;
use crate::report::{Report, Row};

#[derive(Clone, Debug)]
pub struct DemoOpts {
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub widths: Option<Vec<usize>>,
    pub alpha: Vec<f64>,
    pub activation: Option<String>,
    pub arch: String,
    pub probes: usize,
    pub study: StudyOptions,
}

impl DemoOpts {
    fn schedule(&self, default: usize) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| vec![self.n.unwrap_or(default)])
    }

    fn act(&self, default: &str) -> String {
        self.activation.clone().unwrap_or_else(|| default.to_string())
    }
}

/// Two fixed inputs of dimension `d`.
fn demo_inputs(d: usize) -> Vec<Vec<f64>> {
    let base = [[1.0, -0.5, 0.3, 0.8, -1.1, 0.6], [0.4, 0.9, -0.7, 0.2, 0.5, -0.3]];
    base.iter().map(|x| (0..d).map(|i| x[i % 6]).collect()).collect()
}

fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect()
}

fn demo_report(name: &str, spec: Value) -> Report {
    Report::new(json!({"demo": name}), spec)
}

fn study_rows(
    b: &Built,
    q: &[(String, ExprDag)],
    schedule: &[usize],
    opts: &DemoOpts,
    e: &Engine,
    theory: &dyn Fn(usize) -> f64,
) -> Result<Vec<Row>> {
    let o = StudyOptions { no_theory: true, ..opts.study.clone() };
    let s = convergence_study(&b.sk, &b.cdc, &b.spec, q, schedule, &o, e)?;
    Ok(s
        .rows
        .iter()
        .map(|x| {
            let i = q.iter().position(|(n, _)| *n == x.quantity).unwrap_or(0);
            Row::measured(x.quantity.clone(), x.width, x.empirical, x.stderr, Some(theory(i)))
        })
        .collect())
}

/// Diagnostic comparing a closed form against the program's own limit.
fn cross_check(b: &Built, q: &[(String, ExprDag)], closed: &dyn Fn(usize) -> f64, e: &Engine) -> Result<String> {
    let (route, vals) = theory_values(&b.sk, &b.cdc, &b.spec, q, e)?;
    let worst = vals.iter().enumerate().map(|(i, v)| (v - closed(i)).abs()).fold(0.0, f64::max);
    Ok(format!("closed form vs program limit ({route:?}): max abs difference {worst:.3e}"))
}

fn load_text(text: &str) -> Result<Built> {
    let p = parse_program(text)?;
    let cdc = compute_cdc(&p.skeleton, &p.constraints)?;
    let spec = SamplingSpec::from_directives(&p.skeleton, &cdc, &p.directives)?;
    Ok(Built { sk: p.skeleton, constraints: p.constraints, cdc, spec })
}

fn check_probes(o: &DemoOpts) -> Result<()> {
    if o.probes == 0 {
        return Err(TpError::InvalidSpec("at least one probe vector is needed".into()));
    }
    Ok(())
}

pub fn semicircle(o: &DemoOpts, e: &Engine) -> Result<Report> {
    check_probes(o)?;
    let k = o.k.unwrap_or(6);
    let b = load_text(&goe_program(k, o.probes))?;
    let q: Vec<(String, ExprDag)> =
        (1..=k).map(|j| Ok((format!("m{j}"), expr(&b.sk, &probe_moment_text(j, o.probes))?))).collect::<Result<_>>()?;
    let schedule = o.schedule(1024);
    let spec = json!({"k": k, "sigma": 0.5f64.sqrt(), "probes": o.probes, "widths": schedule});
    let mut r = demo_report("semicircle", spec);
    r.rows = study_rows(&b, &q, &schedule, o, e, &|i| goe_moment(i + 1))?;
    let (_, det) = theory_values(&b.sk, &b.cdc, &b.spec, &q, e)?;
    for row in r.rows.iter_mut() {
        let i = q.iter().position(|(n, _)| *n == row.quantity).unwrap_or(0);
        row.detransposed = Some(det[i]);
    }
    let worst = det.iter().enumerate().map(|(i, v)| (v - goe_moment(i + 1)).abs()).fold(0.0, f64::max);
    r.diagnostics.push(format!("recursion vs detransposed program limit: max abs difference {worst:.3e}"));
    let cat = (1..=k).all(|j| goe_moment(j) == if j % 2 == 1 { 0.0 } else { catalan(j / 2) as f64 });
    r.diagnostics.push(format!("even moments are Catalan numbers: {cat}"));
    Ok(r)
}

pub fn marchenko_pastur(o: &DemoOpts, e: &Engine) -> Result<Report> {
    check_probes(o)?;
    let k = o.k.unwrap_or(6);
    let schedule = o.schedule(1024);
    let spec = json!({"k": k, "alpha": o.alpha, "probes": o.probes, "widths": schedule});
    let mut r = demo_report("marchenko-pastur", spec);
    let mut worst: f64 = 0.0;
    for &alpha in &o.alpha {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(TpError::InvalidSpec(format!("aspect ratio {alpha} must be positive")));
        }
        let b = load_text(&mp_program(k, alpha, o.probes))?;
        let q: Vec<(String, ExprDag)> = (1..=k)
            .map(|j| Ok((format!("alpha={alpha} k={j}"), expr(&b.sk, &probe_moment_text(j, o.probes))?)))
            .collect::<Result<_>>()?;
        let mut rows = study_rows(&b, &q, &schedule, o, e, &|i| mp_moment(i + 1, alpha))?;
        let (_, det) = theory_values(&b.sk, &b.cdc, &b.spec, &q, e)?;
        for row in rows.iter_mut() {
            let i = q.iter().position(|(n, _)| *n == row.quantity).unwrap_or(0);
            row.detransposed = Some(det[i]);
        }
        for j in 1..=k {
            worst = worst.max((mp_moment(j, alpha) - mp_closed_form(j, alpha)).abs());
        }
        r.rows.extend(rows);
    }
    r.diagnostics.push(format!("recurrence vs closed form: max abs difference {worst:.3e}"));
    Ok(r)
}

fn kernel_arch(variant: Variant, depth: usize, act: &str, d: usize) -> ArchSpec {
    ArchSpec::new(variant, depth, act, 1.3, 0.2, demo_inputs(d))
}

pub fn mlp_gp(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let a = kernel_arch(Variant::Mlp, 3, &o.act("tanh"), 4);
    let b = build_program(&a)?;
    let l = a.depth;
    let s2 = a.sigma_w[l].powi(2);
    let ps = pairs(a.inputs.len());
    let q: Vec<(String, ExprDag)> = ps
        .iter()
        .map(|(i, j)| Ok((format!("K[{i},{j}]"), ExprDag::lin(&[s2], &[&expr(&b.sk, &format!("x{l}_{i} * x{l}_{j}"))?]))))
        .collect::<Result<_>>()?;
    let sigma = mlp_sigma(&a, e)?;
    let out = &sigma[l];
    let closed = |i: usize| out[ps[i]];
    let schedule = o.schedule(1024);
    let mut r = demo_report("mlp-gp", json!({"arch": a, "widths": schedule}));
    r.rows = study_rows(&b, &q, &schedule, o, e, &closed)?;
    r.diagnostics.push(cross_check(&b, &q, &closed, e)?);
    Ok(r)
}

fn ntk_rows(name: &str, width: usize, draws: &[KernelMatrix], theory: &KernelMatrix) -> Vec<Row> {
    pairs(theory.nrows())
        .into_iter()
        .map(|(i, j)| {
            let xs: Vec<f64> = draws.iter().map(|m| m[(i, j)]).collect();
            Row::sampled(format!("{name}[{i},{j}]"), width, &xs, Some(theory[(i, j)]))
        })
        .collect()
}

fn psd_note(m: &KernelMatrix) -> String {
    let sym = (m - m.transpose()).amax();
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    format!("theory kernel: asymmetry {sym:.1e}, smallest eigenvalue {min:.6}")
}

pub fn mlp_ntk_demo(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let a = kernel_arch(Variant::Mlp, 2, &o.act("tanh"), 4);
    let theory = mlp_ntk(&a, e)?;
    let mut r = demo_report("mlp-ntk", json!({"arch": a, "draws": o.study.trials}));
    for n in o.schedule(1024) {
        let draws = empirical_ntk(&a, n, Readout::Gaussian, o.study.trials, o.study.seed, o.study.workers)?;
        r.rows.extend(ntk_rows("NTK", n, &draws, &theory));
    }
    r.diagnostics.push(psd_note(&theory));
    Ok(r)
}

pub fn ntk_gmp(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let a = kernel_arch(Variant::Mlp, 3, &o.act("relu"), 4);
    let theory = mlp_ntk_gmp(&a, e)?;
    let naive = gmp_ntk_from(&a, &gmp_terms(&a, e, true)?, e)?;
    let mut r = demo_report("ntk-gmp", json!({"arch": a, "draws": o.study.trials, "normalization": "n^L"}));
    for n in o.schedule(1024) {
        let draws = empirical_ntk(&a, n, Readout::MeanPool, o.study.trials, o.study.seed, o.study.workers)?;
        let mut rows = ntk_rows("NTK", n, &draws, &theory);
        for (row, (i, j)) in rows.iter_mut().zip(pairs(a.inputs.len())) {
            row.naive = Some(naive[(i, j)]);
        }
        r.rows.extend(rows);
    }
    r.diagnostics.push(psd_note(&theory));
    Ok(r)
}

pub fn cnn(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let a = kernel_arch(Variant::Cnn1dCircular, 2, &o.act("relu"), 2 * CNN_PIXELS);
    let theory = cnn_ntk(&a, e)?;
    let mut r = demo_report("cnn", json!({"arch": a, "draws": o.study.trials, "pixels": CNN_PIXELS}));
    for n in o.schedule(256) {
        let draws = empirical_ntk(&a, n, Readout::Gaussian, o.study.trials, o.study.seed, o.study.workers)?;
        r.rows.extend(ntk_rows("NTK", n, &draws, &theory));
    }
    r.diagnostics.push(psd_note(&theory));
    Ok(r)
}

pub fn signal(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let act = o.act("tanh");
    let depth = 3;
    let (a, with_pi) = match o.arch.as_str() {
        "mlp" => (kernel_arch(Variant::MlpBackward, depth, &act, 4), true),
        "resnet" => {
            let mut a = kernel_arch(Variant::Resnet, depth, &act, 4);
            a.sigma_w = vec![1.0; depth + 1];
            a.sigma_v = 0.5;
            a.sigma_a = 0.1;
            (a, false)
        }
        "cnn" => (kernel_arch(Variant::Cnn1dCircular, depth, &act, 2 * CNN_PIXELS), false),
        "batchnorm" => (kernel_arch(Variant::BatchnormForward, depth, &act, 4), false),
        other => return Err(TpError::InvalidSpec(format!("unknown architecture '{other}'"))),
    };
    let sp = signal_prop(&a, e, with_pi)?;
    let b = build_program(&a)?;
    let k = a.inputs.len();
    let mut q = vec![];
    let mut theory = vec![];
    for l in 1..=depth {
        for (i, j) in pairs(k) {
            if a.variant == Variant::Cnn1dCircular {
                for (p, pp) in [(0, 0), (0, 1)] {
                    q.push((format!("Sigma{l}[{i}:{p},{j}:{pp}]"), expr(&b.sk, &format!("g{l}_{i}_{p} * g{l}_{j}_{pp}"))?));
                    theory.push(sp.sigma[l - 1][(p * k + i, pp * k + j)]);
                }
                continue;
            }
            q.push((format!("Sigma{l}[{i},{j}]"), expr(&b.sk, &format!("g{l}_{i} * g{l}_{j}"))?));
            theory.push(sp.sigma[l - 1][(i, j)]);
            if a.variant == Variant::Resnet {
                q.push((format!("SigmaTilde{l}[{i},{j}]"), expr(&b.sk, &format!("x{l}_{i} * x{l}_{j}"))?));
                theory.push(sp.sigma_tilde[l][(i, j)]);
            }
        }
    }
    if let Some(pi) = &sp.pi {
        for l in 1..=depth {
            for (i, j) in pairs(k) {
                let text = if l == depth { "v * v".to_string() } else { format!("u{l}_{i} * u{l}_{j}") };
                q.push((format!("Pi{l}[{i},{j}]"), expr(&b.sk, &text)?));
                theory.push(pi[l - 1][(i, j)]);
            }
        }
    }
    let schedule = o.schedule(1024);
    let mut r = demo_report("signal-prop", json!({"arch": a, "widths": schedule}));
    r.rows = study_rows(&b, &q, &schedule, o, e, &|i| theory[i])?;
    r.diagnostics.push(cross_check(&b, &q, &|i| theory[i], e)?);
    Ok(r)
}

pub fn rnn(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let steps = o.k.unwrap_or(3);
    let mut a = kernel_arch(Variant::SimpleRnn, steps, &o.act("tanh"), 4);
    a.sigma_w = vec![1.0; steps + 1];
    a.sigma_w[1] = 1.2;
    a.sigma_a = 0.3;
    let b = build_program(&a)?;
    let mut q = vec![];
    for t in 1..=steps {
        for (i, j) in pairs(a.inputs.len()) {
            q.push((format!("Sigma{t}[{i},{j}]"), expr(&b.sk, &format!("g{t}_{i} * g{t}_{j}"))?));
        }
    }
    if steps > 1 {
        q.push((format!("C[1,{steps}]"), expr(&b.sk, &format!("x1_0 * x{steps}_0"))?));
    }
    let (_, theory) = theory_values(&b.sk, &b.cdc, &b.spec, &q, e)?;
    let schedule = o.schedule(1024);
    let mut r = demo_report("rnn", json!({"arch": a, "widths": schedule}));
    r.rows = study_rows(&b, &q, &schedule, o, e, &|i| theory[i])?;
    Ok(r)
}

pub fn amp(o: &DemoOpts, e: &Engine) -> Result<Report> {
    let mut cfg = AmpConfig { seed: o.study.seed, ..AmpConfig::soft_threshold(1.0) };
    if let Some(n) = o.n {
        cfg.n_big = n;
    }
    if let Some(k) = o.k {
        cfg.steps = k;
    }
    if o.study.trials < 2 {
        return Err(TpError::InvalidSpec("at least two trials are needed".into()));
    }
    let (se, runs) = amp_trials(&cfg, o.study.trials, o.study.workers, e)?;
    let spec = json!({
        "delta": cfg.delta,
        "sigma_x0_sq": cfg.sigma_x0_sq,
        "sigma_w_sq": cfg.sigma_w_sq,
        "f": "soft_threshold(1)(h + x0) - x0",
        "g": "b + w",
        "steps": cfg.steps,
        "N": cfg.n_big,
        "n": cfg.n_small(),
        "trials": o.study.trials,
    });
    let mut r = demo_report("amp", spec);
    for t in 0..cfg.steps {
        let h: Vec<f64> = runs.iter().map(|x| x.h_sq[t]).collect();
        r.rows.push(Row::sampled(format!("h_sq[{}]", t + 1), cfg.n_big, &h, Some(se.tau2[t])));
        let b: Vec<f64> = runs.iter().map(|x| x.b_sq[t]).collect();
        r.rows.push(Row::sampled(format!("b_sq[{t}]"), cfg.n_small(), &b, Some(se.sigma2[t])));
    }
    Ok(r)
}
