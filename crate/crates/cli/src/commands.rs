use std::path::Path;

use serde_json::{json, Value};
use tp_core::cdc::{compute_cdc, validate, CdcPartition};
use tp_core::detranspose::{detranspose, detranspose_derivative, image_moment, DetransposeResult};
use tp_core::dsl::{parse_program, render_program, ProgramText};
use tp_core::expr::{expand_leaves, parse_expr, ExprDag};
use tp_core::gaussian::Engine;
use tp_core::limits::{compute_limits_backprop, compute_limits_naive, compute_limits_no_transpose, limit_moment, LimitTable};
use tp_core::program::{Line, Skeleton};
use tp_core::simulate::{convergence_study, StudyOptions, TheoryRoute};
use tp_core::spec::SamplingSpec;
use tp_core::{Result, TpError};

use crate::report::{Report, Row};

pub struct Loaded {
    pub path: String,
    pub prog: ProgramText,
    pub cdc: CdcPartition,
    pub spec: SamplingSpec,
}

impl Loaded {
    pub fn sk(&self) -> &Skeleton {
        &self.prog.skeleton
    }

    fn program_json(&self) -> Value {
        json!({
            "path": self.path,
            "lines": self.sk().len(),
            "classes": self.cdc.named_blocks(self.sk()),
        })
    }

    pub fn report(&self) -> Report {
        Report::new(self.program_json(), self.spec.to_json(self.sk()))
    }

    /// Declared observables, or the second moment of every computed G-var.
    pub fn quantities(&self) -> Vec<(String, ExprDag)> {
        if !self.prog.observables.is_empty() {
            return self.prog.observables.clone();
        }
        let sk = self.sk();
        sk.vars()
            .filter(|v| v.is_g() && !sk.is_input(*v))
            .map(|v| {
                let l = ExprDag::leaf(v);
                (format!("{}^2", sk.name(v)), ExprDag::prod(&[&l, &l]))
            })
            .collect()
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| TpError::Io(format!("{}: {e}", path.display())))?;
    let prog = parse_program(&text)?;
    let diags = validate(&prog.skeleton, &prog.constraints);
    if !diags.is_empty() {
        return Err(TpError::Validation(diags));
    }
    let cdc = compute_cdc(&prog.skeleton, &prog.constraints)?;
    let spec = SamplingSpec::from_directives(&prog.skeleton, &cdc, &prog.directives)?;
    Ok(Loaded { path: path.display().to_string(), prog, cdc, spec })
}

pub fn expr(sk: &Skeleton, s: &str) -> Result<ExprDag> {
    let names = sk.name_map();
    parse_expr(s, &|n| names.get(n).copied())
}

pub fn check(l: &Loaded) -> String {
    let sk = l.sk();
    let mut s = format!("ok: {}\nlines: {} ({:?} syntax)\nclasses: {}\n", l.path, sk.len(), sk.syntax, l.cdc.n_classes);
    for (c, names) in l.cdc.named_blocks(sk).iter().enumerate() {
        let width = l.spec.widths.get(&c).map(|w| format!(" width {w}")).unwrap_or_default();
        s += &format!("  c{c} (scale {}{width}): {}\n", l.spec.scale_of(c), names.join(", "));
    }
    let mats: Vec<String> = sk
        .vars()
        .filter(|v| matches!(sk.line(*v), Line::MatIn { .. }))
        .map(|a| {
            let (r, c) = l.cdc.sides(a);
            let side = |x: Option<usize>| x.map(|c| format!("c{c}")).unwrap_or_else(|| "?".into());
            format!("  {}: {} x {} (sigma {})", sk.name(a), side(r), side(c), l.spec.sigma_of(sk, a))
        })
        .collect();
    if !mats.is_empty() {
        s += &format!("matrices:\n{}\n", mats.join("\n"));
    }
    let obs: Vec<&str> = l.prog.observables.iter().map(|(n, _)| n.as_str()).collect();
    if !obs.is_empty() {
        s += &format!("observables: {}\n", obs.join(", "));
    }
    if sk.has_transpose() {
        s += "transposes: yes\n";
    }
    s
}

pub fn cdc(l: &Loaded) -> Report {
    let sk = l.sk();
    let mut r = l.report();
    let classes: Vec<Value> = l
        .cdc
        .named_blocks(sk)
        .into_iter()
        .enumerate()
        .map(|(c, vars)| json!({"class": c, "vars": vars, "scale": l.spec.scale_of(c), "width": l.spec.widths.get(&c)}))
        .collect();
    let mats: serde_json::Map<String, Value> = sk
        .vars()
        .filter(|v| v.is_a())
        .map(|a| {
            let (rows, cols) = l.cdc.sides(a);
            (sk.name(a).to_string(), json!({"rows": rows, "cols": cols}))
        })
        .collect();
    r.extra.insert("cdc".into(), json!({"classes": classes, "matrices": mats}));
    r
}

fn table_rows(l: &Loaded, t: &LimitTable, engine: &Engine) -> Result<Vec<Row>> {
    let sk = l.sk();
    l.quantities()
        .iter()
        .map(|(name, phi)| {
            let class = l.cdc.common_class(sk, &phi.leaves())?;
            Ok(Row::theory(name.clone(), limit_moment(t, class, &expand_leaves(sk, phi)?, engine)?))
        })
        .collect()
}

/// The forward prefix: every line before the first transpose.
fn forward_prefix(sk: &Skeleton) -> Skeleton {
    let first = sk.vars().find(|v| matches!(sk.line(*v), Line::Transpose { .. }));
    let end = first.map(|v| v.line - 1).unwrap_or(sk.len());
    Skeleton { syntax: sk.syntax, lines: sk.lines[..end].to_vec() }
}

pub fn limit(l: &Loaded, engine: &Engine) -> Result<Report> {
    let sk = l.sk();
    let (route, table) = if sk.has_transpose() {
        let t = compute_limits_backprop(&forward_prefix(sk), sk, &l.cdc, &l.spec, engine).map_err(|e| match e {
            TpError::Validation(mut d) => {
                d.push("the gradient-independent route does not apply; use `tp detranspose`".into());
                TpError::Validation(d)
            }
            e => e,
        })?;
        (TheoryRoute::GradientIndependent, t)
    } else {
        (TheoryRoute::NoTranspose, compute_limits_no_transpose(sk, &l.cdc, &l.spec, engine)?)
    };
    let mut r = l.report();
    r.rows = table_rows(l, &table, engine)?;
    r.diagnostics = table.rank.warnings();
    r.diagnostics.extend(table.psd_violations());
    r.extra.insert("route".into(), json!(route));
    r.extra.insert("limits".into(), table.to_json(sk));
    Ok(r)
}

fn image_rows(l: &Loaded, d: &DetransposeResult, engine: &Engine) -> Result<Vec<f64>> {
    let sk = l.sk();
    l.quantities()
        .iter()
        .map(|(_, phi)| image_moment(d, l.cdc.common_class(sk, &phi.leaves())?, phi, engine))
        .collect()
}

pub fn detransposed(l: &Loaded, derivative: bool, engine: &Engine) -> Result<Report> {
    let sk = l.sk();
    let d = if derivative {
        detranspose_derivative(sk, &l.cdc, &l.spec, engine)?
    } else {
        detranspose(sk, &l.cdc, &l.spec, engine)?
    };
    let mut r = l.report();
    let vals = image_rows(l, &d, engine)?;
    r.rows = l.quantities().into_iter().zip(vals).map(|((n, _), v)| Row::theory(n, v)).collect();
    r.diagnostics = d.limits.rank.warnings();
    r.diagnostics.extend(d.limits.psd_violations());
    let phi: serde_json::Map<String, Value> = d.phi_names(sk).into_iter().map(|(a, b)| (a, json!(b))).collect();
    r.extra.insert("rule".into(), json!(if derivative { "derivative" } else { "projection" }));
    r.extra.insert("check_program".into(), json!(render_program(&d.check_sk, &vec![])));
    r.extra.insert("check_spec".into(), d.check_spec.to_json(&d.check_sk));
    r.extra.insert("coefficients".into(), d.coeffs_json(sk));
    r.extra.insert("phi".into(), Value::Object(phi));
    r.extra.insert("limits".into(), d.limits.to_json(&d.check_sk));
    Ok(r)
}

pub fn simulate(l: &Loaded, widths: &[usize], opts: &StudyOptions, engine: &Engine) -> Result<Report> {
    let q = l.quantities();
    let s = convergence_study(l.sk(), &l.cdc, &l.spec, &q, widths, opts, engine)?;
    let mut r = l.report();
    r.rows = s.rows.iter().map(|x| Row::measured(x.quantity.clone(), x.width, x.empirical, x.stderr, x.theory)).collect();
    r.extra.insert("route".into(), json!(s.route));
    r.extra.insert("trials".into(), json!(s.trials));
    r.extra.insert("seeds".into(), json!(s.seeds));
    Ok(r)
}

/// Empirical values next to the naive gradient-independent limit and the
/// detransposed limit.
pub fn compare(l: &Loaded, widths: &[usize], opts: &StudyOptions, engine: &Engine) -> Result<Report> {
    let sk = l.sk();
    let q = l.quantities();
    let opts = StudyOptions { no_theory: true, ..opts.clone() };
    let s = convergence_study(sk, &l.cdc, &l.spec, &q, widths, &opts, engine)?;
    let naive_table = if sk.has_transpose() {
        compute_limits_naive(sk, &l.cdc, &l.spec, engine)?
    } else {
        compute_limits_no_transpose(sk, &l.cdc, &l.spec, engine)?
    };
    let naive: Vec<Option<f64>> = table_rows(l, &naive_table, engine)?.into_iter().map(|r| r.theory).collect();
    let d = detranspose(sk, &l.cdc, &l.spec, engine)?;
    let general = image_rows(l, &d, engine)?;
    let mut r = l.report();
    for x in &s.rows {
        let i = q.iter().position(|(n, _)| *n == x.quantity).unwrap_or(0);
        let mut row = Row::measured(x.quantity.clone(), x.width, x.empirical, x.stderr, Some(general[i]));
        row.naive = naive[i];
        row.detransposed = Some(general[i]);
        r.rows.push(row);
    }
    for (i, (name, _)) in q.iter().enumerate() {
        if let Some(n) = naive[i] {
            if (n - general[i]).abs() > 1e-8 * (1.0 + general[i].abs()) {
                r.diagnostics.push(format!("{name}: naive limit {n} differs from the detransposed limit {}", general[i]));
            }
        }
    }
    r.extra.insert("trials".into(), json!(s.trials));
    r.extra.insert("seeds".into(), json!(s.seeds));
    Ok(r)
}
