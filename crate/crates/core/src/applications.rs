//! Builders for standard architectures and their closed-form limits: GP kernels,
//! NTK, signal propagation, random matrix moments and AMP.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cdc::{compute_cdc, CdcPartition};
use crate::error::{unsupported, Result, TpError};
use crate::expr::ExprDag;
use crate::gaussian::{unary_template, DerivRoute, Engine, GaussianSpec};
use crate::nonlin::{Base, Func, Unary, UnaryDeriv};
use crate::program::{DimConstraints, Kind, Skeleton, SkeletonBuilder, Syntax, VarId};
use crate::seeds;
use crate::simulate::{run_trials, trial_seed};
use crate::spec::SamplingSpec;

pub type KernelMatrix = DMatrix<f64>;

pub const CNN_PIXELS: usize = 3;
pub const CNN_KERNEL: [usize; 2] = [0, 1];
/// Per-offset variance weights `v_beta`.
pub const CNN_V: [f64; 2] = [0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mlp,
    MlpBackward,
    /// Backward pass of an MLP with a global mean pooling readout.
    MlpGmp,
    Resnet,
    SimpleRnn,
    BatchnormForward,
    Cnn1dCircular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Gaussian,
    MeanPool,
}

/// An architecture over a finite set of inputs.
///
/// `sigma_w` has `depth + 1` entries, the last for the readout; `sigma_b` has
/// `depth`. For the simple RNN, `sigma_w[0]` is the input map, `sigma_w[1]` the
/// tied recurrent weights, `sigma_b[0]` the recurrent bias and `sigma_a` the input
/// bias. For the resnet, `sigma_v` and `sigma_a` are the residual branch weight and
/// bias. CNN inputs are pixel-major images of [`CNN_PIXELS`] pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    pub depth: usize,
    /// Width of each hidden layer relative to the first.
    pub ratios: Vec<f64>,
    pub activation: String,
    pub sigma_w: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub inputs: Vec<Vec<f64>>,
}

impl ArchSpec {
    pub fn new(variant: Variant, depth: usize, activation: &str, sigma_w: f64, sigma_b: f64, inputs: Vec<Vec<f64>>) -> Self {
        ArchSpec {
            variant,
            depth,
            ratios: vec![1.0; depth],
            activation: activation.to_string(),
            sigma_w: vec![sigma_w; depth + 1],
            sigma_b: vec![sigma_b; depth],
            sigma_v: 1.0,
            sigma_a: 0.0,
            inputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TpError::InvalidSpec(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.inputs.is_empty() {
            return bad("at least one input is required".into());
        }
        let d = self.inputs[0].len();
        if d == 0 || self.inputs.iter().any(|x| x.len() != d) {
            return bad("inputs must be non-empty and of equal length".into());
        }
        if self.inputs.iter().flatten().any(|x| !x.is_finite()) {
            return bad("inputs must be finite".into());
        }
        if self.sigma_w.len() != self.depth + 1 || self.sigma_b.len() != self.depth || self.ratios.len() != self.depth {
            return bad(format!(
                "expected {} weight scales, {} bias scales and {} width ratios",
                self.depth + 1,
                self.depth,
                self.depth
            ));
        }
        let scales = self.sigma_w.iter().chain(&self.sigma_b).chain([&self.sigma_v, &self.sigma_a]);
        if scales.into_iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("scales must be finite and non-negative".into());
        }
        if self.ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return bad("width ratios must be positive".into());
        }
        let uniform = self.ratios.iter().all(|r| *r == self.ratios[0]);
        let mlp = matches!(self.variant, Variant::Mlp | Variant::MlpBackward | Variant::MlpGmp);
        if !mlp && !uniform {
            return bad(format!("{:?} requires uniform widths", self.variant));
        }
        if self.variant == Variant::Cnn1dCircular && d % CNN_PIXELS != 0 {
            return bad(format!("CNN inputs must have a multiple of {CNN_PIXELS} entries"));
        }
        if self.variant == Variant::BatchnormForward && self.inputs.len() < 2 {
            return bad("batchnorm needs a batch of at least two inputs".into());
        }
        self.phi()?;
        Ok(())
    }

    pub fn phi(&self) -> Result<Unary> {
        match Func::unary(&self.activation)? {
            Func::Unary(u) => Ok(u),
            _ => unsupported(format!("'{}' is not a coordinatewise activation", self.activation)),
        }
    }

    /// `n^l / n^m` for hidden layers `l, m` in `1..=depth`.
    pub fn alpha(&self, l: usize, m: usize) -> f64 {
        self.ratios[l - 1] / self.ratios[m - 1]
    }

    /// `x_a . x_b / n0` over the inputs.
    pub fn input_gram(&self) -> KernelMatrix {
        let k = self.inputs.len();
        let n0 = self.inputs[0].len() as f64;
        DMatrix::from_fn(k, k, |i, j| dot(&self.inputs[i], &self.inputs[j]) / n0)
    }

    fn channels(&self) -> usize {
        self.inputs[0].len() / CNN_PIXELS
    }

    fn pixel(&self, a: usize, p: usize) -> &[f64] {
        let c = self.channels();
        &self.inputs[a][p * c..(p + 1) * c]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A built program with its classes and sampling law.
#[derive(Clone, Debug)]
pub struct Built {
    pub sk: Skeleton,
    pub constraints: DimConstraints,
    pub cdc: CdcPartition,
    pub spec: SamplingSpec,
}

impl Built {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.sk.find(name).ok_or_else(|| TpError::Validation(vec![format!("no line named '{name}'")]))
    }
}

struct Draft {
    b: SkeletonBuilder,
    sigma: Vec<(VarId, f64)>,
    cov: Vec<(VarId, VarId, f64)>,
    mean: Vec<(VarId, f64)>,
    /// (variable, width ratio) to pin class scales.
    scales: Vec<(VarId, f64)>,
}

impl Draft {
    fn new() -> Self {
        Draft { b: SkeletonBuilder::new(Syntax::Original), sigma: vec![], cov: vec![], mean: vec![], scales: vec![] }
    }

    fn vec_in(&mut self, name: &str, hint: &str) -> Result<VarId> {
        self.b.vec_in(Some(name), Some(hint))
    }

    fn mat_in(&mut self, name: &str, rows: &str, cols: &str, sigma: f64) -> Result<VarId> {
        let a = self.b.mat_in(Some(name), Some(rows), Some(cols))?;
        self.sigma.push((a, sigma));
        Ok(a)
    }

    /// Independent zero-mean inputs with the given Gram matrix.
    fn set_block(&mut self, vars: &[VarId], k: impl Fn(usize, usize) -> f64) {
        for i in 0..vars.len() {
            for j in i..vars.len() {
                self.cov.push((vars[i], vars[j], k(i, j)));
            }
        }
    }

    fn finish(self) -> Result<Built> {
        let sk = self.b.finish();
        let constraints = vec![];
        let cdc = compute_cdc(&sk, &constraints)?;
        let mut spec = SamplingSpec::new();
        for (a, s) in self.sigma {
            spec.set_sigma(a, s);
        }
        for (a, b, c) in self.cov {
            spec.set_cov(a, b, c);
        }
        for (v, m) in self.mean {
            spec.set_mean(v, m);
        }
        for (v, r) in self.scales {
            if let Some(c) = cdc.class(v) {
                spec.scale.insert(c, r);
            }
        }
        spec.validate(&sk, &cdc)?;
        Ok(Built { sk, constraints, cdc, spec })
    }
}

/// Emit the tensor program of an architecture.
pub fn build_program(a: &ArchSpec) -> Result<Built> {
    a.validate()?;
    match a.variant {
        Variant::Mlp => build_mlp(a, None),
        Variant::MlpBackward => build_mlp(a, Some(Readout::Gaussian)),
        Variant::MlpGmp => build_mlp(a, Some(Readout::MeanPool)),
        Variant::Resnet => build_resnet(a),
        Variant::SimpleRnn => build_rnn(a),
        Variant::BatchnormForward => build_batchnorm(a),
        Variant::Cnn1dCircular => build_cnn(a),
    }
}

fn build_mlp(a: &ArchSpec, readout: Option<Readout>) -> Result<Built> {
    let phi = Func::Unary(a.phi()?);
    let k = a.inputs.len();
    let gram = a.input_gram();
    let mut d = Draft::new();
    let wx = (0..k).map(|i| d.vec_in(&format!("w1x{i}"), "n1")).collect::<Result<Vec<_>>>()?;
    let s1 = a.sigma_w[0].powi(2);
    d.set_block(&wx, |i, j| s1 * gram[(i, j)]);
    let b1 = d.vec_in("b1", "n1")?;
    d.cov.push((b1, b1, a.sigma_b[0].powi(2)));
    d.scales.push((b1, a.ratios[0]));
    let mut acts = vec![];
    for i in 0..k {
        d.b.lincomb(Some(&format!("g1_{i}")), &[(1.0, wx[i]), (1.0, b1)])?;
        let g = d.b.skeleton().find(&format!("g1_{i}")).unwrap();
        acts.push(d.b.apply(Some(&format!("x1_{i}")), phi.clone(), &[g])?);
    }
    for l in 2..=a.depth {
        let w = d.mat_in(&format!("W{l}"), &format!("n{l}"), &format!("n{}", l - 1), a.sigma_w[l - 1])?;
        let bl = d.vec_in(&format!("b{l}"), &format!("n{l}"))?;
        d.cov.push((bl, bl, a.sigma_b[l - 1].powi(2)));
        d.scales.push((bl, a.ratios[l - 1]));
        for (i, act) in acts.iter_mut().enumerate() {
            let m = d.b.matmul(Some(&format!("m{l}_{i}")), w, *act)?;
            let g = d.b.lincomb(Some(&format!("g{l}_{i}")), &[(1.0, m), (1.0, bl)])?;
            *act = d.b.apply(Some(&format!("x{l}_{i}")), phi.clone(), &[g])?;
        }
    }
    if let Some(r) = readout {
        let l = a.depth;
        let scaled = scaled_derivative(a)?;
        let v = match r {
            Readout::Gaussian => {
                let v = d.vec_in("v", &format!("n{l}"))?;
                d.cov.push((v, v, a.sigma_w[l].powi(2)));
                v
            }
            Readout::MeanPool => {
                let v = d.vec_in("one", &format!("n{l}"))?;
                d.cov.push((v, v, 0.0));
                d.mean.push((v, 1.0));
                v
            }
        };
        let find = |d: &Draft, n: String| d.b.skeleton().find(&n).unwrap();
        let mut grads = vec![];
        for i in 0..k {
            let g = find(&d, format!("g{l}_{i}"));
            grads.push(d.b.apply(Some(&format!("d{l}_{i}")), scaled.clone(), &[g, v])?);
        }
        for l in (2..=a.depth).rev() {
            let w = find(&d, format!("W{l}"));
            let wt = d.b.transpose(Some(&format!("W{l}T")), w)?;
            for (i, gr) in grads.iter_mut().enumerate() {
                let u = d.b.matmul(Some(&format!("u{}_{i}", l - 1)), wt, *gr)?;
                let g = find(&d, format!("g{}_{i}", l - 1));
                *gr = d.b.apply(Some(&format!("d{}_{i}", l - 1)), scaled.clone(), &[g, u])?;
            }
        }
    }
    d.finish()
}

fn scaled_derivative(a: &ArchSpec) -> Result<Func> {
    let u = a.phi()?;
    match u.derivative() {
        UnaryDeriv::Fn(du) => Ok(Func::Scale(du)),
        _ => unsupported(format!("backward programs need a pointwise derivative of '{}'", a.activation)),
    }
}

fn build_resnet(a: &ArchSpec) -> Result<Built> {
    let phi = Func::Unary(a.phi()?);
    let k = a.inputs.len();
    let gram = a.input_gram();
    let mut d = Draft::new();
    let mut xs = (0..k).map(|i| d.vec_in(&format!("x0_{i}"), "n")).collect::<Result<Vec<_>>>()?;
    d.set_block(&xs, |i, j| gram[(i, j)]);
    for l in 1..=a.depth {
        let w = d.mat_in(&format!("W{l}"), "n", "n", a.sigma_w[l - 1])?;
        let b = d.vec_in(&format!("b{l}"), "n")?;
        d.cov.push((b, b, a.sigma_b[l - 1].powi(2)));
        let v = d.mat_in(&format!("V{l}"), "n", "n", a.sigma_v)?;
        let al = d.vec_in(&format!("a{l}"), "n")?;
        d.cov.push((al, al, a.sigma_a.powi(2)));
        for (i, x) in xs.iter_mut().enumerate() {
            let m = d.b.matmul(Some(&format!("m{l}_{i}")), w, *x)?;
            let g = d.b.lincomb(Some(&format!("g{l}_{i}")), &[(1.0, m), (1.0, b)])?;
            let h = d.b.apply(Some(&format!("h{l}_{i}")), phi.clone(), &[g])?;
            let r = d.b.matmul(Some(&format!("r{l}_{i}")), v, h)?;
            *x = d.b.lincomb(Some(&format!("x{l}_{i}")), &[(1.0, *x), (1.0, r), (1.0, al)])?;
        }
    }
    d.finish()
}

fn build_rnn(a: &ArchSpec) -> Result<Built> {
    let phi = Func::Unary(a.phi()?);
    let k = a.inputs.len();
    let gram = a.input_gram();
    let mut d = Draft::new();
    let mut hs = (0..k).map(|i| d.vec_in(&format!("h0_{i}"), "n")).collect::<Result<Vec<_>>>()?;
    d.set_block(&hs, |_, _| 0.0);
    let b = d.vec_in("b", "n")?;
    d.cov.push((b, b, a.sigma_b[0].powi(2)));
    let w = d.mat_in("W", "n", "n", a.sigma_w[1])?;
    let (su, sa) = (a.sigma_w[0].powi(2), a.sigma_a.powi(2));
    let mut ux: Vec<(usize, usize, VarId)> = vec![];
    for t in 1..=a.depth {
        for (i, h) in hs.iter_mut().enumerate() {
            let u = d.vec_in(&format!("ux{t}_{i}"), "n")?;
            for &(t2, j, u2) in &ux {
                let c = if t == 1 && t2 == 1 { su * gram[(i, j)] + sa } else { sa };
                d.cov.push((u, u2, c));
            }
            let c = if t == 1 { su * gram[(i, i)] + sa } else { sa };
            d.cov.push((u, u, c));
            ux.push((t, i, u));
            let m = d.b.matmul(Some(&format!("m{t}_{i}")), w, *h)?;
            let g = d.b.lincomb(Some(&format!("g{t}_{i}")), &[(1.0, m), (1.0, b), (1.0, u)])?;
            *h = d.b.apply(Some(&format!("x{t}_{i}")), phi.clone(), &[g])?;
        }
    }
    d.finish()
}

fn build_batchnorm(a: &ArchSpec) -> Result<Built> {
    let inner = a.phi()?;
    let k = a.inputs.len();
    let gram = a.input_gram();
    let mut d = Draft::new();
    let wx = (0..k).map(|i| d.vec_in(&format!("w1x{i}"), "n")).collect::<Result<Vec<_>>>()?;
    let s1 = a.sigma_w[0].powi(2);
    d.set_block(&wx, |i, j| s1 * gram[(i, j)]);
    let b1 = d.vec_in("b1", "n")?;
    d.cov.push((b1, b1, a.sigma_b[0].powi(2)));
    let mut gs = vec![];
    for (i, x) in wx.iter().enumerate() {
        gs.push(d.b.lincomb(Some(&format!("g1_{i}")), &[(1.0, *x), (1.0, b1)])?);
    }
    let mut acts = bn_layer(&mut d, 1, inner, &gs)?;
    for l in 2..=a.depth {
        let w = d.mat_in(&format!("W{l}"), "n", "n", a.sigma_w[l - 1])?;
        let b = d.vec_in(&format!("b{l}"), "n")?;
        d.cov.push((b, b, a.sigma_b[l - 1].powi(2)));
        let mut gs = vec![];
        for (i, x) in acts.iter().enumerate() {
            let m = d.b.matmul(Some(&format!("m{l}_{i}")), w, *x)?;
            gs.push(d.b.lincomb(Some(&format!("g{l}_{i}")), &[(1.0, m), (1.0, b)])?);
        }
        acts = bn_layer(&mut d, l, inner, &gs)?;
    }
    d.finish()
}

fn bn_layer(d: &mut Draft, l: usize, inner: Unary, gs: &[VarId]) -> Result<Vec<VarId>> {
    (0..gs.len())
        .map(|i| d.b.apply(Some(&format!("x{l}_{i}")), Func::BatchNorm { inner, index: i }, gs))
        .collect()
}

fn build_cnn(a: &ArchSpec) -> Result<Built> {
    let phi = Func::Unary(a.phi()?);
    let k = a.inputs.len();
    let c = a.channels() as f64;
    let s = CNN_PIXELS;
    let mut d = Draft::new();
    // (beta, input, pixel) -> W^1_beta x_{input, pixel}
    let mut first = BTreeMap::new();
    for beta in CNN_KERNEL {
        let mut block = vec![];
        for i in 0..k {
            for p in 0..s {
                let v = d.vec_in(&format!("w1_{beta}x{i}_{p}"), "n1")?;
                first.insert((beta, i, p), v);
                block.push((i, p, v));
            }
        }
        let s1 = a.sigma_w[0].powi(2) * CNN_V[beta];
        for x in 0..block.len() {
            for y in x..block.len() {
                let ((i, p, u), (j, q, v)) = (block[x], block[y]);
                d.cov.push((u, v, s1 * dot(a.pixel(i, p), a.pixel(j, q)) / c));
            }
        }
    }
    let bias = |d: &mut Draft, l: usize| -> Result<Option<VarId>> {
        if a.sigma_b[l - 1] == 0.0 {
            return Ok(None);
        }
        let b = d.vec_in(&format!("b{l}"), &format!("n{l}"))?;
        d.cov.push((b, b, a.sigma_b[l - 1].powi(2)));
        Ok(Some(b))
    };
    let b1 = bias(&mut d, 1)?;
    let mut acts: Vec<Vec<VarId>> = vec![];
    for i in 0..k {
        let mut gs = vec![];
        for p in 0..s {
            let mut terms = vec![(1.0, first[&(0, i, p)]), (1.0, first[&(1, i, (p + 1) % s)])];
            terms.extend(b1.map(|b| (1.0, b)));
            gs.push(d.b.lincomb(Some(&format!("g1_{i}_{p}")), &terms)?);
        }
        let hs = (0..s)
            .map(|p| d.b.apply(Some(&format!("x1_{i}_{p}")), phi.clone(), &[gs[p]]))
            .collect::<Result<Vec<_>>>()?;
        acts.push(hs);
    }
    for l in 2..=a.depth {
        let (rows, cols) = (format!("n{l}"), format!("n{}", l - 1));
        let ws = CNN_KERNEL
            .iter()
            .map(|&beta| d.mat_in(&format!("W{l}_{beta}"), &rows, &cols, a.sigma_w[l - 1] * CNN_V[beta].sqrt()))
            .collect::<Result<Vec<_>>>()?;
        let bl = bias(&mut d, l)?;
        let mut prod = BTreeMap::new();
        for beta in CNN_KERNEL {
            for (i, hs) in acts.iter().enumerate() {
                for (p, h) in hs.iter().enumerate() {
                    prod.insert((beta, i, p), d.b.matmul(Some(&format!("m{l}_{beta}_{i}_{p}")), ws[beta], *h)?);
                }
            }
        }
        for (i, hs) in acts.iter_mut().enumerate() {
            let mut gs = vec![];
            for p in 0..s {
                let mut terms = vec![(1.0, prod[&(0, i, p)]), (1.0, prod[&(1, i, (p + 1) % s)])];
                terms.extend(bl.map(|b| (1.0, b)));
                gs.push(d.b.lincomb(Some(&format!("g{l}_{i}_{p}")), &terms)?);
            }
            for p in 0..s {
                hs[p] = d.b.apply(Some(&format!("x{l}_{i}_{p}")), phi.clone(), &[gs[p]])?;
            }
        }
    }
    d.finish()
}

fn template(f: Func) -> ExprDag {
    unary_template(&f)
}

/// `phi'` on the template leaf.
fn derivative_template(u: Unary) -> Result<ExprDag> {
    match u.derivative() {
        UnaryDeriv::Zero => Ok(ExprDag::constant(0.0)),
        UnaryDeriv::Const(c) => Ok(ExprDag::constant(c)),
        UnaryDeriv::Fn(d) => Ok(template(Func::Unary(d))),
        _ => unsupported(format!("'{}' has no pointwise derivative", u.name())),
    }
}

fn symmetrize(m: KernelMatrix) -> KernelMatrix {
    (&m + m.transpose()) * 0.5
}

fn v_pair(e: &Engine, f: &ExprDag, g: &ExprDag, s: &KernelMatrix) -> Result<KernelMatrix> {
    Ok(symmetrize(e.v_op_pair(f, g, s)?))
}

fn plus_const(m: KernelMatrix, c: f64) -> KernelMatrix {
    m.add_scalar(c)
}

fn require(a: &ArchSpec, ok: &[Variant], what: &str) -> Result<()> {
    a.validate()?;
    if !ok.contains(&a.variant) {
        return unsupported(format!("{what} is not available for {:?}", a.variant));
    }
    Ok(())
}

const MLP_FAMILY: [Variant; 3] = [Variant::Mlp, Variant::MlpBackward, Variant::MlpGmp];

/// `Sigma^1 .. Sigma^{L+1}` of an MLP.
pub fn mlp_sigma(a: &ArchSpec, e: &Engine) -> Result<Vec<KernelMatrix>> {
    require(a, &MLP_FAMILY, "the MLP kernel")?;
    let phi = template(Func::Unary(a.phi()?));
    let mut out = vec![plus_const(a.input_gram() * a.sigma_w[0].powi(2), a.sigma_b[0].powi(2))];
    for l in 2..=a.depth {
        let v = v_pair(e, &phi, &phi, out.last().unwrap())?;
        out.push(plus_const(v * a.sigma_w[l - 1].powi(2), a.sigma_b[l - 1].powi(2)));
    }
    let v = v_pair(e, &phi, &phi, out.last().unwrap())?;
    out.push(v * a.sigma_w[a.depth].powi(2));
    Ok(out)
}

/// Gradient covariances `Pi^1 .. Pi^L` with respect to layer outputs, for a
/// Gaussian readout, normalized by the last width.
pub fn mlp_pi(a: &ArchSpec, sigma: &[KernelMatrix], e: &Engine) -> Result<Vec<KernelMatrix>> {
    let l_max = a.depth;
    let dphi = derivative_template(a.phi()?)?;
    let k = a.inputs.len();
    let mut pi = vec![DMatrix::from_element(k, k, a.sigma_w[l_max].powi(2))];
    for l in (1..l_max).rev() {
        let vd = v_pair(e, &dphi, &dphi, &sigma[l])?;
        let next = vd.component_mul(&pi[0]) * (a.alpha(l + 1, l) * a.sigma_w[l].powi(2));
        pi.insert(0, next);
    }
    Ok(pi)
}

fn weight_factor(a: &ArchSpec, sigma: &KernelMatrix, l: usize) -> Result<KernelMatrix> {
    let s2 = a.sigma_w[l - 1].powi(2);
    if s2 == 0.0 {
        return Err(TpError::Numeric(format!("sigma_w of layer {l} is zero; the NTK formula divides by it")));
    }
    Ok(sigma.add_scalar(s2 - a.sigma_b[l - 1].powi(2)) / s2)
}

/// Limiting NTK of an MLP with a Gaussian readout.
pub fn mlp_ntk(a: &ArchSpec, e: &Engine) -> Result<KernelMatrix> {
    require(a, &MLP_FAMILY, "the MLP NTK")?;
    let sigma = mlp_sigma(a, e)?;
    let pi = mlp_pi(a, &sigma, e)?;
    let dphi = derivative_template(a.phi()?)?;
    let l_max = a.depth;
    let out_scale = a.sigma_w[l_max].powi(2);
    if out_scale == 0.0 {
        return Err(TpError::Numeric("readout scale is zero; the NTK formula divides by it".into()));
    }
    let mut ntk = &sigma[l_max] / out_scale;
    for l in 1..=l_max {
        let vd = v_pair(e, &dphi, &dphi, &sigma[l - 1])?;
        let term = pi[l - 1].component_mul(&vd).component_mul(&weight_factor(a, &sigma[l - 1], l)?);
        ntk += term * a.alpha(l, l_max);
    }
    Ok(symmetrize(ntk))
}

/// Backward quantities of an MLP with a global mean pooling readout.
#[derive(Clone, Debug, PartialEq)]
pub struct GmpTerms {
    pub sigma: Vec<KernelMatrix>,
    /// `Pi^1 .. Pi^L`, with `Pi^L = 1`.
    pub pi: Vec<KernelMatrix>,
    /// Correction coefficients `a^1 .. a^L`, with `a^L = 0`.
    pub a: Vec<DVector<f64>>,
}

fn one_dim(e: &Engine, f: &ExprDag, var: f64, derivative: bool) -> Result<f64> {
    let x = VarId::new(1, Kind::G);
    let gs = GaussianSpec::new(vec![x], DVector::zeros(1), DMatrix::from_element(1, 1, var))?;
    if derivative {
        e.derivative_expectation(f, &gs, x, DerivRoute::Direct)
    } else {
        e.mean(f, &gs)
    }
}

/// `Pi` and `a` recursions for the mean pooling readout. With `zero_a` the
/// correction coefficients are forced to zero.
pub fn gmp_terms(a: &ArchSpec, e: &Engine, zero_a: bool) -> Result<GmpTerms> {
    require(a, &MLP_FAMILY, "the mean pooling NTK")?;
    let sigma = mlp_sigma(a, e)?;
    let u = a.phi()?;
    let phi = template(Func::Unary(u));
    let dphi = derivative_template(u)?;
    let phi_dphi = ExprDag::prod(&[&phi, &dphi]);
    let k = a.inputs.len();
    let l_max = a.depth;
    let mut pi = vec![DMatrix::from_element(k, k, 1.0)];
    let mut coef = vec![DVector::zeros(k)];
    for l in (1..l_max).rev() {
        let s_next = &sigma[l];
        let scale = a.alpha(l + 1, l) * a.sigma_w[l].powi(2);
        let next_a: DVector<f64> = coef[0].clone();
        let vd = v_pair(e, &dphi, &dphi, s_next)?;
        let vpp = v_pair(e, &phi_dphi, &phi_dphi, s_next)?;
        let outer: DMatrix<f64> = &next_a * next_a.transpose();
        pi.insert(0, (pi[0].component_mul(&vd) + outer.component_mul(&vpp)) * scale);
        let mut al = DVector::zeros(k);
        if !zero_a {
            for i in 0..k {
                al[i] = if l + 1 == l_max {
                    scale * one_dim(e, &dphi, s_next[(i, i)], true)?
                } else {
                    next_a[i] * scale * one_dim(e, &phi_dphi, s_next[(i, i)], true)?
                };
            }
        }
        coef.insert(0, al);
    }
    Ok(GmpTerms { sigma, pi, a: coef })
}

/// Limit of `n^L` times the NTK of an MLP with a global mean pooling readout.
pub fn mlp_ntk_gmp(a: &ArchSpec, e: &Engine) -> Result<KernelMatrix> {
    gmp_ntk_from(a, &gmp_terms(a, e, false)?, e)
}

/// Mean pooling NTK assembled from given backward terms.
pub fn gmp_ntk_from(a: &ArchSpec, t: &GmpTerms, e: &Engine) -> Result<KernelMatrix> {
    let u = a.phi()?;
    let phi = template(Func::Unary(u));
    let dphi = derivative_template(u)?;
    let phi_dphi = ExprDag::prod(&[&phi, &dphi]);
    let k = a.inputs.len();
    let l_max = a.depth;
    let mut ntk = DMatrix::zeros(k, k);
    for l in 1..=l_max {
        let s = &t.sigma[l - 1];
        let vd = v_pair(e, &dphi, &dphi, s)?;
        let mut back = t.pi[l - 1].component_mul(&vd);
        if t.a[l - 1].iter().any(|x| *x != 0.0) {
            let outer = &t.a[l - 1] * t.a[l - 1].transpose();
            back += outer.component_mul(&v_pair(e, &phi_dphi, &phi_dphi, s)?);
        }
        ntk += back.component_mul(&weight_factor(a, s, l)?) * a.alpha(l, l_max);
    }
    Ok(symmetrize(ntk))
}

/// Forward and backward mean-field quantities.
///
/// `sigma` lists preactivation kernels layer by layer followed by the output
/// kernel. For the resnet, `sigma_tilde` lists the main-branch kernels from the
/// input on, and `pi` covers main-branch gradients from the input on. For the
/// other variants `pi[l - 1]` is the gradient covariance at the output of layer
/// `l`. CNN kernels are indexed by `pixel * inputs + input`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalProp {
    pub sigma: Vec<KernelMatrix>,
    pub sigma_tilde: Vec<KernelMatrix>,
    pub pi: Option<Vec<KernelMatrix>>,
}

pub fn signal_prop(a: &ArchSpec, e: &Engine, with_pi: bool) -> Result<SignalProp> {
    a.validate()?;
    match a.variant {
        Variant::Mlp | Variant::MlpBackward | Variant::MlpGmp => {
            let sigma = mlp_sigma(a, e)?;
            let pi = if with_pi { Some(mlp_pi(a, &sigma, e)?) } else { None };
            Ok(SignalProp { sigma, sigma_tilde: vec![], pi })
        }
        Variant::Resnet => resnet_prop(a, e, with_pi),
        Variant::Cnn1dCircular => {
            let sigma = cnn_sigma(a, e)?;
            let pi = if with_pi { Some(cnn_pi(a, &sigma, e)?) } else { None };
            Ok(SignalProp { sigma, sigma_tilde: vec![], pi })
        }
        Variant::BatchnormForward => {
            if with_pi {
                return unsupported(
                    "gradient covariances of batchnorm networks are not computed: the batchnorm map is singular at the origin",
                );
            }
            Ok(SignalProp { sigma: batchnorm_sigma(a, e)?, sigma_tilde: vec![], pi: None })
        }
        Variant::SimpleRnn => unsupported("signal propagation for the simple RNN follows the MLP variant"),
    }
}

fn resnet_prop(a: &ArchSpec, e: &Engine, with_pi: bool) -> Result<SignalProp> {
    let u = a.phi()?;
    let phi = template(Func::Unary(u));
    let mut tilde = vec![a.input_gram()];
    let mut sigma = vec![];
    for l in 1..=a.depth {
        let s = plus_const(tilde[l - 1].clone() * a.sigma_w[l - 1].powi(2), a.sigma_b[l - 1].powi(2));
        let v = v_pair(e, &phi, &phi, &s)?;
        tilde.push(plus_const(&tilde[l - 1] + v * a.sigma_v.powi(2), a.sigma_a.powi(2)));
        sigma.push(s);
    }
    sigma.push(&tilde[a.depth] * a.sigma_w[a.depth].powi(2));
    let pi = if with_pi {
        let dphi = derivative_template(u)?;
        let k = a.inputs.len();
        let mut pi = vec![DMatrix::from_element(k, k, a.sigma_w[a.depth].powi(2))];
        for l in (1..=a.depth).rev() {
            let vd = v_pair(e, &dphi, &dphi, &sigma[l - 1])?;
            let gain = (vd * (a.sigma_w[l - 1] * a.sigma_v).powi(2)).add_scalar(1.0);
            pi.insert(0, pi[0].component_mul(&gain));
        }
        Some(pi)
    } else {
        None
    };
    Ok(SignalProp { sigma, sigma_tilde: tilde, pi })
}

fn batchnorm_sigma(a: &ArchSpec, e: &Engine) -> Result<Vec<KernelMatrix>> {
    let inner = a.phi()?;
    let k = a.inputs.len();
    let leaves: Vec<VarId> = (1..=k).map(|i| VarId::new(i, Kind::G)).collect();
    let leaf_dags: Vec<ExprDag> = leaves.iter().map(|v| ExprDag::leaf(*v)).collect();
    let refs: Vec<&ExprDag> = leaf_dags.iter().collect();
    let bn: Vec<ExprDag> = (0..k).map(|i| ExprDag::apply(Func::BatchNorm { inner, index: i }, &refs)).collect();
    let v_bn = |s: &KernelMatrix| -> Result<KernelMatrix> {
        let gs = GaussianSpec::new(leaves.clone(), DVector::zeros(k), s.clone())?;
        let mut out = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let m = e.mean(&ExprDag::prod(&[&bn[i], &bn[j]]), &gs)?;
                out[(i, j)] = m;
                out[(j, i)] = m;
            }
        }
        Ok(out)
    };
    let mut out = vec![plus_const(a.input_gram() * a.sigma_w[0].powi(2), a.sigma_b[0].powi(2))];
    for l in 2..=a.depth {
        let v = v_bn(out.last().unwrap())?;
        out.push(plus_const(v * a.sigma_w[l - 1].powi(2), a.sigma_b[l - 1].powi(2)));
    }
    let v = v_bn(out.last().unwrap())?;
    out.push(v * a.sigma_w[a.depth].powi(2));
    Ok(out)
}

/// `M[(p + shift, a), (q + shift, b)]` with circular pixel indices.
fn shift(m: &KernelMatrix, k: usize, by: usize) -> KernelMatrix {
    let s = CNN_PIXELS;
    DMatrix::from_fn(s * k, s * k, |x, y| {
        let (p, i) = (x / k, x % k);
        let (q, j) = (y / k, y % k);
        m[(((p + by) % s) * k + i, ((q + by) % s) * k + j)]
    })
}

/// Shift by `-by`.
fn unshift(m: &KernelMatrix, k: usize, by: usize) -> KernelMatrix {
    shift(m, k, CNN_PIXELS - by % CNN_PIXELS)
}

fn cnn_pixel_gram(a: &ArchSpec) -> KernelMatrix {
    let k = a.inputs.len();
    let c = a.channels() as f64;
    DMatrix::from_fn(CNN_PIXELS * k, CNN_PIXELS * k, |x, y| dot(a.pixel(x % k, x / k), a.pixel(y % k, y / k)) / c)
}

fn conv(m: &KernelMatrix, k: usize) -> KernelMatrix {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for beta in CNN_KERNEL {
        out += shift(m, k, beta) * CNN_V[beta];
    }
    out
}

fn cnn_sigma(a: &ArchSpec, e: &Engine) -> Result<Vec<KernelMatrix>> {
    let phi = template(Func::Unary(a.phi()?));
    let k = a.inputs.len();
    let mut out = vec![plus_const(conv(&cnn_pixel_gram(a), k) * a.sigma_w[0].powi(2), a.sigma_b[0].powi(2))];
    for l in 2..=a.depth {
        let v = v_pair(e, &phi, &phi, out.last().unwrap())?;
        out.push(plus_const(conv(&v, k) * a.sigma_w[l - 1].powi(2), a.sigma_b[l - 1].powi(2)));
    }
    let v = v_pair(e, &phi, &phi, out.last().unwrap())?;
    out.push(pixel_trace(&v, k) * (a.sigma_w[a.depth].powi(2) / CNN_PIXELS as f64));
    Ok(out)
}

/// `sum_p M[(p, a), (p, b)]`.
fn pixel_trace(m: &KernelMatrix, k: usize) -> KernelMatrix {
    DMatrix::from_fn(k, k, |i, j| (0..CNN_PIXELS).map(|p| m[(p * k + i, p * k + j)]).sum())
}

fn cnn_pi(a: &ArchSpec, sigma: &[KernelMatrix], e: &Engine) -> Result<Vec<KernelMatrix>> {
    let dphi = derivative_template(a.phi()?)?;
    let k = a.inputs.len();
    let s = CNN_PIXELS;
    let top = DMatrix::from_fn(s * k, s * k, |x, y| if x / k == y / k { a.sigma_w[a.depth].powi(2) / s as f64 } else { 0.0 });
    let mut pi = vec![top];
    for l in (1..a.depth).rev() {
        let vd = v_pair(e, &dphi, &dphi, &sigma[l])?;
        let inner = vd.component_mul(&pi[0]);
        let mut next = DMatrix::zeros(s * k, s * k);
        for beta in CNN_KERNEL {
            next += unshift(&inner, k, beta) * CNN_V[beta];
        }
        pi.insert(0, next * a.sigma_w[l].powi(2));
    }
    Ok(pi)
}

/// Limiting NTK of the circular 1-D CNN with a Gaussian readout over all pixels,
/// gradients taken with respect to the unnormalized weights and biases.
pub fn cnn_ntk(a: &ArchSpec, e: &Engine) -> Result<KernelMatrix> {
    require(a, &[Variant::Cnn1dCircular], "the CNN NTK")?;
    let u = a.phi()?;
    let phi = template(Func::Unary(u));
    let dphi = derivative_template(u)?;
    let sigma = cnn_sigma(a, e)?;
    let pi = cnn_pi(a, &sigma, e)?;
    let k = a.inputs.len();
    let mut prev = cnn_pixel_gram(a);
    let mut ntk = DMatrix::zeros(k, k);
    for l in 1..=a.depth {
        let back = pi[l - 1].component_mul(&v_pair(e, &dphi, &dphi, &sigma[l - 1])?);
        let mut fwd = DMatrix::zeros(prev.nrows(), prev.ncols());
        for beta in CNN_KERNEL {
            fwd += shift(&prev, k, beta);
        }
        let full = back.component_mul(&fwd.add_scalar(1.0));
        ntk += block_sum(&full, k);
        prev = v_pair(e, &phi, &phi, &sigma[l - 1])?;
    }
    ntk += pixel_trace(&prev, k) / CNN_PIXELS as f64;
    Ok(symmetrize(ntk))
}

/// `sum_{p, q} M[(p, a), (q, b)]`.
fn block_sum(m: &KernelMatrix, k: usize) -> KernelMatrix {
    DMatrix::from_fn(k, k, |i, j| {
        let mut t = 0.0;
        for p in 0..CNN_PIXELS {
            for q in 0..CNN_PIXELS {
                t += m[(p * k + i, q * k + j)];
            }
        }
        t
    })
}

fn activation_parts(a: &ArchSpec) -> Result<(Unary, Box<dyn Fn(f64) -> f64 + Send + Sync>)> {
    let u = a.phi()?;
    let d: Box<dyn Fn(f64) -> f64 + Send + Sync> = match u.derivative() {
        UnaryDeriv::Zero => Box::new(|_| 0.0),
        UnaryDeriv::Const(c) => Box::new(move |_| c),
        UnaryDeriv::Fn(du) => Box::new(move |x| du.eval(x)),
        _ => return unsupported(format!("'{}' has no pointwise derivative", a.activation)),
    };
    Ok((u, d))
}

fn gaussian_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

fn gaussian_vector(rng: &mut impl rand::Rng, n: usize, sd: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

/// A finite-width MLP with weights `W^l ~ N(0, sigma_l^2)` applied as
/// `W^l x / sqrt(fan_in)`.
pub struct FiniteMlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// Empty for the mean pooling readout.
    pub readout: DVector<f64>,
    pub kind: Readout,
    phi: Unary,
    dphi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

struct Pass {
    /// Layer inputs `x^0 .. x^{L-1}` and last activation `x^L`.
    xs: Vec<DVector<f64>>,
    /// `df/dh^l` for `l = 1..L`.
    us: Vec<DVector<f64>>,
}

impl FiniteMlp {
    pub fn sample(a: &ArchSpec, width: usize, kind: Readout, seed: u64) -> Result<Self> {
        require(a, &MLP_FAMILY, "the finite MLP")?;
        let (phi, dphi) = activation_parts(a)?;
        let mut rng = seeds::stream(seed, 0);
        let mut dims = vec![a.inputs[0].len()];
        dims.extend(a.ratios.iter().map(|r| ((width as f64 * r).round() as usize).max(1)));
        let mut weights = vec![];
        let mut biases = vec![];
        for l in 1..=a.depth {
            weights.push(gaussian_matrix(&mut rng, dims[l], dims[l - 1], a.sigma_w[l - 1]));
            biases.push(gaussian_vector(&mut rng, dims[l], a.sigma_b[l - 1]));
        }
        let readout = match kind {
            Readout::Gaussian => gaussian_vector(&mut rng, dims[a.depth], a.sigma_w[a.depth]),
            Readout::MeanPool => DVector::zeros(0),
        };
        Ok(FiniteMlp { weights, biases, readout, kind, phi, dphi })
    }

    fn pass(&self, x: &[f64]) -> Pass {
        let mut xs = vec![DVector::from_column_slice(x)];
        let mut hs = vec![];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let prev = xs.last().unwrap();
            let h = w * prev / (prev.len() as f64).sqrt() + b;
            xs.push(h.map(|z| self.phi.eval(z)));
            hs.push(h);
        }
        let top = xs.last().unwrap().len() as f64;
        let mut p = match self.kind {
            Readout::Gaussian => &self.readout / top.sqrt(),
            Readout::MeanPool => DVector::from_element(top as usize, 1.0 / top),
        };
        let mut us = vec![DVector::zeros(0); hs.len()];
        for l in (0..hs.len()).rev() {
            let u = hs[l].map(|z| (self.dphi)(z)).component_mul(&p);
            if l > 0 {
                p = self.weights[l].tr_mul(&u) / (xs[l].len() as f64).sqrt();
            }
            us[l] = u;
        }
        Pass { xs, us }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        let p = self.pass(x);
        let top = p.xs.last().unwrap();
        match self.kind {
            Readout::Gaussian => self.readout.dot(top) / (top.len() as f64).sqrt(),
            Readout::MeanPool => top.mean(),
        }
    }

    /// `<grad f(x), grad f(y)>` over all parameters; multiplied by the last width
    /// for the mean pooling readout.
    pub fn ntk(&self, x: &[f64], y: &[f64]) -> f64 {
        let (p, q) = (self.pass(x), self.pass(y));
        let mut k = 0.0;
        for l in 0..p.us.len() {
            let uu = p.us[l].dot(&q.us[l]);
            let xx = p.xs[l].dot(&q.xs[l]) / p.xs[l].len() as f64;
            k += uu * (xx + 1.0);
        }
        let top = p.xs.last().unwrap();
        match self.kind {
            Readout::Gaussian => k + top.dot(q.xs.last().unwrap()) / top.len() as f64,
            Readout::MeanPool => k * top.len() as f64,
        }
    }

    pub fn ntk_matrix(&self, inputs: &[Vec<f64>]) -> KernelMatrix {
        let k = inputs.len();
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = self.ntk(&inputs[i], &inputs[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// Empirical NTK matrices over independent parameter draws.
pub fn empirical_ntk(a: &ArchSpec, width: usize, kind: Readout, draws: usize, seed: u64, workers: usize) -> Result<Vec<KernelMatrix>> {
    run_trials(draws, workers, |t| {
        let net = match a.variant {
            Variant::Cnn1dCircular => return Ok(FiniteCnn::sample(a, width, trial_seed(seed, t))?.ntk_matrix()),
            _ => FiniteMlp::sample(a, width, kind, trial_seed(seed, t))?,
        };
        Ok(net.ntk_matrix(&a.inputs))
    })
}

/// A finite-width circular 1-D CNN with kernel offsets [`CNN_KERNEL`].
pub struct FiniteCnn {
    arch: ArchSpec,
    /// `weights[l][beta]`.
    pub weights: Vec<Vec<DMatrix<f64>>>,
    pub biases: Vec<DVector<f64>>,
    /// One readout vector per pixel.
    pub readout: Vec<DVector<f64>>,
    phi: Unary,
    dphi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

struct CnnPass {
    /// `xs[l][p]` for `l = 0..=L`.
    xs: Vec<Vec<DVector<f64>>>,
    /// `us[l - 1][p] = df/dh^l_p`.
    us: Vec<Vec<DVector<f64>>>,
}

impl FiniteCnn {
    pub fn sample(a: &ArchSpec, width: usize, seed: u64) -> Result<Self> {
        require(a, &[Variant::Cnn1dCircular], "the finite CNN")?;
        let (phi, dphi) = activation_parts(a)?;
        let mut rng = seeds::stream(seed, 0);
        let mut fan = a.channels();
        let mut weights = vec![];
        let mut biases = vec![];
        for l in 1..=a.depth {
            let ws = CNN_KERNEL
                .iter()
                .map(|&beta| gaussian_matrix(&mut rng, width, fan, a.sigma_w[l - 1] * CNN_V[beta].sqrt()))
                .collect();
            weights.push(ws);
            biases.push(gaussian_vector(&mut rng, width, a.sigma_b[l - 1]));
            fan = width;
        }
        let readout = (0..CNN_PIXELS).map(|_| gaussian_vector(&mut rng, width, a.sigma_w[a.depth])).collect();
        Ok(FiniteCnn { arch: a.clone(), weights, biases, readout, phi, dphi })
    }

    fn pass(&self, input: usize) -> CnnPass {
        let s = CNN_PIXELS;
        let mut xs = vec![(0..s).map(|p| DVector::from_column_slice(self.arch.pixel(input, p))).collect::<Vec<_>>()];
        let mut hs = vec![];
        for (ws, b) in self.weights.iter().zip(&self.biases) {
            let prev = xs.last().unwrap();
            let norm = (prev[0].len() as f64).sqrt();
            let h: Vec<DVector<f64>> = (0..s)
                .map(|p| {
                    let mut acc = b.clone();
                    for beta in CNN_KERNEL {
                        acc += &ws[beta] * &prev[(p + beta) % s] / norm;
                    }
                    acc
                })
                .collect();
            xs.push(h.iter().map(|v| v.map(|z| self.phi.eval(z))).collect());
            hs.push(h);
        }
        let top = (xs.last().unwrap()[0].len() * s) as f64;
        let mut grad: Vec<DVector<f64>> = self.readout.iter().map(|w| w / top.sqrt()).collect();
        let mut us = vec![vec![]; hs.len()];
        for l in (0..hs.len()).rev() {
            let u: Vec<DVector<f64>> = (0..s).map(|p| hs[l][p].map(|z| (self.dphi)(z)).component_mul(&grad[p])).collect();
            if l > 0 {
                let norm = (xs[l][0].len() as f64).sqrt();
                grad = (0..s)
                    .map(|g| {
                        let mut acc = DVector::zeros(xs[l][0].len());
                        for beta in CNN_KERNEL {
                            acc += self.weights[l][beta].tr_mul(&u[(g + s - beta) % s]) / norm;
                        }
                        acc
                    })
                    .collect();
            }
            us[l] = u;
        }
        CnnPass { xs, us }
    }

    pub fn ntk_matrix(&self) -> KernelMatrix {
        let k = self.arch.inputs.len();
        let s = CNN_PIXELS;
        let passes: Vec<CnnPass> = (0..k).map(|i| self.pass(i)).collect();
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let (p, q) = (&passes[i], &passes[j]);
                let mut t = 0.0;
                for l in 0..p.us.len() {
                    let fan = p.xs[l][0].len() as f64;
                    for a in 0..s {
                        for b in 0..s {
                            let uu = p.us[l][a].dot(&q.us[l][b]);
                            let mut xx = 1.0;
                            for beta in CNN_KERNEL {
                                xx += p.xs[l][(a + beta) % s].dot(&q.xs[l][(b + beta) % s]) / fan;
                            }
                            t += uu * xx;
                        }
                    }
                }
                let top = p.xs.last().unwrap();
                let n = top[0].len() as f64;
                t += (0..s).map(|a| top[a].dot(&q.xs.last().unwrap()[a])).sum::<f64>() / (n * s as f64);
                m[(i, j)] = t;
                m[(j, i)] = t;
            }
        }
        m
    }
}

/// Exact `lim (1/n) g0 . M^k g0` for the symmetrized Gaussian matrix, via the
/// `b` recursion in integer arithmetic.
pub fn goe_moment_exact(k: usize) -> u128 {
    // b[j][r], b[j][j] = 1, b[j][r] = sum_{i=r}^{j-2} b[i][r] b[j-1][i+1].
    let mut b = vec![vec![0u128; k + 1]; k + 1];
    for j in 0..=k {
        b[j][j] = 1;
        for r in (0..j).rev() {
            let mut t = 0u128;
            for i in r..j.saturating_sub(1) {
                t += b[i][r] * b[j - 1][i + 1];
            }
            b[j][r] = t;
        }
    }
    b[k][0]
}

pub fn goe_moment(k: usize) -> f64 {
    goe_moment_exact(k) as f64
}

pub fn catalan(k: usize) -> u128 {
    let mut c = 1u128;
    for i in 0..k as u128 {
        c = c * 2 * (2 * i + 1) / (i + 2);
    }
    c
}

/// `lim (1/m) g0 . (A A^T)^k g0` for `A` of aspect `alpha = m / n`, via the
/// `b`, `b-bar` recurrence.
pub fn mp_moment(k: usize, alpha: f64) -> f64 {
    let mut b = vec![vec![0.0; k + 1]; k + 1];
    let mut bb = vec![vec![0.0; k + 1]; k + 1];
    b[0][0] = 1.0;
    bb[0][0] = 1.0;
    for i in 1..=k {
        b[i][i] = 1.0;
        for j in 0..i {
            b[i][j] = (j..i).map(|m| bb[i - 1][m] * b[m][j]).sum();
        }
        bb[i][i] = 1.0;
        for j in 0..i {
            bb[i][j] = alpha * (j + 1..=i).map(|m| b[i][m] * bb[m - 1][j]).sum::<f64>();
        }
    }
    b[k][0]
}

fn binom(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Closed form of the Marchenko-Pastur moments.
pub fn mp_closed_form(r: usize, alpha: f64) -> f64 {
    if r == 0 {
        return 1.0;
    }
    (0..=(r - 1) / 2)
        .map(|k| alpha.powi(k as i32) * (1.0 + alpha).powi((r - 1 - 2 * k) as i32) * binom(r - 1, 2 * k) * catalan(k) as f64)
        .sum()
}

/// Tensor program for `g^k_p = (A + A^T)^k g0_p` over independent probes
/// `p < probes`, with `Var(A_ij) = 1/(2n)`.
pub fn goe_program(k: usize, probes: usize) -> String {
    let mut s = String::from("input mat A : n x n\ntrans AT = A\nsigma A = 0.7071067811865476\n");
    for p in 0..probes {
        s += &format!("input vec g0_{p} : n\n");
        for i in 1..=k {
            s += &format!("p{i}_{p} = A * g{}_{p}\nq{i}_{p} = AT * g{}_{p}\ng{i}_{p} = 1*p{i}_{p} + 1*q{i}_{p}\n", i - 1, i - 1);
        }
    }
    s
}

/// Tensor program for `g^k_p = (A A^T)^k g0_p` over independent probes, with `A`
/// of shape `m x n`, `m / n = alpha` and `Var(A_ij) = 1/n`.
pub fn mp_program(k: usize, alpha: f64, probes: usize) -> String {
    let mut s = String::from("input mat A : m x n\ntrans AT = A\n");
    s += &format!("scale m = {}\n", crate::dsl::fmt_num(alpha));
    for p in 0..probes {
        s += &format!("input vec g0_{p} : m\n");
        for i in 1..=k {
            s += &format!("gb{i}_{p} = AT * g{}_{p}\ng{i}_{p} = A * gb{i}_{p}\n", i - 1);
        }
    }
    s
}

/// `(1 / probes) sum_p g0_p . g^k_p` in the notation of the programs above.
pub fn probe_moment_text(k: usize, probes: usize) -> String {
    let w = crate::dsl::fmt_num(1.0 / probes as f64);
    (0..probes).map(|p| format!("{w}*g0_{p}*g{k}_{p}")).collect::<Vec<_>>().join(" + ")
}

const AMP_U: VarId = VarId { line: 1, kind: Kind::G };
const AMP_AUX: VarId = VarId { line: 2, kind: Kind::G };

/// A map `(u, aux) -> R` used as `f_t(h, x0)` or `g_t(b, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpFn {
    pub dag: ExprDag,
}

impl AmpFn {
    /// `u(x + aux)`.
    pub fn additive(u: Func) -> Self {
        let s = ExprDag::lin(&[1.0, 1.0], &[&ExprDag::leaf(AMP_U), &ExprDag::leaf(AMP_AUX)]);
        AmpFn { dag: ExprDag::apply(u, &[&s]) }
    }

    /// `u(x + aux) - aux`.
    pub fn residual(u: Func) -> Self {
        let f = Self::additive(u).dag;
        AmpFn { dag: ExprDag::lin(&[1.0, -1.0], &[&f, &ExprDag::leaf(AMP_AUX)]) }
    }

    pub fn eval(&self, x: f64, aux: f64) -> f64 {
        self.dag.eval(&|v| if v == AMP_U { x } else { aux })
    }
}

/// AMP over `A in R^{n x N}` with `A_ij ~ N(0, 1/n)` and `delta = n / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpConfig {
    pub delta: f64,
    pub sigma_x0_sq: f64,
    pub sigma_w_sq: f64,
    /// `f_t(h, x0)`, producing `q^t`.
    pub f: AmpFn,
    /// `g_t(b, w)`, producing `m^t`.
    pub g: AmpFn,
    pub steps: usize,
    pub n_big: usize,
    pub seed: u64,
}

impl AmpConfig {
    /// Soft-threshold denoising `f(h, x0) = eta(x0 + h) - x0` with additive
    /// noise `g(b, w) = b + w`.
    pub fn soft_threshold(theta: f64) -> Self {
        let eta = Func::Unary(Unary::base(Base::SoftThreshold(theta)));
        AmpConfig {
            delta: 0.64,
            sigma_x0_sq: 1.0,
            sigma_w_sq: 0.2,
            f: AmpFn::residual(eta),
            g: AmpFn::additive(Func::Unary(Unary::base(Base::Id))),
            steps: 10,
            n_big: 4000,
            seed: 0,
        }
    }

    pub fn n_small(&self) -> usize {
        ((self.delta * self.n_big as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(TpError::InvalidSpec("delta must be positive".into()));
        }
        if self.steps == 0 {
            return Err(TpError::InvalidSpec("at least one step is required".into()));
        }
        if self.sigma_x0_sq < 0.0 || self.sigma_w_sq < 0.0 {
            return Err(TpError::InvalidSpec("variances must be non-negative".into()));
        }
        if self.n_big == 0 {
            return Err(TpError::InvalidSpec("N must be positive".into()));
        }
        Ok(())
    }
}

/// `tau2[t]` and `sigma2[t]` for `t = 0 .. steps - 1`, with `h^0 = 0` so that
/// `tau_{-1} = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateEvolution {
    pub tau2: Vec<f64>,
    pub sigma2: Vec<f64>,
}

fn se_moment(e: &Engine, f: &AmpFn, var_u: f64, var_aux: f64) -> Result<f64> {
    let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![var_u, var_aux]));
    let gs = GaussianSpec::new(vec![AMP_U, AMP_AUX], DVector::zeros(2), cov)?;
    e.mean(&ExprDag::prod(&[&f.dag, &f.dag]), &gs)
}

pub fn amp_state_evolution(cfg: &AmpConfig, e: &Engine) -> Result<StateEvolution> {
    cfg.validate()?;
    let mut tau2 = vec![];
    let mut sigma2 = vec![];
    let mut prev_tau = 0.0;
    for _ in 0..cfg.steps {
        let s = se_moment(e, &cfg.f, prev_tau, cfg.sigma_x0_sq)? / cfg.delta;
        let t = se_moment(e, &cfg.g, s, cfg.sigma_w_sq)?;
        sigma2.push(s);
        tau2.push(t);
        prev_tau = t;
    }
    Ok(StateEvolution { tau2, sigma2 })
}

/// Iterates of one AMP run; `h[t]` is `h^{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpPath {
    pub h: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub b: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
    pub xi: Vec<f64>,
    pub lambda: Vec<f64>,
}

fn onsager(num: f64, den: f64, what: &str) -> Result<f64> {
    if den > 1e-300 {
        Ok(num / den)
    } else if num == 0.0 {
        Ok(0.0)
    } else {
        Err(TpError::Numeric(format!("{what} is numerically zero")))
    }
}

/// Run the recursion on a given matrix and inputs.
pub fn amp_iterate(cfg: &AmpConfig, se: &StateEvolution, a: &DMatrix<f64>, x0: &DVector<f64>, w: &DVector<f64>) -> Result<AmpPath> {
    let (n, big) = a.shape();
    let mut path = AmpPath { h: vec![], q: vec![], b: vec![], m: vec![], xi: vec![], lambda: vec![] };
    let mut h = DVector::zeros(big);
    let mut m_prev = DVector::zeros(n);
    let mut lambda = 0.0;
    for t in 0..cfg.steps {
        let q = DVector::from_fn(big, |i, _| cfg.f.eval(h[i], x0[i]));
        let mut b = a * &q;
        if t > 0 {
            b -= &m_prev * lambda;
        }
        let m = DVector::from_fn(n, |i, _| cfg.g.eval(b[i], w[i]));
        let xi = onsager(b.dot(&m), n as f64 * se.sigma2[t], "sigma_t")?;
        h = a.tr_mul(&m) - &q * xi;
        let fh = DVector::from_fn(big, |i, _| cfg.f.eval(h[i], x0[i]));
        lambda = onsager(h.dot(&fh), n as f64 * se.tau2[t], "tau_t")?;
        path.xi.push(xi);
        path.lambda.push(lambda);
        path.q.push(q);
        path.b.push(b);
        path.m.push(m.clone());
        path.h.push(h.clone());
        m_prev = m;
    }
    Ok(path)
}

/// Normalized squared norms per step; `h_sq[t] = |h^{t+1}|^2 / N` tracks `tau2[t]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmpTrial {
    pub seed: u64,
    pub h_sq: Vec<f64>,
    pub q_sq: Vec<f64>,
    pub b_sq: Vec<f64>,
    pub m_sq: Vec<f64>,
    pub xi: Vec<f64>,
    pub lambda: Vec<f64>,
}

pub fn amp_run(cfg: &AmpConfig, se: &StateEvolution) -> Result<AmpTrial> {
    cfg.validate()?;
    let (n, big) = (cfg.n_small(), cfg.n_big);
    let a = gaussian_matrix(&mut seeds::stream(cfg.seed, 0), n, big, 1.0 / (n as f64).sqrt());
    let x0 = gaussian_vector(&mut seeds::stream(cfg.seed, 1), big, cfg.sigma_x0_sq.sqrt());
    let w = gaussian_vector(&mut seeds::stream(cfg.seed, 2), n, cfg.sigma_w_sq.sqrt());
    let p = amp_iterate(cfg, se, &a, &x0, &w)?;
    let sq = |vs: &[DVector<f64>]| vs.iter().map(|v| v.norm_squared() / v.len() as f64).collect();
    Ok(AmpTrial {
        seed: cfg.seed,
        h_sq: sq(&p.h),
        q_sq: sq(&p.q),
        b_sq: sq(&p.b),
        m_sq: sq(&p.m),
        xi: p.xi,
        lambda: p.lambda,
    })
}

/// Independent AMP runs with seeds derived from `cfg.seed`.
pub fn amp_trials(cfg: &AmpConfig, trials: usize, workers: usize, e: &Engine) -> Result<(StateEvolution, Vec<AmpTrial>)> {
    let se = amp_state_evolution(cfg, e)?;
    let runs = run_trials(trials, workers, |t| {
        let c = AmpConfig { seed: trial_seed(cfg.seed, t), ..cfg.clone() };
        amp_run(&c, &se)
    })?;
    Ok((se, runs))
}
