//! Common-dimension classes.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TpError};
use crate::program::{DimConstraints, Kind, Line, Skeleton, VarId};

pub type ClassId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdcPartition {
    pub class_of: BTreeMap<VarId, ClassId>,
    pub hvar_class: BTreeMap<VarId, ClassId>,
    /// (row class, column class) of each A-var.
    pub matrix_sides: BTreeMap<VarId, (Option<ClassId>, Option<ClassId>)>,
    pub n_classes: usize,
}

impl CdcPartition {
    pub fn empty() -> Self {
        CdcPartition { class_of: BTreeMap::new(), hvar_class: BTreeMap::new(), matrix_sides: BTreeMap::new(), n_classes: 0 }
    }

    /// Class of a G- or H-var.
    pub fn class(&self, v: VarId) -> Option<ClassId> {
        match v.kind {
            Kind::G => self.class_of.get(&v).copied(),
            Kind::H => self.hvar_class.get(&v).copied(),
            Kind::A => None,
        }
    }

    pub fn members(&self, c: ClassId) -> Vec<VarId> {
        self.class_of.iter().filter(|(_, k)| **k == c).map(|(v, _)| *v).collect()
    }

    pub fn sides(&self, a: VarId) -> (Option<ClassId>, Option<ClassId>) {
        self.matrix_sides.get(&a).copied().unwrap_or((None, None))
    }

    /// Record the class of a new var (used when growing a program).
    pub fn assign(&mut self, v: VarId, c: ClassId) {
        match v.kind {
            Kind::G => {
                self.class_of.insert(v, c);
            }
            Kind::H => {
                self.hvar_class.insert(v, c);
            }
            Kind::A => {}
        }
        self.n_classes = self.n_classes.max(c + 1);
    }

    pub fn assign_sides(&mut self, a: VarId, rows: Option<ClassId>, cols: Option<ClassId>) {
        self.matrix_sides.insert(a, (rows, cols));
    }

    /// The single class shared by a set of vector vars.
    pub fn common_class(&self, sk: &Skeleton, vars: &[VarId]) -> Result<ClassId> {
        let mut out = None;
        for v in vars {
            let c = self
                .class(*v)
                .ok_or_else(|| TpError::Validation(vec![format!("{} has no dimension class", sk.name(*v))]))?;
            match out {
                None => out = Some(c),
                Some(d) if d != c => {
                    return Err(TpError::Validation(vec![format!(
                        "{} is not in the same dimension class as the other variables",
                        sk.name(*v)
                    )]))
                }
                _ => {}
            }
        }
        out.ok_or_else(|| TpError::Validation(vec!["expression has no variables".into()]))
    }

    /// Partition of G-vars as sets of names, independent of class numbering.
    pub fn named_blocks(&self, sk: &Skeleton) -> Vec<Vec<String>> {
        let mut blocks: BTreeMap<ClassId, Vec<String>> = BTreeMap::new();
        for (v, c) in &self.class_of {
            blocks.entry(*c).or_default().push(sk.name(*v).to_string());
        }
        let mut out: Vec<Vec<String>> = blocks
            .into_values()
            .map(|mut b| {
                b.sort();
                b
            })
            .collect();
        out.sort();
        out
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new() -> Self {
        Dsu { parent: vec![] }
    }
    fn add(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut y = x;
        while self.parent[y] != r {
            let n = self.parent[y];
            self.parent[y] = r;
            y = n;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

struct Elements {
    dsu: Dsu,
    var: HashMap<VarId, usize>,
    sides: HashMap<VarId, (usize, usize)>,
    labels: BTreeMap<String, usize>,
}

fn build(sk: &Skeleton, lam: &DimConstraints) -> Elements {
    let mut e = Elements { dsu: Dsu::new(), var: HashMap::new(), sides: HashMap::new(), labels: BTreeMap::new() };
    let label = |e: &mut Elements, s: &str| -> usize {
        if let Some(&x) = e.labels.get(s) {
            return x;
        }
        let x = e.dsu.add();
        e.labels.insert(s.to_string(), x);
        x
    };
    for v in sk.vars() {
        match sk.line(v) {
            Line::VecIn { hint } => {
                let x = e.dsu.add();
                e.var.insert(v, x);
                if let Some(h) = hint {
                    let l = label(&mut e, h);
                    e.dsu.union(x, l);
                }
            }
            Line::MatIn { rows, cols } => {
                let (r, c) = (e.dsu.add(), e.dsu.add());
                e.sides.insert(v, (r, c));
                if let Some(h) = rows {
                    let l = label(&mut e, h);
                    e.dsu.union(r, l);
                }
                if let Some(h) = cols {
                    let l = label(&mut e, h);
                    e.dsu.union(c, l);
                }
            }
            Line::Transpose { source } => {
                let (r, c) = match e.sides.get(source) {
                    Some(s) => *s,
                    None => (e.dsu.add(), e.dsu.add()),
                };
                e.sides.insert(v, (c, r));
            }
            Line::MatMul { matrix, arg } => {
                let x = e.dsu.add();
                e.var.insert(v, x);
                if let (Some(&(r, c)), Some(&a)) = (e.sides.get(matrix), e.var.get(arg)) {
                    e.dsu.union(c, a);
                    e.dsu.union(r, x);
                }
            }
            Line::LinComb { terms } => {
                let x = e.dsu.add();
                e.var.insert(v, x);
                for (_, a) in terms {
                    if let Some(&y) = e.var.get(a) {
                        e.dsu.union(x, y);
                    }
                }
            }
            Line::Nonlin { args, .. } | Line::Comp { args, .. } => {
                let x = e.dsu.add();
                e.var.insert(v, x);
                for a in args {
                    if let Some(&y) = e.var.get(a) {
                        e.dsu.union(x, y);
                    }
                }
            }
        }
    }
    for (a, b) in lam {
        if let (Some(&x), Some(&y)) = (e.var.get(a), e.var.get(b)) {
            e.dsu.union(x, y);
        }
    }
    e
}

/// Finest partition consistent with the program's dimension constraints,
/// hint labels and `lam`.
pub fn compute_cdc(sk: &Skeleton, lam: &DimConstraints) -> Result<CdcPartition> {
    let diags = validate(sk, lam);
    if !diags.is_empty() {
        return Err(TpError::Validation(diags));
    }
    Ok(partition(sk, lam))
}

fn partition(sk: &Skeleton, lam: &DimConstraints) -> CdcPartition {
    let mut e = build(sk, lam);
    let mut root_class: HashMap<usize, ClassId> = HashMap::new();
    let mut out = CdcPartition::empty();
    for v in sk.vars().filter(|v| v.is_g()) {
        let r = e.dsu.find(e.var[&v]);
        let n = root_class.len();
        let c = *root_class.entry(r).or_insert(n);
        out.class_of.insert(v, c);
    }
    out.n_classes = root_class.len();
    for v in sk.vars() {
        match v.kind {
            Kind::H => {
                let r = e.dsu.find(e.var[&v]);
                if let Some(&c) = root_class.get(&r) {
                    out.hvar_class.insert(v, c);
                }
            }
            Kind::A => {
                let (r, c) = e.sides[&v];
                let (rr, rc) = (e.dsu.find(r), e.dsu.find(c));
                out.matrix_sides.insert(v, (root_class.get(&rr).copied(), root_class.get(&rc).copied()));
            }
            Kind::G => {}
        }
    }
    out
}

/// All diagnostics for a program and its constraints; empty means valid.
pub fn validate(sk: &Skeleton, lam: &DimConstraints) -> Vec<String> {
    let mut diags = sk.validate_structure();
    if !diags.is_empty() {
        return diags;
    }
    for (a, b) in lam {
        for v in [a, b] {
            if v.line == 0 || v.line > sk.len() || sk.var(v.line) != *v || !v.is_g() {
                diags.push(format!("dimension constraint refers to {v}, which is not a G-var"));
            }
        }
    }
    if !diags.is_empty() {
        return diags;
    }
    let mut e = build(sk, lam);
    let labels: Vec<(String, usize)> = e.labels.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let mut by_root: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (name, x) in labels {
        by_root.entry(e.dsu.find(x)).or_default().push(name);
    }
    for names in by_root.values().filter(|n| n.len() > 1) {
        diags.push(format!("inconsistent dimension constraints: labels {} are forced equal", names.join(", ")));
    }
    diags
}
