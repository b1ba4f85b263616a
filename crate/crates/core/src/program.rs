//! Straight-line tensor program skeletons.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Result, TpError};
use crate::nonlin::Func;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    G,
    H,
    A,
}

/// A variable is named by its 1-based line number; the kind is carried along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId {
    pub line: usize,
    pub kind: Kind,
}

impl VarId {
    pub fn new(line: usize, kind: Kind) -> Self {
        VarId { line, kind }
    }
    pub fn is_g(&self) -> bool {
        self.kind == Kind::G
    }
    pub fn is_h(&self) -> bool {
        self.kind == Kind::H
    }
    pub fn is_a(&self) -> bool {
        self.kind == Kind::A
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            Kind::G => "g",
            Kind::H => "h",
            Kind::A => "A",
        };
        write!(f, "{k}{}", self.line)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Syntax {
    Original,
    Extended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Line {
    VecIn { hint: Option<String> },
    MatIn { rows: Option<String>, cols: Option<String> },
    Transpose { source: VarId },
    MatMul { matrix: VarId, arg: VarId },
    LinComb { terms: Vec<(f64, VarId)> },
    Nonlin { f: Func, args: Vec<VarId> },
    Comp { f: Func, args: Vec<VarId> },
}

impl Line {
    pub fn kind(&self) -> Kind {
        match self {
            Line::VecIn { .. } | Line::MatMul { .. } | Line::LinComb { .. } => Kind::G,
            Line::MatIn { .. } | Line::Transpose { .. } => Kind::A,
            Line::Nonlin { .. } | Line::Comp { .. } => Kind::H,
        }
    }

    pub fn refs(&self) -> Vec<VarId> {
        match self {
            Line::VecIn { .. } | Line::MatIn { .. } => vec![],
            Line::Transpose { source } => vec![*source],
            Line::MatMul { matrix, arg } => vec![*matrix, *arg],
            Line::LinComb { terms } => terms.iter().map(|t| t.1).collect(),
            Line::Nonlin { args, .. } | Line::Comp { args, .. } => args.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineDecl {
    pub name: String,
    pub line: Line,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub syntax: Syntax,
    pub lines: Vec<LineDecl>,
}

/// Unordered pairs of G-vars forced to share a dimension.
pub type DimConstraints = Vec<(VarId, VarId)>;

impl Skeleton {
    pub fn new(syntax: Syntax) -> Self {
        Skeleton { syntax, lines: vec![] }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn var(&self, line: usize) -> VarId {
        VarId::new(line, self.lines[line - 1].line.kind())
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        (1..=self.lines.len()).map(move |l| self.var(l))
    }

    pub fn decl(&self, v: VarId) -> &LineDecl {
        &self.lines[v.line - 1]
    }

    pub fn line(&self, v: VarId) -> &Line {
        &self.lines[v.line - 1].line
    }

    pub fn name(&self, v: VarId) -> &str {
        &self.lines[v.line - 1].name
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.lines.iter().position(|d| d.name == name).map(|i| self.var(i + 1))
    }

    pub fn name_map(&self) -> HashMap<String, VarId> {
        self.vars().map(|v| (self.name(v).to_string(), v)).collect()
    }

    pub fn has_transpose(&self) -> bool {
        self.lines.iter().any(|d| matches!(d.line, Line::Transpose { .. }))
    }

    /// Resolve an A-var to its input matrix and whether it is transposed.
    pub fn matrix_root(&self, a: VarId) -> (VarId, bool) {
        match self.line(a) {
            Line::Transpose { source } => {
                let (r, t) = self.matrix_root(*source);
                (r, !t)
            }
            _ => (a, false),
        }
    }

    pub fn is_input(&self, v: VarId) -> bool {
        matches!(self.line(v), Line::VecIn { .. } | Line::MatIn { .. })
    }

    /// Push a line without checks; see [`Skeleton::validate_structure`].
    pub fn push_unchecked(&mut self, name: impl Into<String>, line: Line) -> VarId {
        let kind = line.kind();
        self.lines.push(LineDecl { name: name.into(), line });
        VarId::new(self.lines.len(), kind)
    }

    /// Structural checks that do not involve dimensions.
    pub fn validate_structure(&self) -> Vec<String> {
        let mut out = vec![];
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, d) in self.lines.iter().enumerate() {
            let l = i + 1;
            if let Some(prev) = seen.insert(d.name.as_str(), l) {
                out.push(format!("line {l}: name '{}' already defined on line {prev}", d.name));
            }
            for r in d.line.refs() {
                if r.line == 0 || r.line >= l {
                    out.push(format!("line {l}: reference to {r} is not an earlier line"));
                    continue;
                }
                if self.var(r.line) != r {
                    out.push(format!("line {l}: reference {r} has the wrong kind"));
                }
            }
            if let Some(m) = check_line(self, l, &d.line) {
                out.push(format!("line {l} ({}): {m}", d.name));
            }
        }
        out
    }
}

fn check_line(sk: &Skeleton, l: usize, line: &Line) -> Option<String> {
    let kind_of = |v: &VarId| -> Option<Kind> {
        if v.line >= 1 && v.line < l {
            Some(sk.lines[v.line - 1].line.kind())
        } else {
            None
        }
    };
    match line {
        Line::Transpose { source } => {
            if kind_of(source) != Some(Kind::A) {
                return Some("transpose requires A-var".into());
            }
        }
        Line::MatMul { matrix, arg } => {
            if kind_of(matrix) != Some(Kind::A) {
                return Some("matrix multiplication requires an A-var matrix".into());
            }
            match kind_of(arg) {
                Some(Kind::G) | Some(Kind::H) => {}
                _ => return Some("matrix multiplication requires a G- or H-var argument".into()),
            }
        }
        Line::LinComb { terms } => {
            if terms.is_empty() {
                return Some("empty linear combination".into());
            }
            if terms.iter().any(|(_, v)| kind_of(v) != Some(Kind::G)) {
                return Some("linear combination requires G-var arguments".into());
            }
        }
        Line::Nonlin { f, args } | Line::Comp { f, args } => {
            if let Err(e) = f.check_arity(args.len()) {
                return Some(e.to_string());
            }
            let is_comp = matches!(line, Line::Comp { .. });
            if is_comp && sk.syntax == Syntax::Original {
                return Some("general composition is only allowed in extended syntax".into());
            }
            for a in args {
                match kind_of(a) {
                    Some(Kind::G) => {}
                    Some(Kind::H) if is_comp => {}
                    _ => {
                        return Some(if is_comp {
                            "composition requires G- or H-var arguments".into()
                        } else {
                            "nonlinearity requires G-var arguments".into()
                        })
                    }
                }
            }
        }
        Line::VecIn { .. } | Line::MatIn { .. } => {}
    }
    None
}

/// Checked incremental construction of a skeleton.
#[derive(Clone, Debug)]
pub struct SkeletonBuilder {
    sk: Skeleton,
}

impl SkeletonBuilder {
    pub fn new(syntax: Syntax) -> Self {
        SkeletonBuilder { sk: Skeleton::new(syntax) }
    }

    pub fn from_skeleton(sk: Skeleton) -> Self {
        SkeletonBuilder { sk }
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.sk
    }

    pub fn finish(self) -> Skeleton {
        self.sk
    }

    fn auto_name(&self, kind: Kind) -> String {
        let l = self.sk.len() + 1;
        let base = VarId::new(l, kind).to_string();
        if self.sk.find(&base).is_none() {
            return base;
        }
        let mut k = 1;
        loop {
            let n = format!("{base}_{k}");
            if self.sk.find(&n).is_none() {
                return n;
            }
            k += 1;
        }
    }

    pub fn push(&mut self, name: Option<&str>, line: Line) -> Result<VarId> {
        let name = match name {
            Some(n) => n.to_string(),
            None => self.auto_name(line.kind()),
        };
        let l = self.sk.len() + 1;
        if self.sk.find(&name).is_some() {
            return Err(TpError::Validation(vec![format!("line {l}: name '{name}' already defined")]));
        }
        for r in line.refs() {
            if r.line == 0 || r.line >= l || self.sk.var(r.line) != r {
                return Err(TpError::Validation(vec![format!("line {l}: bad reference {r}")]));
            }
        }
        if let Some(m) = check_line(&self.sk, l, &line) {
            return Err(TpError::Validation(vec![format!("line {l} ({name}): {m}")]));
        }
        Ok(self.sk.push_unchecked(name, line))
    }

    pub fn vec_in(&mut self, name: Option<&str>, hint: Option<&str>) -> Result<VarId> {
        self.push(name, Line::VecIn { hint: hint.map(str::to_string) })
    }

    pub fn mat_in(&mut self, name: Option<&str>, rows: Option<&str>, cols: Option<&str>) -> Result<VarId> {
        self.push(name, Line::MatIn { rows: rows.map(str::to_string), cols: cols.map(str::to_string) })
    }

    pub fn transpose(&mut self, name: Option<&str>, source: VarId) -> Result<VarId> {
        self.push(name, Line::Transpose { source })
    }

    pub fn matmul(&mut self, name: Option<&str>, matrix: VarId, arg: VarId) -> Result<VarId> {
        self.push(name, Line::MatMul { matrix, arg })
    }

    /// Linear combination; in extended syntax H-var terms turn it into a `lin` composition.
    pub fn lincomb(&mut self, name: Option<&str>, terms: &[(f64, VarId)]) -> Result<VarId> {
        if terms.iter().any(|t| t.1.is_h()) && self.sk.syntax == Syntax::Extended {
            let f = Func::Lin(terms.iter().map(|t| t.0).collect());
            let args = terms.iter().map(|t| t.1).collect();
            return self.push(name, Line::Comp { f, args });
        }
        self.push(name, Line::LinComb { terms: terms.to_vec() })
    }

    /// Nonlinearity; with any H-var argument this becomes a composition.
    pub fn apply(&mut self, name: Option<&str>, f: Func, args: &[VarId]) -> Result<VarId> {
        if args.iter().all(|a| a.is_g()) {
            self.push(name, Line::Nonlin { f, args: args.to_vec() })
        } else {
            self.push(name, Line::Comp { f, args: args.to_vec() })
        }
    }
}

/// Line indices grouped by matrix identity (root, transposed).
pub fn matmuls_by_matrix(sk: &Skeleton) -> BTreeMap<(VarId, bool), Vec<VarId>> {
    let mut out: BTreeMap<(VarId, bool), Vec<VarId>> = BTreeMap::new();
    for v in sk.vars() {
        if let Line::MatMul { matrix, .. } = sk.line(v) {
            out.entry(sk.matrix_root(*matrix)).or_default().push(v);
        }
    }
    out
}
