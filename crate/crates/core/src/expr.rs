//! Expression DAGs over program variables.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{unsupported, Result, TpError};
use crate::nonlin::{Func, Partial};
use crate::program::{Line, Skeleton, VarId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(VarId),
    Const(f64),
    Apply(Func, Vec<usize>),
}

/// Arena of nodes in topological order; the root is the last node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprDag {
    pub nodes: Vec<Node>,
}

/// Affine form `sum_i w_i z_i + c`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Affine {
    pub coeffs: BTreeMap<VarId, f64>,
    pub constant: f64,
}

impl ExprDag {
    pub fn leaf(v: VarId) -> Self {
        ExprDag { nodes: vec![Node::Leaf(v)] }
    }

    pub fn constant(c: f64) -> Self {
        ExprDag { nodes: vec![Node::Const(c)] }
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Append another DAG's nodes, returning the index of its root.
    fn absorb(&mut self, other: &ExprDag) -> usize {
        let off = self.nodes.len();
        for n in &other.nodes {
            self.nodes.push(match n {
                Node::Apply(f, ch) => Node::Apply(f.clone(), ch.iter().map(|c| c + off).collect()),
                n => n.clone(),
            });
        }
        self.nodes.len() - 1
    }

    pub fn apply(f: Func, children: &[&ExprDag]) -> Self {
        let mut d = ExprDag { nodes: vec![] };
        let idx: Vec<usize> = children.iter().map(|c| d.absorb(c)).collect();
        d.nodes.push(Node::Apply(f, idx));
        d
    }

    pub fn lin(coeffs: &[f64], children: &[&ExprDag]) -> Self {
        ExprDag::apply(Func::Lin(coeffs.to_vec()), children)
    }

    pub fn prod(children: &[&ExprDag]) -> Self {
        ExprDag::apply(Func::Prod, children)
    }

    /// Multiplicative factors, splitting products and `scale:` maps.
    pub fn factors(&self) -> Vec<ExprDag> {
        let mut out = vec![];
        let mut stack = vec![self.root()];
        while let Some(i) = stack.pop() {
            match &self.nodes[i] {
                Node::Apply(Func::Prod, ch) => stack.extend(ch.iter().copied()),
                Node::Apply(Func::Scale(u), ch) => {
                    out.push(ExprDag::apply(Func::Unary(*u), &[&self.subdag(ch[0])]));
                    stack.push(ch[1]);
                }
                _ => out.push(self.subdag(i)),
            }
        }
        out
    }

    /// Weighted children when the root is a linear combination.
    pub fn lin_terms(&self) -> Option<Vec<(f64, ExprDag)>> {
        match &self.nodes[self.root()] {
            Node::Apply(Func::Lin(c), ch) => Some(c.iter().zip(ch).map(|(w, i)| (*w, self.subdag(*i))).collect()),
            _ => None,
        }
    }

    pub fn leaves(&self) -> Vec<VarId> {
        let s: BTreeSet<VarId> = self
            .nodes
            .iter()
            .filter_map(|n| if let Node::Leaf(v) = n { Some(*v) } else { None })
            .collect();
        s.into_iter().collect()
    }

    /// Replace leaves by DAGs where `f` returns one.
    pub fn substitute(&self, f: &mut dyn FnMut(VarId) -> Option<ExprDag>) -> ExprDag {
        let mut out = ExprDag { nodes: vec![] };
        let mut map = Vec::with_capacity(self.nodes.len());
        let mut cache: HashMap<VarId, usize> = HashMap::new();
        for n in &self.nodes {
            let idx = match n {
                Node::Leaf(v) => {
                    if let Some(&i) = cache.get(v) {
                        i
                    } else {
                        let i = match f(*v) {
                            Some(d) => out.absorb(&d),
                            None => {
                                out.nodes.push(Node::Leaf(*v));
                                out.nodes.len() - 1
                            }
                        };
                        cache.insert(*v, i);
                        i
                    }
                }
                Node::Const(c) => {
                    out.nodes.push(Node::Const(*c));
                    out.nodes.len() - 1
                }
                Node::Apply(func, ch) => {
                    out.nodes.push(Node::Apply(func.clone(), ch.iter().map(|c| map[*c]).collect()));
                    out.nodes.len() - 1
                }
            };
            map.push(idx);
        }
        // The root must stay last.
        let r = map[self.root()];
        if r != out.nodes.len() - 1 {
            out.nodes.push(Node::Apply(Func::Lin(vec![1.0]), vec![r]));
        }
        out
    }

    pub fn eval(&self, value: &dyn Fn(VarId) -> f64) -> f64 {
        let mut vals = Vec::with_capacity(self.nodes.len());
        let mut buf = vec![];
        for n in &self.nodes {
            let x = match n {
                Node::Leaf(v) => value(*v),
                Node::Const(c) => *c,
                Node::Apply(f, ch) => {
                    buf.clear();
                    buf.extend(ch.iter().map(|c| vals[*c]));
                    f.eval(&buf)
                }
            };
            vals.push(x);
        }
        vals[self.root()]
    }

    /// Compile against an ordered list of coordinate labels.
    pub fn bind(&self, labels: &[VarId]) -> Result<Bound> {
        let pos: HashMap<VarId, usize> = labels.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut instrs = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            instrs.push(match n {
                Node::Leaf(v) => Instr::Coord(
                    *pos.get(v).ok_or_else(|| TpError::Unsupported(format!("leaf {v} not among coordinates")))?,
                ),
                Node::Const(c) => Instr::Const(*c),
                Node::Apply(f, ch) => Instr::Apply(f.clone(), ch.clone()),
            });
        }
        Ok(Bound { instrs })
    }

    /// Affine form when the DAG uses only linear maps; `None` otherwise.
    pub fn affine(&self) -> Option<Affine> {
        let mut forms: Vec<Affine> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let a = match n {
                Node::Leaf(v) => {
                    let mut a = Affine::default();
                    a.coeffs.insert(*v, 1.0);
                    a
                }
                Node::Const(c) => Affine { coeffs: BTreeMap::new(), constant: *c },
                Node::Apply(f, ch) => {
                    let coeffs: Vec<f64> = match f {
                        Func::Lin(c) => c.clone(),
                        f if f.is_linear() => vec![1.0],
                        Func::Prod => {
                            // A product is affine when at most one factor is non-constant.
                            let mut scale = 1.0;
                            let mut var: Option<&Affine> = None;
                            for c in ch {
                                let fc = &forms[*c];
                                if fc.coeffs.values().all(|w| *w == 0.0) {
                                    scale *= fc.constant;
                                } else if var.is_none() {
                                    var = Some(fc);
                                } else {
                                    return None;
                                }
                            }
                            let a = match var {
                                Some(v) => Affine {
                                    coeffs: v.coeffs.iter().map(|(k, w)| (*k, w * scale)).collect(),
                                    constant: v.constant * scale,
                                },
                                None => Affine { coeffs: BTreeMap::new(), constant: scale },
                            };
                            forms.push(a);
                            continue;
                        }
                        _ => return None,
                    };
                    let mut a = Affine::default();
                    for (w, c) in coeffs.iter().zip(ch) {
                        let fc = &forms[*c];
                        a.constant += w * fc.constant;
                        for (k, x) in &fc.coeffs {
                            *a.coeffs.entry(*k).or_insert(0.0) += w * x;
                        }
                    }
                    a
                }
            };
            forms.push(a);
        }
        forms.pop()
    }

    pub fn is_polynomial(&self) -> bool {
        self.nodes.iter().all(|n| match n {
            Node::Apply(f, _) => f.is_polynomial(),
            _ => true,
        })
    }

    /// Hyperplanes `a(Z) = loc` where the DAG may fail to be smooth, and whether
    /// every non-smooth node has an affine argument.
    pub fn kinks(&self) -> (Vec<(Affine, f64)>, bool) {
        let mut out = vec![];
        let mut all_affine = true;
        for n in &self.nodes {
            if let Node::Apply(f, ch) = n {
                let ks = f.kinks();
                if ks.is_empty() {
                    continue;
                }
                match self.subdag(ch[0]).affine() {
                    Some(a) => out.extend(ks.into_iter().map(|k| (a.clone(), k))),
                    None => all_affine = false,
                }
            }
        }
        (out, all_affine)
    }

    /// Symbolic derivative with respect to a leaf, as a sum of terms that may
    /// carry a Dirac delta of an affine argument.
    pub fn derivative(&self, wrt: VarId) -> Result<Vec<DerivTerm>> {
        let mut derivs: Vec<Vec<DerivTerm>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let d = match n {
                Node::Leaf(v) if *v == wrt => vec![DerivTerm::constant(1.0)],
                Node::Leaf(_) | Node::Const(_) => vec![],
                Node::Apply(f, ch) => {
                    let mut out = vec![];
                    for (k, c) in ch.iter().enumerate() {
                        if derivs[*c].is_empty() {
                            continue;
                        }
                        let p = f.partial(k, ch.len());
                        let factor = self.partial_expr(&p, ch)?;
                        for t in &derivs[*c] {
                            for fterm in &factor {
                                out.push(fterm.times(t)?);
                            }
                        }
                    }
                    out
                }
            };
            derivs.push(d);
        }
        Ok(derivs.pop().unwrap_or_default())
    }

    fn subdag(&self, idx: usize) -> ExprDag {
        let mut keep = vec![false; idx + 1];
        keep[idx] = true;
        for j in (0..=idx).rev() {
            if keep[j] {
                if let Node::Apply(_, ch) = &self.nodes[j] {
                    for c in ch {
                        keep[*c] = true;
                    }
                }
            }
        }
        let mut map = vec![usize::MAX; idx + 1];
        let mut out = ExprDag { nodes: vec![] };
        for j in 0..=idx {
            if keep[j] {
                let n = match &self.nodes[j] {
                    Node::Apply(f, ch) => Node::Apply(f.clone(), ch.iter().map(|c| map[*c]).collect()),
                    n => n.clone(),
                };
                map[j] = out.nodes.len();
                out.nodes.push(n);
            }
        }
        out
    }

    /// Materialize a [`Partial`] over the children `ch` as derivative terms.
    fn partial_expr(&self, p: &Partial, ch: &[usize]) -> Result<Vec<DerivTerm>> {
        Ok(match p {
            Partial::Zero => vec![],
            Partial::Const(c) => vec![DerivTerm::constant(*c)],
            Partial::Arg(k) => vec![DerivTerm::factor(self.subdag(ch[*k]))],
            Partial::Apply(f, args) => {
                let subs: Vec<ExprDag> = args.iter().map(|a| self.subdag(ch[*a])).collect();
                let refs: Vec<&ExprDag> = subs.iter().collect();
                vec![DerivTerm::factor(ExprDag::apply(f.clone(), &refs))]
            }
            Partial::Delta { arg, points } => {
                let inner = self.subdag(ch[*arg]);
                let aff = inner.affine().ok_or_else(|| {
                    TpError::Unsupported("Dirac delta of a non-affine argument".into())
                })?;
                points
                    .iter()
                    .map(|(s, loc)| {
                        let mut a = aff.clone();
                        a.constant -= loc;
                        DerivTerm { coef: *s, factor: None, delta: Some(a) }
                    })
                    .collect()
            }
            Partial::Mul(a, b) => {
                let ta = self.partial_expr(a, ch)?;
                let tb = self.partial_expr(b, ch)?;
                let mut out = vec![];
                for x in &ta {
                    for y in &tb {
                        out.push(x.times(y)?);
                    }
                }
                out
            }
            Partial::Unsupported => return unsupported("derivative not available for this nonlinearity"),
        })
    }
}

/// Expanded definition of a G- or H-var: G-vars are leaves, H-vars compose the
/// nonlinearities of earlier lines down to G-var leaves.
pub fn expand_definition(sk: &Skeleton, v: VarId) -> Result<ExprDag> {
    expand(sk, v, false, &mut HashMap::new())
}

/// Like [`expand_definition`] but also unfolds linear combinations, so the leaves
/// are input vectors and matrix products only.
pub fn expand_base(sk: &Skeleton, v: VarId) -> Result<ExprDag> {
    expand(sk, v, true, &mut HashMap::new())
}

/// Replace H-var leaves of a test function by their expanded definitions.
pub fn expand_leaves(sk: &Skeleton, phi: &ExprDag) -> Result<ExprDag> {
    let mut memo = HashMap::new();
    let mut err = None;
    let out = phi.substitute(&mut |v| {
        if !v.is_h() {
            return None;
        }
        match expand(sk, v, false, &mut memo) {
            Ok(d) => Some(d),
            Err(e) => {
                err = Some(e);
                None
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn expand(sk: &Skeleton, v: VarId, unfold: bool, memo: &mut HashMap<VarId, ExprDag>) -> Result<ExprDag> {
    if v.is_a() {
        return unsupported(format!("{} is a matrix and has no expanded definition", sk.name(v)));
    }
    if let Some(d) = memo.get(&v) {
        return Ok(d.clone());
    }
    let d = match sk.line(v) {
        Line::Nonlin { f, args } | Line::Comp { f, args } => {
            let ch: Vec<ExprDag> = args.iter().map(|a| expand(sk, *a, unfold, memo)).collect::<Result<_>>()?;
            let refs: Vec<&ExprDag> = ch.iter().collect();
            ExprDag::apply(f.clone(), &refs)
        }
        Line::LinComb { terms } if unfold => {
            let ch: Vec<ExprDag> = terms.iter().map(|t| expand(sk, t.1, unfold, memo)).collect::<Result<_>>()?;
            let refs: Vec<&ExprDag> = ch.iter().collect();
            let c: Vec<f64> = terms.iter().map(|t| t.0).collect();
            ExprDag::lin(&c, &refs)
        }
        _ => ExprDag::leaf(v),
    };
    memo.insert(v, d.clone());
    Ok(d)
}

/// `coef * factor(Z) * delta(affine(Z))`, with missing parts equal to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivTerm {
    pub coef: f64,
    pub factor: Option<ExprDag>,
    pub delta: Option<Affine>,
}

impl DerivTerm {
    fn constant(c: f64) -> Self {
        DerivTerm { coef: c, factor: None, delta: None }
    }

    fn factor(d: ExprDag) -> Self {
        DerivTerm { coef: 1.0, factor: Some(d), delta: None }
    }

    fn times(&self, o: &DerivTerm) -> Result<DerivTerm> {
        if self.delta.is_some() && o.delta.is_some() {
            return unsupported("product of two Dirac deltas");
        }
        let factor = match (&self.factor, &o.factor) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (Some(a), Some(b)) => Some(ExprDag::prod(&[a, b])),
        };
        Ok(DerivTerm {
            coef: self.coef * o.coef,
            factor,
            delta: self.delta.clone().or_else(|| o.delta.clone()),
        })
    }

    /// The regular part as a DAG (constant one when absent).
    pub fn factor_dag(&self) -> ExprDag {
        let f = self.factor.clone().unwrap_or_else(|| ExprDag::constant(1.0));
        ExprDag::lin(&[self.coef], &[&f])
    }
}

#[derive(Clone, Debug)]
pub enum Instr {
    Coord(usize),
    Const(f64),
    Apply(Func, Vec<usize>),
}

/// A DAG compiled against coordinate positions.
#[derive(Clone, Debug)]
pub struct Bound {
    instrs: Vec<Instr>,
}

impl Bound {
    pub fn eval(&self, z: &[f64], scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        let mut args: [f64; 8] = [0.0; 8];
        for ins in &self.instrs {
            let x = match ins {
                Instr::Coord(i) => z[*i],
                Instr::Const(c) => *c,
                Instr::Apply(f, ch) => {
                    if ch.len() <= 8 {
                        for (k, c) in ch.iter().enumerate() {
                            args[k] = scratch[*c];
                        }
                        f.eval(&args[..ch.len()])
                    } else {
                        let v: Vec<f64> = ch.iter().map(|c| scratch[*c]).collect();
                        f.eval(&v)
                    }
                }
            };
            scratch.push(x);
        }
        *scratch.last().unwrap()
    }
}

/// Parse a test-function expression such as `tanh(g8) * g10 + 0.5*x`.
///
/// `resolve` maps identifiers to variables.
pub fn parse_expr(text: &str, resolve: &dyn Fn(&str) -> Option<VarId>) -> Result<ExprDag> {
    let toks = tokenize(text)?;
    let mut p = ExprParser { toks, pos: 0, resolve };
    let d = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(s: &str) -> Result<Vec<(Tok, usize)>> {
    let cs: Vec<char> = s.chars().collect();
    let mut out = vec![];
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let st = i;
            while i < cs.len()
                && (cs[i].is_ascii_digit()
                    || cs[i] == '.'
                    || cs[i] == 'e'
                    || cs[i] == 'E'
                    || ((cs[i] == '-' || cs[i] == '+') && (cs[i - 1] == 'e' || cs[i - 1] == 'E')))
            {
                i += 1;
            }
            let t: String = cs[st..i].iter().collect();
            let v = t
                .parse::<f64>()
                .map_err(|_| TpError::Parse { line: 0, col: st + 1, msg: format!("bad number '{t}'") })?;
            out.push((Tok::Num(v), st));
        } else if c.is_alphabetic() || c == '_' {
            let st = i;
            while i < cs.len() && (cs[i].is_alphanumeric() || cs[i] == '_' || cs[i] == ':' || cs[i] == '\'') {
                i += 1;
            }
            out.push((Tok::Ident(cs[st..i].iter().collect()), st));
        } else if "+-*()[],".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            return Err(TpError::Parse { line: 0, col: i + 1, msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    resolve: &'a dyn Fn(&str) -> Option<VarId>,
}

impl ExprParser<'_> {
    fn err(&self, msg: &str) -> TpError {
        let col = self.toks.get(self.pos).map(|t| t.1 + 1).unwrap_or(0);
        TpError::Parse { line: 0, col, msg: msg.to_string() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<ExprDag> {
        let mut terms = vec![];
        let mut coeffs = vec![];
        let mut sign = if self.eat('-') { -1.0 } else { 1.0 };
        loop {
            terms.push(self.term()?);
            coeffs.push(sign);
            if self.eat('+') {
                sign = 1.0;
            } else if self.eat('-') {
                sign = -1.0;
            } else {
                break;
            }
        }
        if terms.len() == 1 && coeffs[0] == 1.0 {
            return Ok(terms.pop().unwrap());
        }
        let refs: Vec<&ExprDag> = terms.iter().collect();
        Ok(ExprDag::lin(&coeffs, &refs))
    }

    fn term(&mut self) -> Result<ExprDag> {
        let mut fs = vec![self.factor()?];
        while self.eat('*') {
            fs.push(self.factor()?);
        }
        if fs.len() == 1 {
            return Ok(fs.pop().unwrap());
        }
        let refs: Vec<&ExprDag> = fs.iter().collect();
        Ok(ExprDag::prod(&refs))
    }

    fn factor(&mut self) -> Result<ExprDag> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(ExprDag::constant(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let is_call = matches!(self.peek(), Some(Tok::Sym('(')) | Some(Tok::Sym('[')));
                if !is_call {
                    let v = (self.resolve)(&name).ok_or_else(|| {
                        self.pos -= 1;
                        self.err(&format!("unknown variable '{name}'"))
                    })?;
                    return Ok(ExprDag::leaf(v));
                }
                let mut params = vec![];
                if self.eat('[') {
                    loop {
                        let neg = self.eat('-');
                        match self.peek().cloned() {
                            Some(Tok::Num(v)) => {
                                self.pos += 1;
                                params.push(if neg { -v } else { v });
                            }
                            _ => return Err(self.err("expected a number")),
                        }
                        if self.eat(']') {
                            break;
                        }
                        if !self.eat(',') {
                            return Err(self.err("expected ',' or ']'"));
                        }
                    }
                }
                if !self.eat('(') {
                    return Err(self.err("expected '('"));
                }
                let mut args = vec![];
                loop {
                    args.push(self.expr()?);
                    if self.eat(')') {
                        break;
                    }
                    if !self.eat(',') {
                        return Err(self.err("expected ',' or ')'"));
                    }
                }
                let f = Func::resolve(&crate::nonlin::NonlinRef { name: name.clone(), params })
                    .map_err(|e| self.err(&e.to_string()))?;
                f.check_arity(args.len()).map_err(|e| self.err(&e.to_string()))?;
                let refs: Vec<&ExprDag> = args.iter().collect();
                Ok(ExprDag::apply(f, &refs))
            }
            _ => Err(self.err("expected an expression")),
        }
    }
}
