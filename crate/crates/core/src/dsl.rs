//! Text format for programs.
//!
//! ```text
//! syntax original
//! input vec x : d0
//! input mat W : d1 x d0
//! trans WT = W
//! g = W * x
//! z = 1.0*g + 0.5*x
//! h = tanh(z)
//! y = WT * h
//! constrain dim(x) = dim(y)
//! sigma W = 1.0
//! observe m = y
//! ```

use std::collections::HashMap;

use crate::error::{Result, TpError};
use crate::expr::{parse_expr, ExprDag};
use crate::nonlin::{Func, NonlinRef};
use crate::program::{DimConstraints, Line, Skeleton, Syntax, VarId};

/// Reference to a dimension: a variable or a hint label.
#[derive(Clone, Debug, PartialEq)]
pub enum DimRef {
    Var(VarId),
    Label(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Directive {
    Sigma { matrix: VarId, value: f64 },
    Mean { var: VarId, value: f64 },
    Cov { a: VarId, b: VarId, value: f64 },
    Scale { target: DimRef, value: f64 },
    Width { target: DimRef, value: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgramText {
    pub skeleton: Skeleton,
    pub constraints: DimConstraints,
    pub directives: Vec<Directive>,
    pub observables: Vec<(String, ExprDag)>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(char),
}

fn is_prefix_segment(s: &str) -> bool {
    s == "d" || s == "scale" || s == "bn" || (s.starts_with('d') && s.len() > 1 && s[1..].chars().all(|c| c.is_ascii_digit()))
}

fn tokenize(line: &str, ln: usize) -> Result<Vec<(Tok, usize)>> {
    let cs: Vec<char> = line.chars().collect();
    let mut out = vec![];
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let st = i;
        if c.is_alphabetic() || c == '_' {
            let mut seg_start = i;
            loop {
                while i < cs.len() && (cs[i].is_alphanumeric() || cs[i] == '_' || cs[i] == '\'') {
                    i += 1;
                }
                let seg: String = cs[seg_start..i].iter().collect();
                if i + 1 < cs.len() && cs[i] == ':' && cs[i + 1].is_alphabetic() && is_prefix_segment(&seg) {
                    i += 1;
                    seg_start = i;
                    continue;
                }
                break;
            }
            out.push((Tok::Ident(cs[st..i].iter().collect()), st + 1));
        } else if c.is_ascii_digit() || c == '.' {
            while i < cs.len()
                && (cs[i].is_ascii_digit()
                    || cs[i] == '.'
                    || cs[i] == 'e'
                    || cs[i] == 'E'
                    || ((cs[i] == '-' || cs[i] == '+') && matches!(cs[i - 1], 'e' | 'E')))
            {
                i += 1;
            }
            let t: String = cs[st..i].iter().collect();
            let v = t
                .parse::<f64>()
                .map_err(|_| TpError::Parse { line: ln, col: st + 1, msg: format!("bad number '{t}'") })?;
            out.push((Tok::Num(v), st + 1));
        } else if "=*+-()[],:/".contains(c) {
            out.push((Tok::Sym(c), st + 1));
            i += 1;
        } else {
            return Err(TpError::Parse { line: ln, col: st + 1, msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct LineParser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    ln: usize,
    width: usize,
    names: &'a HashMap<String, VarId>,
}

impl LineParser<'_> {
    fn err(&self, msg: impl Into<String>) -> TpError {
        let col = self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.width + 1);
        TpError::Parse { line: self.ln, col, msg: msg.into() }
    }
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }
    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|t| &t.0)
    }
    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }
    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }
    fn ident(&mut self) -> Result<String> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err("expected an identifier")),
        }
    }
    fn keyword(&mut self, k: &str) -> Result<()> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == k => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected '{k}'"))),
        }
    }
    fn number(&mut self) -> Result<f64> {
        let neg = self.eat('-');
        if !neg {
            self.eat('+');
        }
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(if neg { -v } else { v })
            }
            _ => Err(self.err("expected a number")),
        }
    }
    fn var(&mut self) -> Result<VarId> {
        let save = self.pos;
        let n = self.ident()?;
        self.names.get(&n).copied().ok_or_else(|| {
            self.pos = save;
            self.err(format!("undeclared variable '{n}'"))
        })
    }
    fn dim_ref(&mut self) -> Result<DimRef> {
        let n = self.ident()?;
        Ok(match self.names.get(&n) {
            Some(v) => DimRef::Var(*v),
            None => DimRef::Label(n),
        })
    }
    fn end(&self) -> Result<()> {
        if self.pos < self.toks.len() {
            Err(self.err("unexpected trailing input"))
        } else {
            Ok(())
        }
    }
}

pub fn parse_program(text: &str) -> Result<ProgramText> {
    let mut sk = Skeleton::new(Syntax::Original);
    let mut constraints = vec![];
    let mut directives = vec![];
    let mut observables = vec![];
    let mut names: HashMap<String, VarId> = HashMap::new();
    let mut saw_line = false;

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let toks = tokenize(raw, ln)?;
        if toks.is_empty() {
            continue;
        }
        let mut p = LineParser { toks, pos: 0, ln, width: raw.chars().count(), names: &names };
        let head = match p.peek() {
            Some(Tok::Ident(s)) => s.clone(),
            _ => return Err(p.err("expected a statement")),
        };
        let assignment = p.peek_at(1) == Some(&Tok::Sym('='));
        if !assignment {
            p.pos += 1;
            match head.as_str() {
                "syntax" => {
                    if saw_line {
                        return Err(p.err("syntax must be declared before any line"));
                    }
                    let s = p.ident()?;
                    sk.syntax = match s.as_str() {
                        "original" => Syntax::Original,
                        "extended" => Syntax::Extended,
                        _ => {
                            p.pos -= 1;
                            return Err(p.err("expected 'original' or 'extended'"));
                        }
                    };
                    p.end()?;
                }
                "input" => {
                    let kind = p.ident()?;
                    let name_col = p.pos;
                    let name = p.ident()?;
                    if names.contains_key(&name) {
                        p.pos = name_col;
                        return Err(p.err(format!("'{name}' is already defined")));
                    }
                    let line = match kind.as_str() {
                        "vec" => {
                            let hint = if p.eat(':') { Some(p.ident()?) } else { None };
                            Line::VecIn { hint }
                        }
                        "mat" => {
                            if p.eat(':') {
                                let r = p.ident()?;
                                p.keyword("x")?;
                                let c = p.ident()?;
                                Line::MatIn { rows: Some(r), cols: Some(c) }
                            } else {
                                Line::MatIn { rows: None, cols: None }
                            }
                        }
                        _ => {
                            p.pos -= 2;
                            return Err(p.err("expected 'vec' or 'mat'"));
                        }
                    };
                    p.end()?;
                    let v = sk.push_unchecked(name.clone(), line);
                    names.insert(name, v);
                    saw_line = true;
                }
                "trans" => {
                    let name = p.ident()?;
                    if names.contains_key(&name) {
                        p.pos -= 1;
                        return Err(p.err(format!("'{name}' is already defined")));
                    }
                    p.expect('=')?;
                    let src = p.var()?;
                    p.end()?;
                    let v = sk.push_unchecked(name.clone(), Line::Transpose { source: src });
                    names.insert(name, v);
                    saw_line = true;
                }
                "constrain" => {
                    p.keyword("dim")?;
                    p.expect('(')?;
                    let a = p.var()?;
                    p.expect(')')?;
                    p.expect('=')?;
                    p.keyword("dim")?;
                    p.expect('(')?;
                    let b = p.var()?;
                    p.expect(')')?;
                    p.end()?;
                    constraints.push((a, b));
                }
                "sigma" => {
                    let m = p.var()?;
                    p.expect('=')?;
                    let value = p.number()?;
                    p.end()?;
                    directives.push(Directive::Sigma { matrix: m, value });
                }
                "mean" => {
                    let var = p.var()?;
                    p.expect('=')?;
                    let value = p.number()?;
                    p.end()?;
                    directives.push(Directive::Mean { var, value });
                }
                "cov" => {
                    let a = p.var()?;
                    let b = p.var()?;
                    p.expect('=')?;
                    let value = p.number()?;
                    p.end()?;
                    directives.push(Directive::Cov { a, b, value });
                }
                "scale" => {
                    let target = p.dim_ref()?;
                    p.expect('=')?;
                    let value = p.number()?;
                    p.end()?;
                    directives.push(Directive::Scale { target, value });
                }
                "width" => {
                    let target = p.dim_ref()?;
                    p.expect('=')?;
                    let value = p.number()?;
                    if value < 1.0 || value.fract() != 0.0 {
                        p.pos -= 1;
                        return Err(p.err("width must be a positive integer"));
                    }
                    p.end()?;
                    directives.push(Directive::Width { target, value: value as usize });
                }
                "observe" => {
                    let name = p.ident()?;
                    p.expect('=')?;
                    let col = p.toks.get(p.pos).map(|t| t.1).unwrap_or(1);
                    let rest: String = raw.chars().skip(col - 1).collect();
                    let rest = rest.split('#').next().unwrap_or("");
                    let d = parse_expr(rest, &|s| names.get(s).copied()).map_err(|e| match e {
                        TpError::Parse { col: c, msg, .. } => TpError::Parse { line: ln, col: col + c.max(1) - 1, msg },
                        e => e,
                    })?;
                    observables.push((name, d));
                }
                _ => {
                    p.pos = 0;
                    return Err(p.err(format!("unknown statement '{head}'")));
                }
            }
            continue;
        }
        // Assignment.
        p.pos = 2;
        if names.contains_key(&head) {
            p.pos = 0;
            return Err(p.err(format!("'{head}' is already defined")));
        }
        let line = parse_rhs(&mut p, sk.syntax)?;
        let v = sk.push_unchecked(head.clone(), line);
        names.insert(head, v);
        saw_line = true;
    }
    Ok(ProgramText { skeleton: sk, constraints, directives, observables })
}

fn parse_rhs(p: &mut LineParser, syntax: Syntax) -> Result<Line> {
    // Matrix multiplication: A * v with A an A-var.
    if let (Some(Tok::Ident(a)), Some(Tok::Sym('*')), Some(Tok::Ident(_))) =
        (p.peek().cloned(), p.peek_at(1).cloned(), p.peek_at(2).cloned())
    {
        if let Some(m) = p.names.get(&a).copied() {
            if m.is_a() {
                p.pos += 2;
                let arg = p.var()?;
                p.end()?;
                return Ok(Line::MatMul { matrix: m, arg });
            }
        }
    }
    // Function call.
    if let (Some(Tok::Ident(f)), Some(Tok::Sym(c))) = (p.peek().cloned(), p.peek_at(1).cloned()) {
        if (c == '(' || c == '[') && !p.names.contains_key(&f) {
            let fcol = p.pos;
            p.pos += 1;
            let mut params = vec![];
            if p.eat('[') {
                loop {
                    params.push(p.number()?);
                    if p.eat(']') {
                        break;
                    }
                    p.expect(',')?;
                }
            }
            p.expect('(')?;
            let mut args = vec![];
            loop {
                args.push(p.var()?);
                if p.eat(')') {
                    break;
                }
                p.expect(',')?;
            }
            p.end()?;
            let func = Func::resolve(&NonlinRef { name: f, params }).map_err(|e| {
                p.pos = fcol;
                p.err(e.to_string())
            })?;
            if args.iter().all(|a| a.is_g()) {
                return Ok(Line::Nonlin { f: func, args });
            }
            if syntax == Syntax::Original {
                p.pos = fcol;
                return Err(p.err("general composition is only allowed in extended syntax"));
            }
            return Ok(Line::Comp { f: func, args });
        }
    }
    // Linear combination.
    let mut terms = vec![];
    let mut sign = 1.0;
    if p.eat('-') {
        sign = -1.0;
    }
    loop {
        let coef = match p.peek().cloned() {
            Some(Tok::Num(_)) | Some(Tok::Sym('-')) | Some(Tok::Sym('+')) => {
                let c = p.number()?;
                p.expect('*')?;
                c
            }
            _ => 1.0,
        };
        let v = p.var()?;
        terms.push((sign * coef, v));
        if p.eat('+') {
            sign = 1.0;
        } else if p.eat('-') {
            sign = -1.0;
        } else {
            break;
        }
    }
    p.end()?;
    if terms.iter().any(|t| t.1.is_h()) {
        if syntax == Syntax::Original {
            p.pos = 2;
            return Err(p.err("linear combination of H-vars is only allowed in extended syntax"));
        }
        return Ok(Line::Comp { f: Func::Lin(terms.iter().map(|t| t.0).collect()), args: terms.iter().map(|t| t.1).collect() });
    }
    Ok(Line::LinComb { terms })
}

/// Canonical number format: 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn render_call(sk: &Skeleton, f: &Func, args: &[VarId]) -> String {
    let r = f.to_ref();
    let a: Vec<&str> = args.iter().map(|v| sk.name(*v)).collect();
    if r.params.is_empty() {
        format!("{}({})", r.name, a.join(", "))
    } else {
        let ps: Vec<String> = r.params.iter().map(|x| fmt_num(*x)).collect();
        format!("{}[{}]({})", r.name, ps.join(", "), a.join(", "))
    }
}

pub fn render_line(sk: &Skeleton, v: VarId) -> String {
    let d = sk.decl(v);
    match &d.line {
        Line::VecIn { hint } => match hint {
            Some(h) => format!("input vec {} : {}", d.name, h),
            None => format!("input vec {}", d.name),
        },
        Line::MatIn { rows, cols } => match (rows, cols) {
            (Some(r), Some(c)) => format!("input mat {} : {} x {}", d.name, r, c),
            _ => format!("input mat {}", d.name),
        },
        Line::Transpose { source } => format!("trans {} = {}", d.name, sk.name(*source)),
        Line::MatMul { matrix, arg } => format!("{} = {} * {}", d.name, sk.name(*matrix), sk.name(*arg)),
        Line::LinComb { terms } => {
            let t: Vec<String> = terms.iter().map(|(c, v)| format!("{}*{}", fmt_num(*c), sk.name(*v))).collect();
            format!("{} = {}", d.name, t.join(" + "))
        }
        Line::Nonlin { f, args } | Line::Comp { f, args } => format!("{} = {}", d.name, render_call(sk, f, args)),
    }
}

pub fn render_program(sk: &Skeleton, lam: &DimConstraints) -> String {
    let mut out = String::new();
    out.push_str(match sk.syntax {
        Syntax::Original => "syntax original\n",
        Syntax::Extended => "syntax extended\n",
    });
    for v in sk.vars() {
        out.push_str(&render_line(sk, v));
        out.push('\n');
    }
    for (a, b) in lam {
        out.push_str(&format!("constrain dim({}) = dim({})\n", sk.name(*a), sk.name(*b)));
    }
    out
}
