use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};
use tp_core::simulate::mean_stderr;
use tp_core::{Result, TpError};

/// One report row. Missing values are `null` in JSON and empty in CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub quantity: String,
    pub width: Option<usize>,
    pub empirical: Option<f64>,
    pub stderr: Option<f64>,
    pub theory: Option<f64>,
    pub rel_err: Option<f64>,
    pub naive: Option<f64>,
    pub detransposed: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Row {
    pub fn theory(quantity: impl Into<String>, theory: f64) -> Self {
        Row {
            quantity: quantity.into(),
            width: None,
            empirical: None,
            stderr: None,
            theory: finite(theory),
            rel_err: None,
            naive: None,
            detransposed: None,
        }
    }

    pub fn sampled(quantity: impl Into<String>, width: usize, samples: &[f64], theory: Option<f64>) -> Self {
        let (m, se) = mean_stderr(samples);
        Row::measured(quantity, width, m, se, theory)
    }

    pub fn measured(quantity: impl Into<String>, width: usize, empirical: f64, stderr: f64, theory: Option<f64>) -> Self {
        let mut r = Row::theory(quantity, f64::NAN);
        r.width = Some(width);
        r.empirical = finite(empirical);
        r.stderr = finite(stderr);
        r.set_theory(theory);
        r
    }

    pub fn set_theory(&mut self, theory: Option<f64>) {
        self.theory = theory.and_then(finite);
        self.rel_err = match (self.empirical, self.theory) {
            (Some(e), Some(t)) if t != 0.0 => Some((e - t).abs() / t.abs()),
            _ => None,
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub program: Value,
    pub spec: Value,
    pub rows: Vec<Row>,
    pub diagnostics: Vec<String>,
    /// Command-specific sections.
    pub extra: Map<String, Value>,
}

impl Report {
    pub fn new(program: Value, spec: Value) -> Self {
        Report { program, spec, rows: vec![], diagnostics: vec![], extra: Map::new() }
    }

    pub fn to_json(&self) -> Value {
        let mut out = self.extra.clone();
        out.insert("program".into(), self.program.clone());
        out.insert("spec".into(), self.spec.clone());
        out.insert("rows".into(), serde_json::to_value(&self.rows).unwrap_or(Value::Null));
        out.insert("diagnostics".into(), json!(self.diagnostics));
        out.insert("versions".into(), json!({"tp-cli": env!("CARGO_PKG_VERSION"), "tp-core": tp_core::VERSION}));
        Value::Object(out)
    }

    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).unwrap_or_default();
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        if self.rows.is_empty() {
            w.write_record(["quantity", "width", "empirical", "stderr", "theory", "rel_err", "naive", "detransposed"])
                .map_err(io)?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn io(e: impl std::fmt::Display) -> TpError {
    TpError::Io(e.to_string())
}

/// Write to `path`, or to stdout when absent.
pub fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(io)?;
            out.flush().map_err(io)
        }
    }
}
