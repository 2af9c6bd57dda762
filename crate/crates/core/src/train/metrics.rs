//! JSON-lines metric stream: one line per training step or evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub task: String,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_nce: f64,
    pub loss_pmae: f64,
    pub lr: f64,
    pub flops_gf: f64,
    pub wall_ms: f64,
    pub m: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval: bool,
    pub step: u64,
    pub task: String,
    pub metric_name: String,
    pub value: f64,
}

/// Collects lines in memory and optionally mirrors them to a file.
#[derive(Debug, Default)]
pub struct MetricLog {
    lines: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path)?;
        Ok(Self { lines: Vec::new(), sink: Some(BufWriter::new(f)) })
    }

    fn push_line(&mut self, line: String) -> Result<()> {
        if let Some(w) = &mut self.sink {
            writeln!(w, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn step(&mut self, rec: &StepRecord) -> Result<()> {
        self.push_line(serde_json::to_string(rec)?)
    }

    pub fn eval(&mut self, rec: &EvalRecord) -> Result<()> {
        self.push_line(serde_json::to_string(rec)?)
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }
}

/// A log line with its timing field removed, for run-to-run comparison.
pub fn without_wall_time(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_ms");
    }
    Ok(v.to_string())
}
