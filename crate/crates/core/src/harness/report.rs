//! CSV and JSON emitters. Column order is fixed and floats carry 6 decimals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deny::EvalReport;
use crate::{Error, Result};

pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

/// A table with a fixed header and pre-formatted cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Dimension(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub const EVAL_COLUMNS: [&str; 10] = [
    "run_id",
    "protocol",
    "top1",
    "semantic_acc",
    "reject_mass",
    "mean_entropy",
    "aux_reject_mean",
    "seed",
    "split",
    "config_hash",
];

/// One evaluation row with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub report: EvalReport,
}

pub fn eval_table(rows: &[EvalRow]) -> Result<Table> {
    let mut t = Table::new(&EVAL_COLUMNS);
    for r in rows {
        t.push(vec![
            r.run_id.clone(),
            r.report.protocol.name().to_string(),
            fmt6(r.report.top1),
            fmt6(r.report.semantic_acc),
            fmt6(r.report.reject_mass),
            fmt6(r.report.mean_entropy),
            fmt_opt(r.report.aux_reject_mean),
            r.seed.to_string(),
            r.split.clone(),
            r.config_hash.clone(),
        ])?;
    }
    Ok(t)
}

pub const THEORY_COLUMNS: [&str; 6] = ["check", "params", "theoretical", "empirical", "tolerance", "pass"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub params: String,
    pub theoretical: f64,
    pub empirical: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn check_table(rows: &[CheckRow]) -> Result<Table> {
    let mut t = Table::new(&THEORY_COLUMNS);
    for r in rows {
        t.push(vec![
            r.check.clone(),
            r.params.clone(),
            format!("{:.6e}", r.theoretical),
            format!("{:.6e}", r.empirical),
            format!("{:.6e}", r.tolerance),
            r.pass.to_string(),
        ])?;
    }
    Ok(t)
}
