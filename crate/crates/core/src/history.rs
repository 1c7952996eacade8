//! Per-epoch metrics, JSONL persistence, CSV curve export and ensemble
//! file summaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::consistency::EnsembleState;
use crate::error::{Error, Result};
use crate::schedules::Algorithm;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub w: f64,
    pub beta1: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    /// Error on the labeled training items; `None` when not evaluated.
    pub train_err: Option<f64>,
    pub test_err: Option<f64>,
    pub wall_time: f64,
    /// Items pushed through the network during the epoch, counting each
    /// branch separately.
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub algorithm: Option<Algorithm>,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        RunHistory {
            algorithm: Some(algorithm),
            seed,
            records: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn final_test_err(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_err)
    }

    pub fn total_forward_passes(&self) -> u64 {
        self.records.iter().map(|r| r.forward_passes).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).map_err(|e| {
                Error::format(path.display().to_string(), format!("line {}: {e}", i + 1))
            })?);
        }
        Ok(RunHistory {
            algorithm: None,
            seed: 0,
            records,
        })
    }
}

/// CSV text plus any non-fatal alignment problems.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveExport {
    pub csv: String,
    pub warnings: Vec<String>,
}

const SINGLE_COLUMNS: [&str; 5] = ["epoch", "train_err", "test_err", "w", "lr"];

/// One history gives `epoch,train_err,test_err,w,lr`; several give `epoch`
/// plus one `test_err` column per file, named after the file stem. Values
/// are copied from the JSON text as-is; missing values become empty cells.
pub fn export_curves(paths: &[PathBuf]) -> Result<CurveExport> {
    if paths.is_empty() {
        return Err(Error::config("export-curves needs at least one history file"));
    }
    let mut runs = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut rows: Vec<serde_json::Map<String, Value>> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(m)) => rows.push(m),
                _ => {
                    return Err(Error::format(
                        p.display().to_string(),
                        format!("line {} is not a JSON object", i + 1),
                    ))
                }
            }
        }
        runs.push(rows);
    }
    let cell = |row: Option<&serde_json::Map<String, Value>>, key: &str| -> String {
        match row.and_then(|r| r.get(key)) {
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::String(s)) => s.clone(),
            _ => String::new(),
        }
    };
    let mut warnings = Vec::new();
    let mut csv = String::new();
    if runs.len() == 1 {
        csv.push_str(&SINGLE_COLUMNS.join(","));
        csv.push('\n');
        for row in &runs[0] {
            let cells: Vec<String> = SINGLE_COLUMNS.iter().map(|k| cell(Some(row), k)).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        return Ok(CurveExport { csv, warnings });
    }
    let lens: Vec<usize> = runs.iter().map(Vec::len).collect();
    let longest = lens.iter().copied().max().unwrap_or(0);
    for (p, &len) in paths.iter().zip(&lens) {
        if len != longest {
            warnings.push(format!(
                "{} has {len} epochs, longest run has {longest}; missing cells left empty",
                p.display()
            ));
        }
    }
    let names: Vec<String> = paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            format!("test_err_{stem}")
        })
        .collect();
    csv.push_str("epoch,");
    csv.push_str(&names.join(","));
    csv.push('\n');
    let longest_run = lens.iter().position(|&l| l == longest).unwrap_or(0);
    for e in 0..longest {
        let mut cells = vec![cell(runs[longest_run].get(e), "epoch")];
        cells.extend(runs.iter().map(|r| cell(r.get(e), "test_err")));
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    Ok(CurveExport { csv, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub rows: usize,
    pub classes: usize,
    pub alpha: f64,
    pub epoch: u64,
    /// Update count -> number of rows with that count.
    pub counter_histogram: BTreeMap<u64, usize>,
    /// Rows never updated.
    pub untouched_rows: usize,
    /// Rows never updated whose stored values are not all zero.
    pub untouched_nonzero_rows: usize,
    /// Row sums of the bias-corrected targets over updated rows.
    pub row_sum_min: Option<f64>,
    pub row_sum_max: Option<f64>,
    pub row_sum_mean: Option<f64>,
}

pub fn summarize_ensemble<R: Real>(state: &EnsembleState<R>) -> Result<EnsembleSummary> {
    let mut hist = BTreeMap::new();
    let mut sums = Vec::new();
    let mut untouched_nonzero = 0;
    for row in 0..state.rows() {
        *hist.entry(state.counter(row)).or_insert(0) += 1;
        match state.target_row(row)? {
            Some(t) => sums.push(t.iter().map(|v| v.as_f64()).sum::<f64>()),
            None => {
                if state.raw().item(row).iter().any(|v| *v != R::zero()) {
                    untouched_nonzero += 1;
                }
            }
        }
    }
    let stats = (!sums.is_empty()).then(|| {
        let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max, sums.iter().sum::<f64>() / sums.len() as f64)
    });
    Ok(EnsembleSummary {
        rows: state.rows(),
        classes: state.classes(),
        alpha: state.alpha(),
        epoch: state.epoch(),
        untouched_rows: hist.get(&0).copied().unwrap_or(0),
        counter_histogram: hist,
        untouched_nonzero_rows: untouched_nonzero,
        row_sum_min: stats.map(|s| s.0),
        row_sum_max: stats.map(|s| s.1),
        row_sum_mean: stats.map(|s| s.2),
    })
}

impl std::fmt::Display for EnsembleSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "rows     {}", self.rows)?;
        writeln!(f, "classes  {}", self.classes)?;
        writeln!(f, "alpha    {}", self.alpha)?;
        writeln!(f, "epoch    {}", self.epoch)?;
        writeln!(f, "updates  rows")?;
        for (k, v) in &self.counter_histogram {
            writeln!(f, "{k:>7}  {v}")?;
        }
        match (self.row_sum_min, self.row_sum_max, self.row_sum_mean) {
            (Some(lo), Some(hi), Some(mean)) => {
                write!(f, "corrected row sums: min {lo:.6} max {hi:.6} mean {mean:.6}")
            }
            _ => write!(f, "corrected row sums: no updated rows"),
        }
    }
}
