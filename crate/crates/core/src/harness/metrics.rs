//! Per-round metrics and their CSV form.
//!
//! The file starts with a schema line, then a header, then one row per round:
//!
//! ```text
//! # sfl-metrics v1 fingerprint=<hex>
//! round,accuracy,loss,arm,gamma,rule
//! 0,0.431,1.70,inv-std,3.25,median
//! ```
//!
//! `arm` and `gamma` are empty for rounds without a Min-Sum upload. For Krum
//! the `rule` column carries the selected client ids as
//! `krum[top=<id>;bottom=<id>]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::Arm;
use crate::error::{Result, SflError};

pub const SCHEMA_LINE: &str = "# sfl-metrics v1";
pub const HEADER: &str = "round,accuracy,loss,arm,gamma,rule";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test accuracy after the round.
    pub accuracy: f64,
    /// Mean test cross-entropy after the round.
    pub loss: f64,
    pub arm: Option<String>,
    pub gamma: Option<f64>,
    pub rule: String,
}

impl RoundMetrics {
    pub fn arm(&self) -> Option<Arm> {
        self.arm.as_deref().and_then(|a| a.parse().ok())
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.loss,
            self.arm.as_deref().unwrap_or(""),
            self.gamma.map(|g| g.to_string()).unwrap_or_default(),
            self.rule
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = |m: &str| SflError::InvalidArgument(format!("bad metrics row `{line}`: {m}"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad("not a number"));
        Ok(Self {
            round: cols[0].parse().map_err(|_| bad("round"))?,
            accuracy: float(cols[1])?,
            loss: float(cols[2])?,
            arm: (!cols[3].is_empty()).then(|| cols[3].to_string()),
            gamma: if cols[4].is_empty() { None } else { Some(float(cols[4])?) },
            rule: cols[5].to_string(),
        })
    }
}

/// Append-only writer that flushes after every row so a crashed run keeps
/// every completed round.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, fingerprint: &str) -> Result<Self> {
        if let Some(parent) = path.as_ref().parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{SCHEMA_LINE} fingerprint={fingerprint}")?;
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &RoundMetrics) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a metrics file back, checking the schema line and header.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let schema = lines.next().transpose()?.unwrap_or_default();
    if !schema.starts_with(SCHEMA_LINE) {
        return Err(SflError::InvalidArgument(format!("unknown metrics schema `{schema}`")));
    }
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != HEADER {
        return Err(SflError::InvalidArgument(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            rows.push(RoundMetrics::parse_csv_row(&line)?);
        }
    }
    Ok(rows)
}
