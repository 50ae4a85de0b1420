//! Report files: CSV tables and JSON documents.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalReport, EvalRow};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "method,category,variant,n,accuracy,external_accuracy,mean_gate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension().and_then(|e| e.to_str()).unwrap_or("").parse()
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Validation(format!("unknown report format '{s}', expected csv or json"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// The table of `rows`; absent optionals are empty fields.
pub fn rows_to_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Format(format!("unexpected CSV header '{}'", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => rows_to_csv(&report.rows)?,
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Read a report written by [`emit_report`]; the format follows the file
/// extension. A CSV report carries rows only, so `config` is null and `seed` 0.
pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    match ReportFormat::from_path(path)? {
        ReportFormat::Json => Ok(serde_json::from_str(&text)?),
        ReportFormat::Csv => Ok(EvalReport { rows: rows_from_csv(&text)?, config: serde_json::Value::Null, seed: 0 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Category, Variant};
    use crate::eval::Method;

    fn report() -> EvalReport {
        let rows = vec![
            EvalRow {
                method: Method::Base,
                category: Category::Matched,
                variant: Variant::Short,
                n: 46,
                accuracy: 45.0 / 46.0,
                external_accuracy: None,
                mean_gate: None,
            },
            EvalRow {
                method: Method::Grft,
                category: Category::Contradictory,
                variant: Variant::Long,
                n: 7,
                accuracy: 0.1 + 0.2,
                external_accuracy: Some(1.0 / 3.0),
                mean_gate: Some(0.7310585786300049),
            },
            EvalRow {
                method: Method::Grft,
                category: Category::UnhelpfulRandom,
                variant: Variant::Random,
                n: 1,
                accuracy: 0.0,
                external_accuracy: None,
                mean_gate: Some(1e-300),
            },
        ];
        EvalReport { rows, config: serde_json::json!({"train": {"lr": 0.001}}), seed: 11 }
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let r = report();
        let text = rows_to_csv(&r.rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,category,variant,n,accuracy,external_accuracy,mean_gate");
        assert_eq!(lines.len(), 1 + r.rows.len());
        assert_eq!(lines[1], "base,matched,short,46,0.9782608695652174,,");
        assert!(lines[3].starts_with("grft,unhelpful_random,random,1,0.0,,"));
        assert_eq!(rows_from_csv(&text).unwrap(), r.rows);
        assert!(rows_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let json = dir.path().join("r.json");
        emit_report(&r, &json, ReportFormat::Json).unwrap();
        assert_eq!(load_report(&json).unwrap(), r);
        let csv = dir.path().join("r.csv");
        emit_report(&r, &csv, ReportFormat::from_path(&csv).unwrap()).unwrap();
        assert_eq!(rows_from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap(), r.rows);
        assert_eq!(load_report(&csv).unwrap().rows, r.rows);
        assert!(ReportFormat::from_path(std::path::Path::new("r.txt")).is_err());
        let missing = dir.path().join("nope").join("r.json");
        assert!(matches!(emit_report(&r, &missing, ReportFormat::Json), Err(Error::Io(_))));
    }
}
