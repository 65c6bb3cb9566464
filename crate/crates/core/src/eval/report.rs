//! Report files derived from a run's `metrics.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::errors::ErrorHistogram;
use super::metrics::{avg_metrics, bwt, forgetting_curve, new_vs_old, Averages, Cell, MetricMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewOld {
    pub i: usize,
    pub new: f64,
    pub old: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub complete: bool,
    pub matrix: MetricMatrix,
    pub avg: Option<Averages>,
    pub bwt: Option<f64>,
    /// `curves[j]` = MRR on test_j after each snapshot ≥ j.
    pub curves: Vec<Vec<f64>>,
    pub new_vs_old: Vec<NewOld>,
    pub errors: Option<ErrorHistogram>,
}

impl Report {
    pub fn from_matrix(matrix: MetricMatrix, errors: Option<ErrorHistogram>) -> Self {
        let n = matrix.len();
        Report {
            complete: matrix.is_complete(),
            avg: avg_metrics(&matrix),
            bwt: bwt(&matrix),
            curves: (0..n).map(|j| forgetting_curve(&matrix, j)).collect(),
            new_vs_old: (0..n)
                .filter_map(|i| new_vs_old(&matrix, i).map(|(new, old)| NewOld { i, new, old }))
                .collect(),
            errors,
            matrix,
        }
    }
}

const METRICS: [&str; 4] = ["mrr", "hits1", "hits3", "hits10"];

fn cell_values(c: &Cell) -> [f64; 4] {
    [c.mrr, c.hits1, c.hits3, c.hits10]
}

/// Long-form `i,j,metric,value` table.
pub fn matrix_csv(m: &MetricMatrix) -> String {
    let mut s = String::from("i,j,metric,value\n");
    for (i, row) in m.rows.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            for (name, v) in METRICS.iter().zip(cell_values(c)) {
                writeln!(s, "{i},{j},{name},{v}").unwrap();
            }
            writeln!(s, "{i},{j},queries,{}", c.queries).unwrap();
        }
    }
    s
}

/// Inverse of [`matrix_csv`]; `snapshots` is not stored in the CSV.
pub fn parse_matrix_csv(text: &str, snapshots: usize) -> Result<MetricMatrix> {
    let mut m = MetricMatrix::new(snapshots);
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::parse("report.csv", n + 1, format!("bad row '{line}'"));
        if f.len() != 4 {
            return Err(bad());
        }
        let i: usize = f[0].parse().map_err(|_| bad())?;
        let j: usize = f[1].parse().map_err(|_| bad())?;
        let v: f64 = f[3].parse().map_err(|_| bad())?;
        while m.rows.len() <= i {
            let k = m.rows.len();
            m.rows.push(vec![Cell::default(); k + 1]);
        }
        let c = m.rows[i].get_mut(j).ok_or_else(bad)?;
        match f[2] {
            "mrr" => c.mrr = v,
            "hits1" => c.hits1 = v,
            "hits3" => c.hits3 = v,
            "hits10" => c.hits10 = v,
            "queries" => c.queries = v as usize,
            _ => return Err(bad()),
        }
    }
    Ok(m)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<MetricMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `report.csv` or `report.json` plus `plots/*.csv` into `run_dir`.
pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<Report> {
    let matrix = read_matrix(&run_dir.join("metrics.json"))?;
    let errors_path = run_dir.join("errors.json");
    let errors = if errors_path.exists() {
        let text = fs::read_to_string(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::json(&errors_path, e))?)
    } else {
        None
    };
    let report = Report::from_matrix(matrix, errors);
    match format {
        ReportFormat::Csv => write(&run_dir.join("report.csv"), &matrix_csv(&report.matrix))?,
        ReportFormat::Json => {
            let p = run_dir.join("report.json");
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&p, e))?;
            write(&p, &text)?;
        }
    }
    let plots = run_dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    for (j, curve) in report.curves.iter().enumerate() {
        let mut s = String::from("i,mrr\n");
        for (k, v) in curve.iter().enumerate() {
            writeln!(s, "{},{v}", j + k).unwrap();
        }
        write(&plots.join(format!("forgetting_s{j}.csv")), &s)?;
    }
    let mut s = String::from("i,mrr_new,mrr_old\n");
    for r in &report.new_vs_old {
        let old = r.old.map_or(String::new(), |v| v.to_string());
        writeln!(s, "{},{},{old}", r.i, r.new).unwrap();
    }
    write(&plots.join("new_vs_old.csv"), &s)?;
    let mut s = String::from("i,hits1_mean\n");
    for (i, row) in report.matrix.rows.iter().enumerate() {
        let h = row.iter().map(|c| c.hits1).sum::<f64>() / row.len() as f64;
        writeln!(s, "{i},{h}").unwrap();
    }
    write(&plots.join("hits1.csv"), &s)?;
    if let Some(e) = &report.errors {
        let mut s = String::from("category,count\n");
        for (k, v) in &e.counts {
            let name = serde_json::to_string(k).unwrap_or_default();
            writeln!(s, "{},{v}", name.trim_matches('"')).unwrap();
        }
        write(&plots.join("errors.csv"), &s)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricMatrix {
        let mut m = MetricMatrix::new(3);
        m.push_row(vec![Cell::from_ranks(&[1.0, 2.0])]).unwrap();
        m.push_row(vec![Cell::from_ranks(&[3.0]), Cell::from_ranks(&[1.0, 1.5, 12.0])])
            .unwrap();
        m
    }

    #[test]
    fn empty_matrix_gives_header_only() {
        assert_eq!(matrix_csv(&MetricMatrix::new(2)), "i,j,metric,value\n");
    }

    #[test]
    fn csv_round_trip() {
        let m = sample();
        assert_eq!(parse_matrix_csv(&matrix_csv(&m), 3).unwrap(), m);
    }

    #[test]
    fn emits_partial_run() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        fs::write(dir.path().join("metrics.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let r = emit_report(dir.path(), ReportFormat::Json).unwrap();
        assert!(!r.complete);
        emit_report(dir.path(), ReportFormat::Csv).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let json: Report = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(parse_matrix_csv(&csv, 3).unwrap(), json.matrix);
        assert!(dir.path().join("plots/forgetting_s0.csv").exists());
        assert_eq!(r.curves[0].len(), 2);
    }
}
