//! Report emission: raw rows and aggregate tables as CSV and JSON with a
//! frozen column schema for downstream plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::runner::{MetricsRow, TradeoffRow};

pub const ROW_HEADER: &str = "algorithm,corruption,intensity,seed,accuracy,ece,mean_entropy_bits,mean_certainty,memory_params,memory_bytes";

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(ROW_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.algorithm,
            r.corruption,
            r.intensity,
            r.seed,
            r.accuracy,
            r.ece,
            r.mean_entropy_bits,
            r.mean_certainty,
            r.memory_params,
            r.memory_bytes
        ));
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROW_HEADER => {}
        _ => return Err(Error::Input("unexpected rows header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Input(format!("row {}: expected 10 fields", i + 2)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Input(format!("row {}: bad number '{s}'", i + 2)))
        };
        rows.push(MetricsRow {
            algorithm: f[0].into(),
            corruption: f[1].into(),
            intensity: f[2]
                .parse()
                .map_err(|_| Error::Input(format!("row {}: bad intensity", i + 2)))?,
            seed: f[3]
                .parse()
                .map_err(|_| Error::Input(format!("row {}: bad seed", i + 2)))?,
            accuracy: parse(f[4])?,
            ece: parse(f[5])?,
            mean_entropy_bits: parse(f[6])?,
            mean_certainty: parse(f[7])?,
            memory_params: f[8]
                .parse()
                .map_err(|_| Error::Input(format!("row {}: bad memory", i + 2)))?,
            memory_bytes: f[9]
                .parse()
                .map_err(|_| Error::Input(format!("row {}: bad memory", i + 2)))?,
        });
    }
    Ok(rows)
}

/// Per-algorithm aggregate: seed means per domain first, then the mean over
/// domains, with the across-domain variance of the domain means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub algorithm: String,
    pub domains: usize,
    pub accuracy_mean: f64,
    pub ece_mean: f64,
    pub entropy_mean: f64,
    pub accuracy_sigma2: f64,
    pub ece_sigma2: f64,
    pub entropy_sigma2: f64,
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn population_variance(vals: &[f64]) -> f64 {
    let m = mean(vals);
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

pub fn aggregate(rows: &[MetricsRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::Input("no rows to aggregate".into()));
    }
    // Stable ordering: first appearance order of algorithms and domains.
    let mut algorithms: Vec<String> = Vec::new();
    for r in rows {
        if !algorithms.contains(&r.algorithm) {
            algorithms.push(r.algorithm.clone());
        }
    }
    let mut out = Vec::new();
    for algo in algorithms {
        let algo_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.algorithm == algo).collect();
        let mut domains: Vec<(String, u8)> = Vec::new();
        for r in &algo_rows {
            let key = (r.corruption.clone(), r.intensity);
            if !domains.contains(&key) {
                domains.push(key);
            }
        }
        let mut acc_means = Vec::new();
        let mut ece_means = Vec::new();
        let mut ent_means = Vec::new();
        for (corruption, intensity) in &domains {
            let cell: Vec<&&MetricsRow> = algo_rows
                .iter()
                .filter(|r| r.corruption == *corruption && r.intensity == *intensity)
                .collect();
            acc_means.push(mean(&cell.iter().map(|r| r.accuracy).collect::<Vec<_>>()));
            ece_means.push(mean(&cell.iter().map(|r| r.ece).collect::<Vec<_>>()));
            ent_means.push(mean(
                &cell.iter().map(|r| r.mean_entropy_bits).collect::<Vec<_>>(),
            ));
        }
        out.push(AggregateRow {
            algorithm: algo,
            domains: domains.len(),
            accuracy_mean: mean(&acc_means),
            ece_mean: mean(&ece_means),
            entropy_mean: mean(&ent_means),
            accuracy_sigma2: population_variance(&acc_means),
            ece_sigma2: population_variance(&ece_means),
            entropy_sigma2: population_variance(&ent_means),
        });
    }
    Ok(out)
}

pub const AGGREGATE_HEADER: &str = "algorithm,domains,accuracy_mean,ece_mean,entropy_mean,accuracy_sigma2,ece_sigma2,entropy_sigma2";

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.algorithm,
            r.domains,
            r.accuracy_mean,
            r.ece_mean,
            r.entropy_mean,
            r.accuracy_sigma2,
            r.ece_sigma2,
            r.entropy_sigma2
        ));
    }
    out
}

pub const TRADEOFF_HEADER: &str =
    "algorithm,parameter,value,accuracy,ece,memory_params,memory_bytes";

pub fn tradeoff_to_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from(TRADEOFF_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.algorithm, r.parameter, r.value, r.accuracy, r.ece, r.memory_params, r.memory_bytes
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Parameter(format!("unknown format '{other}'"))),
        }
    }
}

/// Write rows plus their aggregate table in the requested format.
pub fn emit_report(
    rows: &[MetricsRow],
    format: ReportFormat,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Input("no rows to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let agg = aggregate(rows)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let rows_path = out_dir.join(format!("{stem}_rows.csv"));
            std::fs::write(&rows_path, rows_to_csv(rows))?;
            let agg_path = out_dir.join(format!("{stem}_aggregate.csv"));
            std::fs::write(&agg_path, aggregate_to_csv(&agg))?;
            written.push(rows_path);
            written.push(agg_path);
        }
        ReportFormat::Json => {
            let rows_path = out_dir.join(format!("{stem}_rows.json"));
            std::fs::write(
                &rows_path,
                serde_json::to_string_pretty(rows)
                    .map_err(|e| Error::Config(e.to_string()))?,
            )?;
            let agg_path = out_dir.join(format!("{stem}_aggregate.json"));
            std::fs::write(
                &agg_path,
                serde_json::to_string_pretty(&agg)
                    .map_err(|e| Error::Config(e.to_string()))?,
            )?;
            written.push(rows_path);
            written.push(agg_path);
        }
    }
    Ok(written)
}
