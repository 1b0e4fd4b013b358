//! CSV ingestion for telemetry and capacity files.
//!
//! Telemetry files carry a header with a timestamp column (RFC 3339 or epoch
//! seconds), a node id column, a power column, and zero or more numeric
//! covariate columns. Rows with unparseable or missing required fields are
//! dropped and counted, never silently ignored. Inputs are assumed
//! pre-resampled to one slot cadence; no resampling or imputation happens
//! here.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{CapeError, Result};

/// Column-name mapping for telemetry CSVs. Any column not named here is
/// treated as a numeric covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub node_id: String,
    pub power: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            node_id: "node_id".into(),
            power: "power".into(),
        }
    }
}

/// What happened during a load: kept and dropped row counts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_kept: u64,
    pub rows_dropped: u64,
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(epoch) = raw.parse::<i64>() {
        return Some(epoch);
    }
    DateTime::parse_from_rfc3339(raw).ok().map(|dt| dt.timestamp())
}

fn parse_float(raw: &str) -> Option<f64> {
    let v: f64 = raw.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

struct ParsedRow {
    timestamp: i64,
    node: String,
    power: f64,
    covariates: Vec<f64>,
}

fn read_file(
    path: &Path,
    schema: &CsvSchema,
    covariate_names: &mut Option<Vec<String>>,
    rows: &mut Vec<ParsedRow>,
    report: &mut LoadReport,
) -> Result<()> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CapeError::Schema(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CapeError::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_idx = find(&schema.timestamp).ok_or_else(|| {
        CapeError::Schema(format!(
            "{}: missing required column '{}'",
            path.display(),
            schema.timestamp
        ))
    })?;
    let node_idx = find(&schema.node_id).ok_or_else(|| {
        CapeError::Schema(format!(
            "{}: missing required column '{}'",
            path.display(),
            schema.node_id
        ))
    })?;
    let power_idx = find(&schema.power).ok_or_else(|| {
        CapeError::Schema(format!(
            "{}: missing required column '{}'",
            path.display(),
            schema.power
        ))
    })?;
    let cov_idx: Vec<usize> = (0..headers.len())
        .filter(|i| *i != ts_idx && *i != node_idx && *i != power_idx)
        .collect();
    let names: Vec<String> = cov_idx.iter().map(|i| headers[*i].to_string()).collect();
    match covariate_names {
        Some(existing) if *existing != names => {
            return Err(CapeError::Schema(format!(
                "{}: covariate columns {names:?} differ from previously seen {existing:?}",
                path.display()
            )));
        }
        Some(_) => {}
        None => *covariate_names = Some(names),
    }

    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.rows_dropped += 1;
                continue;
            }
        };
        let parsed = (|| {
            let timestamp = parse_timestamp(record.get(ts_idx)?)?;
            let node = record.get(node_idx)?.trim();
            if node.is_empty() {
                return None;
            }
            let power = parse_float(record.get(power_idx)?)?;
            if power < 0.0 {
                return None;
            }
            let mut covariates = Vec::with_capacity(cov_idx.len());
            for i in &cov_idx {
                covariates.push(parse_float(record.get(*i)?)?);
            }
            Some(ParsedRow {
                timestamp,
                node: node.to_string(),
                power,
                covariates,
            })
        })();
        match parsed {
            Some(row) => {
                report.rows_kept += 1;
                rows.push(row);
            }
            None => report.rows_dropped += 1,
        }
    }
    Ok(())
}

/// Loads telemetry from a CSV file or a directory of CSV files, one
/// [`RawSeries`] per node id, sorted by node id.
///
/// Within each node the row order of the input must already be chronological;
/// non-monotone timestamps are a data error, not silently repaired.
pub fn load_csv_dataset(
    path: &Path,
    schema: &CsvSchema,
    capacities: &BTreeMap<String, f64>,
) -> Result<(Vec<RawSeries>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut covariate_names: Option<Vec<String>> = None;
    let mut rows: Vec<ParsedRow> = Vec::new();

    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CapeError::Schema(format!(
                "{}: directory contains no .csv files",
                path.display()
            )));
        }
        for f in files {
            read_file(&f, schema, &mut covariate_names, &mut rows, &mut report)?;
        }
    } else {
        read_file(path, schema, &mut covariate_names, &mut rows, &mut report)?;
    }

    let covariate_names = covariate_names.unwrap_or_default();
    let mut by_node: BTreeMap<String, Vec<ParsedRow>> = BTreeMap::new();
    for row in rows {
        by_node.entry(row.node.clone()).or_default().push(row);
    }

    let mut out = Vec::with_capacity(by_node.len());
    for (node_id, rows) in by_node {
        let capacity = *capacities.get(&node_id).ok_or_else(|| {
            CapeError::Schema(format!("no capacity entry for node '{node_id}'"))
        })?;
        let series = RawSeries {
            node_id,
            timestamps: rows.iter().map(|r| r.timestamp).collect(),
            power: rows.iter().map(|r| r.power).collect(),
            covariate_names: covariate_names.clone(),
            covariates: (0..covariate_names.len())
                .map(|c| rows.iter().map(|r| r.covariates[c]).collect())
                .collect(),
            capacity,
        };
        series.validate()?;
        out.push(series);
    }
    Ok((out, report))
}

/// Loads a `node_id,capacity` CSV.
pub fn load_capacities(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CapeError::Schema(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CapeError::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let node_idx = headers.iter().position(|h| h == "node_id").ok_or_else(|| {
        CapeError::Schema(format!("{}: missing column 'node_id'", path.display()))
    })?;
    let cap_idx = headers.iter().position(|h| h == "capacity").ok_or_else(|| {
        CapeError::Schema(format!("{}: missing column 'capacity'", path.display()))
    })?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CapeError::Schema(format!("{}: {e}", path.display())))?;
        let node = record
            .get(node_idx)
            .ok_or_else(|| CapeError::Schema("short capacity row".into()))?
            .trim()
            .to_string();
        let cap: f64 = record
            .get(cap_idx)
            .and_then(parse_float)
            .ok_or_else(|| CapeError::Schema(format!("bad capacity for node '{node}'")))?;
        if cap <= 0.0 {
            return Err(CapeError::Schema(format!(
                "capacity for node '{node}' must be positive, got {cap}"
            )));
        }
        out.insert(node, cap);
    }
    Ok(out)
}
