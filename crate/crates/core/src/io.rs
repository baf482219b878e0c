//! CSV readers and writers for partitions, count tables, metadata and
//! effect tables.
//!
//! All readers take the full document as text, expect a header row and use
//! `,` as separator and `.` as decimal mark.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::coda::{validate_sbp, CodaError, SbpMatrix};
use crate::mediation::{CohortData, MediationError, MediationEstimate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("line {line}, column {column:?}: {message}")]
    Field {
        line: u64,
        column: String,
        message: String,
    },
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Coda(#[from] CodaError),
    #[error(transparent)]
    Mediation(#[from] MediationError),
}

pub type Result<T> = std::result::Result<T, IoError>;

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IoError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(IoError::Layout("expected an id column and at least one data column".into()));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| IoError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(IoError::Layout("no data rows".into()));
    }
    Ok(Table { header, rows })
}

fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = seen.insert(n.as_str(), i) {
            return Err(IoError::Layout(format!("duplicate {what} {n:?} (positions {} and {})", j + 1, i + 1)));
        }
    }
    Ok(())
}

fn field_err(line: u64, column: &str, message: impl Into<String>) -> IoError {
    IoError::Field {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Partition matrix: header holds the balance names, the first column the
/// part labels, cells are -1, 0 or 1.
pub fn parse_sbp_csv(text: &str) -> Result<SbpMatrix> {
    let t = read_table(text)?;
    let balances: Vec<String> = t.header[1..].to_vec();
    let mut parts = Vec::with_capacity(t.rows.len());
    let mut entries = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        parts.push(row[0].clone());
        let vals = row[1..]
            .iter()
            .zip(&balances)
            .map(|(cell, col)| {
                cell.parse::<i64>()
                    .map_err(|_| field_err(*line, col, format!("{cell:?} is not an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(vals);
    }
    check_unique(&parts, "part label")?;
    check_unique(&balances, "balance name")?;
    Ok(validate_sbp(&entries, parts, Some(balances))?)
}

pub fn write_sbp_csv(sbp: &SbpMatrix) -> String {
    let mut out = String::from("part");
    for b in sbp.balance_labels() {
        out.push(',');
        out.push_str(b);
    }
    out.push('\n');
    for (label, row) in sbp.part_labels().iter().zip(sbp.rows()) {
        out.push_str(label);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub sample_ids: Vec<String>,
    pub part_labels: Vec<String>,
    pub counts: DMatrix<f64>,
}

/// Count table: first column sample id, remaining columns one per part.
pub fn parse_counts_csv(text: &str) -> Result<CountTable> {
    let t = read_table(text)?;
    let parts = t.header[1..].to_vec();
    check_unique(&parts, "part")?;
    let mut ids = Vec::with_capacity(t.rows.len());
    let mut counts = DMatrix::zeros(t.rows.len(), parts.len());
    for (i, (line, row)) in t.rows.iter().enumerate() {
        ids.push(row[0].clone());
        for (j, (cell, col)) in row[1..].iter().zip(&parts).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| field_err(*line, col, format!("{cell:?} is not a number")))?;
            if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                return Err(field_err(*line, col, format!("{cell:?} is not a nonnegative integer count")));
            }
            counts[(i, j)] = v;
        }
    }
    check_unique(&ids, "sample id")?;
    Ok(CountTable {
        sample_ids: ids,
        part_labels: parts,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub sample_ids: Vec<String>,
    pub exposure: Vec<u8>,
    pub response: Vec<f64>,
    pub confounder_names: Vec<String>,
    /// `n x C` categorical confounder values.
    pub confounders: Vec<Vec<String>>,
}

impl Metadata {
    /// `name=value` pairs joined by `;`, or `all` without confounders.
    pub fn stratum_labels(&self) -> Vec<String> {
        self.confounders
            .iter()
            .map(|vals| {
                if vals.is_empty() {
                    "all".to_string()
                } else {
                    self.confounder_names
                        .iter()
                        .zip(vals)
                        .map(|(n, v)| format!("{n}={v}"))
                        .collect::<Vec<_>>()
                        .join(";")
                }
            })
            .collect()
    }
}

pub const EXPOSURE_COLUMN: &str = "exposure";
pub const RESPONSE_COLUMN: &str = "response";

/// Metadata table: first column sample id, an `exposure` column (0/1), a
/// `response` column, and any further columns as categorical confounders.
pub fn parse_metadata_csv(text: &str) -> Result<Metadata> {
    let t = read_table(text)?;
    check_unique(&t.header, "column")?;
    let find = |name: &str| {
        t.header
            .iter()
            .skip(1)
            .position(|h| h.eq_ignore_ascii_case(name))
            .map(|p| p + 1)
            .ok_or_else(|| IoError::Layout(format!("metadata lacks a {name:?} column")))
    };
    let xcol = find(EXPOSURE_COLUMN)?;
    let ycol = find(RESPONSE_COLUMN)?;
    let ccols: Vec<usize> = (1..t.header.len()).filter(|&c| c != xcol && c != ycol).collect();
    let mut meta = Metadata {
        sample_ids: Vec::with_capacity(t.rows.len()),
        exposure: Vec::with_capacity(t.rows.len()),
        response: Vec::with_capacity(t.rows.len()),
        confounder_names: ccols.iter().map(|&c| t.header[c].clone()).collect(),
        confounders: Vec::with_capacity(t.rows.len()),
    };
    for name in &meta.confounder_names {
        if name.contains([';', '=']) {
            return Err(IoError::Layout(format!("confounder name {name:?} contains ';' or '='")));
        }
    }
    for (line, row) in &t.rows {
        meta.sample_ids.push(row[0].clone());
        let x = match row[xcol].as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(field_err(*line, &t.header[xcol], format!("{other:?} is not 0 or 1"))),
        };
        meta.exposure.push(x);
        let y: f64 = row[ycol]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| field_err(*line, &t.header[ycol], format!("{:?} is not a finite number", row[ycol])))?;
        meta.response.push(y);
        let mut vals = Vec::with_capacity(ccols.len());
        for &c in &ccols {
            let v = &row[c];
            if v.is_empty() || v.contains([';', '=']) {
                return Err(field_err(*line, &t.header[c], format!("invalid category {v:?}")));
            }
            vals.push(v.clone());
        }
        meta.confounders.push(vals);
    }
    check_unique(&meta.sample_ids, "sample id")?;
    Ok(meta)
}

/// Join counts and metadata on sample id, in count-table order.
pub fn join_cohort(counts: &CountTable, meta: &Metadata) -> Result<CohortData> {
    if counts.sample_ids.len() != meta.sample_ids.len() {
        return Err(IoError::Layout(format!(
            "{} count rows but {} metadata rows",
            counts.sample_ids.len(),
            meta.sample_ids.len()
        )));
    }
    let index: HashMap<&str, usize> = meta
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels = meta.stratum_labels();
    let mut order = Vec::with_capacity(counts.sample_ids.len());
    for id in &counts.sample_ids {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| IoError::Layout(format!("sample {id:?} has no metadata")))?;
        order.push(i);
    }
    Ok(CohortData::new(
        counts.sample_ids.clone(),
        counts.part_labels.clone(),
        counts.counts.clone(),
        order.iter().map(|&i| meta.exposure[i]).collect(),
        order.iter().map(|&i| labels[i].clone()).collect(),
        order.iter().map(|&i| meta.response[i]).collect(),
    )?)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// ilr coordinates with a sample id column.
pub fn write_ilr_csv(sample_ids: &[String], balance_labels: &[String], ilr: &DMatrix<f64>) -> String {
    let mut out = String::from("sample");
    for b in balance_labels {
        out.push(',');
        out.push_str(&csv_field(b));
    }
    out.push('\n');
    for (i, id) in sample_ids.iter().enumerate() {
        out.push_str(&csv_field(id));
        for k in 0..ilr.ncols() {
            out.push_str(&format!(",{}", ilr[(i, k)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_counts_csv(data: &CohortData) -> String {
    let mut out = String::from("sample");
    for p in &data.part_labels {
        out.push(',');
        out.push_str(&csv_field(p));
    }
    out.push('\n');
    for (i, id) in data.sample_ids.iter().enumerate() {
        out.push_str(&csv_field(id));
        for j in 0..data.num_parts() {
            out.push_str(&format!(",{}", data.counts[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Metadata for a cohort whose confounder values are known per individual.
pub fn write_metadata_csv(data: &CohortData, confounder_names: &[String], confounders: &[Vec<u8>]) -> String {
    let mut out = String::from("sample,exposure");
    for c in confounder_names {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push_str(",response\n");
    for i in 0..data.len() {
        out.push_str(&format!("{},{}", csv_field(&data.sample_ids[i]), data.exposure[i]));
        for v in &confounders[i] {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", data.response[i]));
    }
    out
}

pub const EFFECTS_HEADER: &str = "effect,coordinate,point,se,ci_low,ci_high,beta,beta_se,gamma,gamma_se";

/// Effects table: TE, NDE, OIE, then one CIE row per coordinate carrying the
/// pooled path coefficients.
pub fn write_effects_csv(est: &MediationEstimate) -> String {
    let mut out = format!("{EFFECTS_HEADER}\n");
    for (name, e) in [("TE", &est.te), ("NDE", &est.nde), ("OIE", &est.oie)] {
        out.push_str(&format!("{name},,{},{},{},{},,,,\n", e.point, e.se, e.ci_low, e.ci_high));
    }
    for c in &est.cie {
        out.push_str(&format!(
            "CIE,{},{},{},{},{},{},{},{},{}\n",
            csv_field(&c.label),
            c.cie.point,
            c.cie.se,
            c.cie.ci_low,
            c.cie.ci_high,
            c.beta,
            c.beta_se,
            c.gamma,
            c.gamma_se
        ));
    }
    out
}

pub fn write_effects_json(est: &MediationEstimate) -> String {
    serde_json::to_string_pretty(est).expect("estimate serializes")
}

/// Parse `stratum,weight` rows into a weight map.
pub fn parse_weights_csv(text: &str) -> Result<BTreeMap<String, f64>> {
    let t = read_table(text)?;
    let mut out = BTreeMap::new();
    for (line, row) in &t.rows {
        let w: f64 = row[1]
            .parse()
            .ok()
            .filter(|w: &f64| w.is_finite() && *w >= 0.0)
            .ok_or_else(|| field_err(*line, &t.header[1], format!("{:?} is not a weight", row[1])))?;
        if out.insert(row[0].clone(), w).is_some() {
            return Err(IoError::Layout(format!("duplicate stratum {:?}", row[0])));
        }
    }
    Ok(out)
}
