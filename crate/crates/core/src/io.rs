//! File formats and the real-data preparation pipeline.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chart::{CfOrder, ChartConfig, ChartPoint, ParamSource, ProcessParameters};
use crate::cornish_fisher::{lower_normal_quantile, normal_cdf};
use crate::error::{Error, Result};
use crate::stats::{DataMatrix, TraceEstimates};
use crate::sum::sum;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Numeric table with missing cells, as read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    /// Row-major cells; `None` marks a missing value.
    pub rows: Vec<Vec<Option<f64>>>,
}

fn parse_cell(s: &str) -> std::result::Result<Option<f64>, ()> {
    let t = s.trim();
    if t.is_empty() || matches!(t.to_ascii_lowercase().as_str(), "na" | "nan" | "null" | "none") {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(()),
    }
}

impl RawTable {
    /// Reads a CSV. The first record is taken as a header when any of its
    /// cells is non-numeric; otherwise columns are named `x1, x2, …`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut records = rdr.records();
        let first = match records.next() {
            Some(r) => r?,
            None => return Err(Error::InsufficientData { needed: 1, got: 0 }),
        };
        let is_header = first.iter().any(|c| parse_cell(c).is_err());
        let ncols = first.len();
        let mut rows = Vec::new();
        let headers = if is_header {
            first.iter().map(str::to_owned).collect()
        } else {
            rows.push(first.iter().map(|c| parse_cell(c).expect("checked numeric")).collect());
            (1..=ncols).map(|j| format!("x{j}")).collect()
        };
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    parse_cell(c).map_err(|_| Error::NonFinite { row: i + usize::from(!is_header), col: j })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(File::open(path)?)
    }

    pub fn ncols(&self) -> usize {
        self.headers.len()
    }

    fn column(&self, j: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.rows.iter().map(move |r| r[j])
    }

    /// Complete numeric matrix; missing cells are an error.
    pub fn into_data(self) -> Result<(Vec<String>, DataMatrix)> {
        let (m, p) = (self.rows.len(), self.ncols());
        let mut out = DMatrix::zeros(m, p);
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                out[(i, j)] = v.ok_or(Error::NonFinite { row: i, col: j })?;
            }
        }
        Ok((self.headers, DataMatrix::new(out)?))
    }
}

/// Reads a complete numeric CSV into a data matrix.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DataMatrix)> {
    RawTable::from_path(path)?.into_data()
}

pub fn write_matrix_csv<W: Write>(writer: W, headers: &[String], data: &DataMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(headers)?;
    for i in 0..data.nrows() {
        w.write_record(data.matrix().row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningThresholds {
    /// Columns missing more than this fraction of cells are dropped.
    pub missing: f64,
    /// Columns with variance below this multiple of the median column variance are dropped.
    pub variance: f64,
}

impl Default for CleaningThresholds {
    fn default() -> Self {
        Self { missing: 0.05, variance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub dropped_missing: Vec<String>,
    pub dropped_near_constant: Vec<String>,
    pub imputed_cells: usize,
    pub rows_in: usize,
    pub rows_out: usize,
    pub cols_in: usize,
    pub cols_out: usize,
    pub thresholds: CleaningThresholds,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = sum(xs.iter().copied()) / xs.len() as f64;
    sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (xs.len() - 1) as f64
}

/// Drops sparse and near-constant columns and imputes remaining gaps with
/// the column median. Near-constant screening runs on imputed columns and is
/// repeated until no column is dropped, so cleaning is idempotent.
pub fn clean(table: &RawTable, th: CleaningThresholds) -> Result<(Vec<String>, DataMatrix, CleaningReport)> {
    let m = table.rows.len();
    if m == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut report = CleaningReport {
        dropped_missing: Vec::new(),
        dropped_near_constant: Vec::new(),
        imputed_cells: 0,
        rows_in: m,
        rows_out: m,
        cols_in: table.ncols(),
        cols_out: 0,
        thresholds: th,
    };
    let mut cols: Vec<(usize, Vec<f64>)> = Vec::new();
    for j in 0..table.ncols() {
        let observed: Vec<f64> = table.column(j).flatten().collect();
        let missing = m - observed.len();
        if observed.is_empty() || missing as f64 / m as f64 > th.missing {
            report.dropped_missing.push(table.headers[j].clone());
            continue;
        }
        let fill = median(&mut observed.clone());
        report.imputed_cells += missing;
        cols.push((j, table.column(j).map(|v| v.unwrap_or(fill)).collect()));
    }
    loop {
        let vars: Vec<f64> = cols.iter().map(|(_, c)| variance(c)).collect();
        if vars.is_empty() {
            break;
        }
        let cut = th.variance * median(&mut vars.clone());
        let keep: Vec<bool> = vars.iter().map(|&v| v > 0.0 && v >= cut).collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut k = keep.iter();
        cols.retain(|(j, _)| {
            let keep = *k.next().expect("one flag per column");
            if !keep {
                report.dropped_near_constant.push(table.headers[*j].clone());
            }
            keep
        });
    }
    if cols.is_empty() {
        return Err(Error::Config { field: "input".into(), message: "no columns survive cleaning".into() });
    }
    report.cols_out = cols.len();
    let headers = cols.iter().map(|(j, _)| table.headers[*j].clone()).collect();
    let data = DMatrix::from_fn(m, cols.len(), |i, j| cols[j].1[i]);
    Ok((headers, DataMatrix::new(data)?, report))
}

pub fn load_and_clean(
    path: impl AsRef<Path>,
    th: CleaningThresholds,
) -> Result<(Vec<String>, DataMatrix, CleaningReport)> {
    clean(&RawTable::from_path(path)?, th)
}

/// Plotting position assigned to a (possibly averaged) rank among `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankConvention {
    /// `rank / (n + 1)`.
    #[default]
    Weibull,
    /// `(rank − 0.5) / n`.
    Hazen,
}

/// Per-column normal-score transform `Φ⁻¹(F̂(x))` fitted on reference rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformModel {
    columns: Vec<Vec<f64>>,
    convention: RankConvention,
}

impl TransformModel {
    pub fn fit(reference: &DataMatrix, convention: RankConvention) -> Self {
        let columns = (0..reference.ncols())
            .map(|j| {
                let mut c: Vec<f64> = reference.matrix().column(j).iter().copied().collect();
                c.sort_by(f64::total_cmp);
                c
            })
            .collect();
        Self { columns, convention }
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    /// Average rank of `x` among the reference values of column `j`, clamped to `[1, n]`.
    pub fn rank(&self, j: usize, x: f64) -> f64 {
        let c = &self.columns[j];
        let below = c.partition_point(|&v| v < x);
        let upto = c.partition_point(|&v| v <= x);
        let ties = upto - below;
        let r = if ties > 0 { below as f64 + (ties as f64 + 1.0) / 2.0 } else { below as f64 };
        r.clamp(1.0, c.len() as f64)
    }

    pub fn probability(&self, j: usize, x: f64) -> f64 {
        let n = self.columns[j].len() as f64;
        let r = self.rank(j, x);
        match self.convention {
            RankConvention::Weibull => r / (n + 1.0),
            RankConvention::Hazen => (r - 0.5) / n,
        }
    }

    pub fn transform_value(&self, j: usize, x: f64) -> f64 {
        lower_normal_quantile(self.probability(j, x))
    }

    pub fn apply(&self, data: &DataMatrix) -> Result<DataMatrix> {
        if data.ncols() != self.ncols() {
            return Err(Error::Dimension(format!("data has {} columns, transform fitted on {}", data.ncols(), self.ncols())));
        }
        let m = data.matrix();
        DataMatrix::new(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| self.transform_value(j, m[(i, j)])))
    }
}

/// Versioned JSON parameter file written by Phase I estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format_version: u32,
    pub source: ParamSource,
    pub alpha: f64,
    pub cf_order: CfOrder,
    pub apply_correction: bool,
    pub mu: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub traces: TraceEstimates,
    #[serde(default)]
    pub columns: Vec<String>,
    /// Phase I rows flagged as outliers (robust estimation only).
    #[serde(default)]
    pub flagged_rows: Vec<usize>,
}

impl ParamsFile {
    pub fn new(params: &ProcessParameters, config: &ChartConfig, columns: Vec<String>) -> Self {
        Self {
            format_version: PARAMS_FORMAT_VERSION,
            source: params.source,
            alpha: config.alpha,
            cf_order: config.cf_order,
            apply_correction: config.apply_correction,
            mu: params.mu.iter().copied().collect(),
            d_diag: params.d_diag.iter().copied().collect(),
            traces: params.traces.clone(),
            columns,
            flagged_rows: Vec::new(),
        }
    }

    pub fn params(&self) -> Result<ProcessParameters> {
        ProcessParameters::new(
            DVector::from_vec(self.mu.clone()),
            DVector::from_vec(self.d_diag.clone()),
            self.traces.clone(),
            self.source,
        )
    }

    pub fn config(&self) -> Result<ChartConfig> {
        Ok(ChartConfig::new(self.alpha, self.cf_order)?.with_correction(self.apply_correction))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_reader(File::open(path)?)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != PARAMS_FORMAT_VERSION {
            return Err(Error::FormatVersion { found, expected: PARAMS_FORMAT_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// One charted point with an optional group label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRow {
    pub index: usize,
    pub m2: f64,
    pub u: f64,
    pub z: f64,
    pub signal: bool,
    pub ucl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl From<ChartPoint> for ChartRow {
    fn from(p: ChartPoint) -> Self {
        Self { index: p.index, m2: p.m2, u: p.u, z: p.z, signal: p.signal, ucl: p.ucl, label: None }
    }
}

pub fn write_chart_csv<W: Write>(writer: W, rows: &[ChartRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let labelled = rows.iter().any(|r| r.label.is_some());
    let mut header = vec!["index", "m2", "u", "z", "signal", "ucl"];
    if labelled {
        header.push("label");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.index.to_string(),
            r.m2.to_string(),
            r.u.to_string(),
            r.z.to_string(),
            r.signal.to_string(),
            r.ucl.to_string(),
        ];
        if labelled {
            rec.push(r.label.clone().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_chart_csv<R: Read>(reader: R) -> Result<Vec<ChartRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            let mut row: ChartRow = r?;
            if row.label.as_deref() == Some("") {
                row.label = None;
            }
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcdfRow {
    pub value: f64,
    pub ecdf_a: f64,
    pub ecdf_b: f64,
    pub normal_cdf: f64,
}

/// Empirical CDFs of two samples evaluated at every pooled distinct value,
/// alongside the standard normal CDF.
pub fn ecdf_comparison(a: &[f64], b: &[f64]) -> Result<Vec<EcdfRow>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("ECDF input must be finite".into()));
    }
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let mut pooled: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    Ok(pooled
        .into_iter()
        .map(|v| EcdfRow {
            value: v,
            ecdf_a: sa.partition_point(|&x| x <= v) as f64 / sa.len() as f64,
            ecdf_b: sb.partition_point(|&x| x <= v) as f64 / sb.len() as f64,
            normal_cdf: normal_cdf(v),
        })
        .collect())
}

pub fn write_ecdf_csv<W: Write>(writer: W, rows: &[EcdfRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
