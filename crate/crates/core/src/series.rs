//! Multivariate series data model: CSV ingestion, sliding windows,
//! train/val/test splitting and per-variable z-score normalization.
//!
//! Values are stored as a `[D][T]` matrix (one row per variable). All time
//! indices in this module are 0-based.

use std::collections::HashSet;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HintsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    values: Array2<f64>,
    names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl MultivariateSeries {
    pub fn new(
        values: Array2<f64>,
        names: Vec<String>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        let (d, t) = values.dim();
        if d == 0 {
            return Err(HintsError::InvalidSeries("series needs at least one variable".into()));
        }
        if t < 2 {
            return Err(HintsError::InvalidSeries(format!("series needs at least 2 steps, got {t}")));
        }
        if names.len() != d {
            return Err(HintsError::shape(format!("{d} names"), format!("{} names", names.len())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(HintsError::InvalidSeries(format!("duplicate variable name `{n}`")));
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t {
                return Err(HintsError::shape(format!("{t} timestamps"), format!("{} timestamps", ts.len())));
            }
        }
        if let Some(((var, step), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(HintsError::InvalidSeries(format!(
                "non-finite value at variable {var}, step {step}"
            )));
        }
        Ok(Self {
            values,
            names,
            timestamps,
        })
    }

    /// Builds a series with generated names `x0..x{D-1}` and no timestamps.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.nrows()).map(|i| format!("x{i}")).collect();
        Self::new(values, names, None)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn num_vars(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Contiguous sub-series over `range` of time steps.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(HintsError::InvalidArgument(format!(
                "slice {range:?} out of bounds for length {}",
                self.len()
            )));
        }
        let values = self.values.slice(s![.., range.clone()]).to_owned();
        let timestamps = self.timestamps.as_ref().map(|ts| ts[range].to_vec());
        Self::new(values, self.names.clone(), timestamps)
    }

    /// Same metadata, new values of identical shape.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(HintsError::shape(
                format!("{:?}", self.values.dim()),
                format!("{:?}", values.dim()),
            ));
        }
        Self::new(values, self.names.clone(), self.timestamps.clone())
    }
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Ordered value columns. Empty means every column except the timestamp.
    pub columns: Vec<String>,
    pub timestamp: Option<String>,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            columns: Vec::new(),
            timestamp: None,
            delimiter: b',',
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HintsError::io(path, e))?;
    read_csv(file, schema)
}

/// Parses a header-first CSV. Every mapped cell must be a finite real;
/// missing values are errors, never imputed.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(HintsError::EmptyFile);
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HintsError::MissingColumn(name.to_owned()))
    };
    let ts_col = schema.timestamp.as_deref().map(find).transpose()?;
    let value_cols: Vec<usize> = if schema.columns.is_empty() {
        (0..header.len()).filter(|&c| Some(c) != ts_col).collect()
    } else {
        schema.columns.iter().map(|c| find(c)).collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(HintsError::InvalidSeries("no value columns selected".into()));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); value_cols.len()];
    let mut stamps = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (k, &c) in value_cols.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => columns[k].push(v),
                _ => {
                    return Err(HintsError::NonNumericCell {
                        row,
                        col: c + 1,
                        value: cell.to_owned(),
                    })
                }
            }
        }
        if let Some(c) = ts_col {
            stamps.push(record.get(c).unwrap_or("").to_owned());
        }
    }
    let t = columns[0].len();
    if t == 0 {
        return Err(HintsError::EmptyFile);
    }
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((value_cols.len(), t), flat)
        .expect("column lengths agree by construction");
    let names = value_cols.iter().map(|&c| header[c].clone()).collect();
    MultivariateSeries::new(values, names, ts_col.map(|_| stamps))
}

/// Header-first CSV of the series; a `date` column leads when timestamps
/// are present. Numbers use shortest round-trip formatting, so
/// [`read_csv`] recovers the values exactly.
pub fn series_to_csv(series: &MultivariateSeries) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ts = series.timestamps();
    let mut header: Vec<&str> = Vec::new();
    if ts.is_some() {
        header.push("date");
    }
    header.extend(series.names().iter().map(String::as_str));
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = ts {
            row.push(ts[t].clone());
        }
        row.extend(series.values().column(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| HintsError::InvalidSeries(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of utf-8 fields"))
}

pub fn write_series_csv(series: &MultivariateSeries, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HintsError::io(dir, e))?;
    }
    std::fs::write(path, series_to_csv(series)?).map_err(|e| HintsError::io(path, e))
}

/// One lookback/target pair. `start` is the index of the first input step
/// in the source series; the target begins at `start + lookback`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub start: usize,
    pub input: Array2<f64>,
    pub target: Array2<f64>,
}

impl WindowPair {
    pub fn lookback(&self) -> usize {
        self.input.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.target.ncols()
    }
}

pub fn make_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    window_view(series.values().view(), lookback, horizon, stride, 0)
}

fn window_view(
    values: ArrayView2<'_, f64>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    offset: usize,
) -> Result<Vec<WindowPair>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(HintsError::InvalidArgument(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    let len = values.ncols();
    if len < lookback + horizon {
        return Err(HintsError::SeriesTooShort {
            len,
            lookback,
            horizon,
        });
    }
    let count = (len - lookback - horizon) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let s0 = k * stride;
            WindowPair {
                start: s0 + offset,
                input: values.slice(s![.., s0..s0 + lookback]).to_owned(),
                target: values
                    .slice(s![.., s0 + lookback..s0 + lookback + horizon])
                    .to_owned(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub stride: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(HintsError::InvalidArgument(format!(
                "split fractions must lie in (0, 1), got {fracs:?}"
            )));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(HintsError::InvalidArgument(format!(
                "split fractions must sum to 1, got {fracs:?}"
            )));
        }
        if self.stride == 0 {
            return Err(HintsError::InvalidArgument("stride must be positive".into()));
        }
        Ok(())
    }

    /// Contiguous, time-ordered, pairwise-disjoint ranges covering `0..len`.
    /// Train and test sizes are floored; validation takes the remainder.
    pub fn ranges(&self, len: usize) -> Result<SplitRanges> {
        self.validate()?;
        let n_train = (len as f64 * self.train_frac).floor() as usize;
        let n_test = (len as f64 * self.test_frac).floor() as usize;
        let n_val = len.saturating_sub(n_train + n_test);
        if n_train < 2 || n_val == 0 || n_test == 0 {
            return Err(HintsError::InvalidArgument(format!(
                "series of length {len} too short to split {self:?}"
            )));
        }
        Ok(SplitRanges {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..len,
        })
    }

    /// Windows whose targets lie inside each split. Validation and test
    /// inputs may reach back into the preceding split (past observations
    /// are available at forecast time); targets never cross a boundary.
    pub fn windows(
        &self,
        series: &MultivariateSeries,
        lookback: usize,
        horizon: usize,
    ) -> Result<SplitWindows> {
        let ranges = self.ranges(series.len())?;
        let v = series.values().view();
        let build = |range: &Range<usize>| {
            let lo = range.start.saturating_sub(lookback);
            window_view(v.slice(s![.., lo..range.end]), lookback, horizon, self.stride, lo)
        };
        Ok(SplitWindows {
            train: build(&ranges.train)?,
            val: build(&ranges.val)?,
            test: build(&ranges.test)?,
        })
    }
}

/// Per-variable z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_normalizer(series: &MultivariateSeries, train_range: Range<usize>) -> Result<Normalizer> {
    if train_range.end > series.len() || train_range.len() < 2 {
        return Err(HintsError::InvalidArgument(format!(
            "normalizer range {train_range:?} invalid for length {}",
            series.len()
        )));
    }
    let block = series.values().slice(s![.., train_range]);
    let n = block.ncols() as f64;
    let mut mean = Vec::with_capacity(block.nrows());
    let mut std = Vec::with_capacity(block.nrows());
    for (d, row) in block.axis_iter(Axis(0)).enumerate() {
        let m = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd == 0.0 || !sd.is_finite() {
            return Err(HintsError::ConstantVariable(d));
        }
        mean.push(m);
        std.push(sd);
    }
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    fn check(&self, m: &Array2<f64>) -> Result<()> {
        if m.nrows() != self.mean.len() {
            return Err(HintsError::shape(
                format!("{} variables", self.mean.len()),
                format!("{} variables", m.nrows()),
            ));
        }
        Ok(())
    }

    pub fn transform_values(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mean = Array1::from(self.mean.clone()).insert_axis(Axis(1));
        let std = Array1::from(self.std.clone()).insert_axis(Axis(1));
        Ok((m - &mean) / &std)
    }

    pub fn inverse_values(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m)?;
        let mean = Array1::from(self.mean.clone()).insert_axis(Axis(1));
        let std = Array1::from(self.std.clone()).insert_axis(Axis(1));
        Ok(m * &std + &mean)
    }

    pub fn transform(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        series.with_values(self.transform_values(series.values())?)
    }

    pub fn inverse(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        series.with_values(self.inverse_values(series.values())?)
    }
}
