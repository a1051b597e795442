//! Ingestion and preparation of the three exported yearly tables:
//! cleansing (row skipping, header assignment, bracket-annotation
//! stripping), string-to-float conversion, infinity/missing handling with
//! median imputation, year-keyed outer merge, robust scaling, supervised
//! lookback windowing, and train/test splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{iqr, median, Rng};

/// Unparsed rectangular text table, straight from a CSV export.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub source_name: String,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            rows.push(record.iter().map(|s| s.to_string()).collect());
        }
        Ok(RawTable {
            source_name: path.display().to_string(),
            rows,
        })
    }
}

/// Year-keyed numeric table shared by all pipeline stages.
///
/// Rows are sorted ascending by unique year. Gaps introduced by the outer
/// merge are stored as NaN until [`impute`] runs; a finished table holds
/// only finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub years: Vec<i64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl SeriesTable {
    pub fn n_rows(&self) -> usize {
        self.years.len()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Index of `year` in the table, if present.
    pub fn year_index(&self, year: i64) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    /// Pairs of adjacent years with a gap larger than one year.
    pub fn year_gaps(&self) -> Vec<(i64, i64)> {
        self.years
            .windows(2)
            .filter(|w| w[1] - w[0] > 1)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    fn sort_by_year(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.years.len()).collect();
        order.sort_by_key(|&i| self.years[i]);
        self.years = order.iter().map(|&i| self.years[i]).collect();
        for (_, values) in self.columns.iter_mut() {
            *values = order.iter().map(|&i| values[i]).collect();
        }
        for w in self.years.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Schema(format!("duplicate year {}", w[0])));
            }
        }
        Ok(())
    }

    /// Writes `year` plus all columns as CSV with full-precision floats.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("year");
        for (name, _) in &self.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, year) in self.years.iter().enumerate() {
            let _ = write!(out, "{year}");
            for (_, values) in &self.columns {
                let _ = write!(out, ",{}", values[i]);
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a table previously written by [`write_csv`].
    ///
    /// [`write_csv`]: SeriesTable::write_csv
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
        let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
        if headers.first().map(String::as_str) != Some("year") {
            return Err(Error::Schema(format!(
                "{}: first column must be 'year', got {:?}",
                path.display(),
                headers.first()
            )));
        }
        let mut years = Vec::new();
        let mut columns: Vec<(String, Vec<f64>)> =
            headers[1..].iter().map(|h| (h.clone(), Vec::new())).collect();
        for record in reader.records() {
            let record = record?;
            years.push(
                record
                    .get(0)
                    .and_then(|s| s.parse::<i64>().ok())
                    .ok_or_else(|| Error::Schema(format!("{}: bad year cell", path.display())))?,
            );
            for (k, (_, values)) in columns.iter_mut().enumerate() {
                let cell = record.get(k + 1).unwrap_or("");
                values.push(cell.parse::<f64>().map_err(|_| {
                    Error::Schema(format!("{}: bad numeric cell '{cell}'", path.display()))
                })?);
            }
        }
        let mut table = SeriesTable { years, columns };
        table.sort_by_year()?;
        Ok(table)
    }
}

/// Total string-to-float conversion: strips surrounding whitespace and all
/// thousands separators, then parses; anything unparseable becomes 0.
pub fn parse_value(s: &str) -> f64 {
    s.trim().replace(',', "").parse::<f64>().unwrap_or(0.0)
}

/// Drops the first `skip_rows` rows, keeps the first `headers.len()`
/// columns under the given names, strips bracketed annotations such as
/// `[note 1]` from every cell, converts cell-wise with [`parse_value`],
/// and casts the `year` column to integers.
pub fn cleanse_table(raw: &RawTable, skip_rows: usize, headers: &[&str]) -> Result<SeriesTable> {
    if raw.rows.len() <= skip_rows {
        return Err(Error::Schema(format!(
            "{}: {} rows cannot satisfy skip_rows={skip_rows}",
            raw.source_name,
            raw.rows.len()
        )));
    }
    let year_pos = headers
        .iter()
        .position(|h| *h == "year")
        .ok_or_else(|| Error::Schema(format!("{}: headers lack 'year'", raw.source_name)))?;
    let bracket = Regex::new(r"\[.*\]").expect("valid regex");

    let data_rows = &raw.rows[skip_rows..];
    if data_rows.is_empty() {
        return Err(Error::Schema(format!("{}: empty after skipping", raw.source_name)));
    }

    let mut years = Vec::with_capacity(data_rows.len());
    let mut columns: Vec<(String, Vec<f64>)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != year_pos)
        .map(|(_, h)| (h.to_string(), Vec::with_capacity(data_rows.len())))
        .collect();

    for (offset, row) in data_rows.iter().enumerate() {
        if row.len() < headers.len() {
            return Err(Error::Schema(format!(
                "{}: row {} has {} columns, need at least {}",
                raw.source_name,
                skip_rows + offset + 1,
                row.len(),
                headers.len()
            )));
        }
        let mut col = 0;
        for (i, cell) in row.iter().take(headers.len()).enumerate() {
            let cleaned = bracket.replace_all(cell, " ");
            let value = parse_value(&cleaned);
            if i == year_pos {
                years.push(value.round() as i64);
            } else {
                columns[col].1.push(value);
                col += 1;
            }
        }
    }

    let mut table = SeriesTable { years, columns };
    table.sort_by_year()?;
    Ok(table)
}

/// Treats ±infinity as missing and replaces every missing value with the
/// median of that column's finite values.
pub fn impute(table: &SeriesTable) -> Result<SeriesTable> {
    let mut out = table.clone();
    for (name, values) in out.columns.iter_mut() {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Degenerate(format!(
                "column '{name}' has no finite values to impute from"
            )));
        }
        let fill = median(&finite)?;
        for v in values.iter_mut() {
            if !v.is_finite() {
                *v = fill;
            }
        }
    }
    Ok(out)
}

/// Outer-joins three tables on year and fills rows missing in a source
/// with that source's column medians (imputation runs after the join).
pub fn merge_on_year(a: &SeriesTable, b: &SeriesTable, c: &SeriesTable) -> Result<SeriesTable> {
    let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
    for table in [a, b, c] {
        for (name, _) in &table.columns {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate column '{name}' across merge inputs"
                )));
            }
        }
    }

    let mut years: Vec<i64> = a
        .years
        .iter()
        .chain(&b.years)
        .chain(&c.years)
        .copied()
        .collect();
    years.sort_unstable();
    years.dedup();

    let mut columns = Vec::new();
    for table in [a, b, c] {
        for (name, values) in &table.columns {
            let aligned: Vec<f64> = years
                .iter()
                .map(|y| table.year_index(*y).map_or(f64::NAN, |i| values[i]))
                .collect();
            columns.push((name.clone(), aligned));
        }
    }

    impute(&SeriesTable { years, columns })
}

/// Per-column robust scaling parameters: median center and IQR scale,
/// with the scale falling back to 1 when the IQR is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustScaleParams {
    pub columns: BTreeMap<String, ColumnScale>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub center: f64,
    pub scale: f64,
}

impl RobustScaleParams {
    pub fn get(&self, column: &str) -> Result<ColumnScale> {
        self.columns
            .get(column)
            .copied()
            .ok_or_else(|| Error::Schema(format!("no scale parameters for column '{column}'")))
    }

    pub fn scale_value(&self, column: &str, x: f64) -> Result<f64> {
        let p = self.get(column)?;
        let scaled = (x - p.center) / p.scale;
        Ok(if scaled.is_finite() { scaled } else { 0.0 })
    }

    pub fn invert_value(&self, column: &str, x: f64) -> Result<f64> {
        let p = self.get(column)?;
        Ok(x * p.scale + p.center)
    }
}

/// Fits robust scale parameters for the named columns.
pub fn fit_robust_scale(table: &SeriesTable, cols: &[&str]) -> Result<RobustScaleParams> {
    let mut columns = BTreeMap::new();
    for &name in cols {
        let values = table.column(name)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("robust scale fit"));
        }
        let center = median(values)?;
        let spread = iqr(values)?;
        let scale = if spread == 0.0 { 1.0 } else { spread };
        columns.insert(name.to_string(), ColumnScale { center, scale });
    }
    Ok(RobustScaleParams { columns })
}

/// Returns a copy of `table` with every parameterised column replaced by
/// `(x − center)/scale`; non-finite results are replaced by 0.
pub fn apply_scale(table: &SeriesTable, params: &RobustScaleParams) -> Result<SeriesTable> {
    let mut out = table.clone();
    for (name, values) in out.columns.iter_mut() {
        if let Some(p) = params.columns.get(name) {
            for v in values.iter_mut() {
                let scaled = (*v - p.center) / p.scale;
                *v = if scaled.is_finite() { scaled } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// Inverse of [`apply_scale`] on the parameterised columns.
pub fn invert_scale(table: &SeriesTable, params: &RobustScaleParams) -> Result<SeriesTable> {
    let mut out = table.clone();
    for (name, values) in out.columns.iter_mut() {
        if let Some(p) = params.columns.get(name) {
            for v in values.iter_mut() {
                *v = *v * p.scale + p.center;
            }
        }
    }
    Ok(out)
}

/// One supervised sample: a lookback block of feature rows and the
/// next-step target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `lookback × features` block, row `0` oldest.
    pub window: Vec<Vec<f64>>,
    pub target: f64,
    pub target_year: i64,
}

/// Supervised framing of a year-sorted table.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub lookback: usize,
    pub feature_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn windows(&self) -> Vec<&[Vec<f64>]> {
        self.samples.iter().map(|s| s.window.as_slice()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.target).collect()
    }

    pub fn target_years(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.target_year).collect()
    }
}

/// Builds windows from parallel feature rows, targets, and years. Sample
/// `k` pairs feature rows `k..k+L` with the target at row `k+L`, giving
/// `N − L` samples over `N` rows.
pub fn build_windows(
    feature_rows: &[Vec<f64>],
    feature_names: &[String],
    targets: &[f64],
    years: &[i64],
    lookback: usize,
) -> Result<WindowedDataset> {
    if lookback == 0 {
        return Err(Error::Argument("lookback must be at least 1".into()));
    }
    let n = feature_rows.len();
    if targets.len() != n || years.len() != n {
        return Err(Error::shape("windowing rows", n, format!("{}/{}", targets.len(), years.len())));
    }
    if lookback >= n {
        return Err(Error::Argument(format!(
            "lookback {lookback} needs more than {n} rows"
        )));
    }
    let samples = (0..n - lookback)
        .map(|k| Sample {
            window: feature_rows[k..k + lookback].to_vec(),
            target: targets[k + lookback],
            target_year: years[k + lookback],
        })
        .collect();
    Ok(WindowedDataset {
        lookback,
        feature_names: feature_names.to_vec(),
        samples,
    })
}

/// Frames `table` as supervised windows of the named feature columns
/// against the next-step target column.
///
/// Windows use row adjacency; calendar gaps between adjacent rows do not
/// fail the framing ([`SeriesTable::year_gaps`] reports them for logging).
pub fn make_windows(
    table: &SeriesTable,
    feature_cols: &[&str],
    target_col: &str,
    lookback: usize,
) -> Result<WindowedDataset> {
    let features: Vec<&[f64]> = feature_cols
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<_>>()?;
    let targets = table.column(target_col)?;
    let rows: Vec<Vec<f64>> = (0..table.n_rows())
        .map(|i| features.iter().map(|col| col[i]).collect())
        .collect();
    let names: Vec<String> = feature_cols.iter().map(|c| c.to_string()).collect();
    build_windows(&rows, &names, targets, &table.years, lookback)
}

/// How [`split`] partitions samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Earliest samples in train, latest in test.
    Chronological,
    /// Seeded permutation before the cut.
    Shuffled,
}

/// Splits into `(train, test)` with `floor(fraction·count)` training
/// samples. Chronological mode keeps the earliest samples in train;
/// shuffled mode permutes with the given seed first.
pub fn split(
    dataset: &WindowedDataset,
    train_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let count = dataset.len();
    let n_train = (train_fraction * count as f64).floor() as usize;
    if n_train == 0 || n_train == count {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} leaves an empty side for {count} samples"
        )));
    }
    let order: Vec<usize> = match mode {
        SplitMode::Chronological => (0..count).collect(),
        SplitMode::Shuffled => Rng::new(seed).permutation(count),
    };
    let pick = |idx: &[usize]| WindowedDataset {
        lookback: dataset.lookback,
        feature_names: dataset.feature_names.clone(),
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
