//! Evaluation metrics, yearly trend analysis, and vehicle-type correlation
//! against model predictions, all emitted as machine-readable reports in
//! original fatality units.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataprep::SeriesTable;
use crate::error::{Error, Result};
use crate::numeric::pearson;

/// The vehicle-count columns correlated against predictions.
pub const VEHICLE_COLUMNS: [&str; 8] = [
    "pedal_cycles",
    "motorcycles",
    "cars",
    "buses_or_coaches",
    "light_goods_vehicles",
    "heavy_goods_vehicles",
    "other_vehicles",
    "unknown_vehicles",
];

/// Root mean squared error `√((1/n)Σ(yᵢ−ŷᵢ)²)`.
pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape("rmse", y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::Empty("rmse over empty vectors"));
    }
    let sum: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / y.len() as f64).sqrt())
}

/// Mean absolute error `(1/n)Σ|yᵢ−ŷᵢ|`.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape("mae", y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::Empty("mae over empty vectors"));
    }
    let sum: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / y.len() as f64)
}

/// Evaluation metrics plus provenance for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub target_years: Vec<i64>,
    pub targets: Vec<f64>,
    pub predictions: Vec<f64>,
    pub residuals: Vec<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Builds a report in original units from aligned targets and
    /// predictions.
    pub fn from_predictions(
        target_years: Vec<i64>,
        targets: Vec<f64>,
        predictions: Vec<f64>,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        let rmse = rmse(&targets, &predictions)?;
        let mae = mae(&targets, &predictions)?;
        let residuals = targets
            .iter()
            .zip(&predictions)
            .map(|(y, p)| y - p)
            .collect();
        Ok(EvalReport {
            rmse,
            mae,
            n: targets.len(),
            target_years,
            targets,
            predictions,
            residuals,
            seed,
            config,
        })
    }
}

/// Yearly series, centred rolling mean, and per-decade means for one
/// column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendReport {
    pub column: String,
    pub rolling_window: usize,
    pub years: Vec<i64>,
    pub values: Vec<f64>,
    pub rolling: Vec<f64>,
    /// Decade label (e.g. "1970s") with the mean over member years present.
    pub decade_means: Vec<(String, f64)>,
}

impl TrendReport {
    pub fn decade_mean(&self, label: &str) -> Option<f64> {
        self.decade_means
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| *v)
    }

    /// Writes `year,value,rolling,decade`, where `decade` repeats the mean
    /// for the decade containing that year.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("year,value,rolling,decade\n");
        for (i, year) in self.years.iter().enumerate() {
            let label = decade_label(*year);
            let decade = self.decade_mean(&label).unwrap_or(f64::NAN);
            let _ = writeln!(out, "{year},{},{},{decade}", self.values[i], self.rolling[i]);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn decade_label(year: i64) -> String {
    format!("{}s", year.div_euclid(10) * 10)
}

/// Raw yearly series, centred rolling mean with the window truncated at
/// the edges, and decade means for `column`.
pub fn trend(table: &SeriesTable, column: &str, rolling_window: usize) -> Result<TrendReport> {
    if rolling_window == 0 {
        return Err(Error::Argument("rolling window must be at least 1".into()));
    }
    let values = table.column(column)?.to_vec();
    let n = values.len();
    let before = (rolling_window - 1) / 2;
    let after = rolling_window / 2;
    let rolling: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            let span = &values[lo..=hi];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect();

    let mut decade_means: Vec<(String, f64)> = Vec::new();
    let mut i = 0;
    while i < n {
        let label = decade_label(table.years[i]);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut j = i;
        while j < n && decade_label(table.years[j]) == label {
            sum += values[j];
            count += 1;
            j += 1;
        }
        decade_means.push((label, sum / count as f64));
        i = j;
    }

    Ok(TrendReport {
        column: column.to_string(),
        rolling_window,
        years: table.years.clone(),
        values,
        rolling,
        decade_means,
    })
}

/// One vehicle column's correlation with the predictions. `r` is absent
/// when the column has zero variance over the aligned span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrEntry {
    pub column: String,
    pub r: Option<f64>,
    pub n: usize,
    pub rank: Option<usize>,
}

/// Vehicle-type correlations ranked by `r`, highest first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrReport {
    pub entries: Vec<CorrEntry>,
}

impl CorrReport {
    /// Writes `column,r,rank`; degenerate columns render as `undefined`
    /// with an empty rank.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("column,r,rank\n");
        for e in &self.entries {
            let r = e.r.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            let rank = e.rank.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(out, "{},{r},{rank}", e.column);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Pearson correlation of each vehicle-count column with the predictions
/// over the aligned span of years.
///
/// `target_years` must be a contiguous run of the table's years, one per
/// prediction. Zero-variance columns are reported as undefined instead of
/// failing the run.
pub fn vehicle_correlations(
    table: &SeriesTable,
    predictions: &[f64],
    target_years: &[i64],
) -> Result<CorrReport> {
    if predictions.len() != target_years.len() {
        return Err(Error::shape(
            "vehicle correlations",
            target_years.len(),
            predictions.len(),
        ));
    }
    if predictions.len() < 2 {
        return Err(Error::Empty("vehicle correlations need at least two predictions"));
    }
    let start = table.year_index(target_years[0]).ok_or_else(|| {
        Error::Schema(format!("aligned span starts at unknown year {}", target_years[0]))
    })?;
    for (offset, year) in target_years.iter().enumerate() {
        let idx = start + offset;
        if table.years.get(idx) != Some(year) {
            return Err(Error::Schema(format!(
                "predictions not aligned to a contiguous year span at {year}"
            )));
        }
    }

    let mut entries = Vec::with_capacity(VEHICLE_COLUMNS.len());
    for name in VEHICLE_COLUMNS {
        let column = table.column(name)?;
        let span = &column[start..start + target_years.len()];
        let r = match pearson(span, predictions) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        entries.push(CorrEntry {
            column: name.to_string(),
            r,
            n: span.len(),
            rank: None,
        });
    }

    // rank the defined correlations, highest r first; ties keep column order
    let mut order: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].r.is_some()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .r
            .partial_cmp(&entries[a].r)
            .expect("finite correlations")
    });
    for (rank, &idx) in order.iter().enumerate() {
        entries[idx].rank = Some(rank + 1);
    }
    entries.sort_by_key(|e| e.rank.unwrap_or(usize::MAX));

    Ok(CorrReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn table(years: &[i64], cols: &[(&str, Vec<f64>)]) -> SeriesTable {
        SeriesTable {
            years: years.to_vec(),
            columns: cols.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
        }
    }

    #[test]
    fn rmse_and_mae_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 2.5).collect();
        assert!((rmse(&y, &shifted).unwrap() - 2.5).abs() < 1e-12);
        let hand_rmse = rmse(&y, &[2.0, 2.0, 2.0]).unwrap();
        assert!((hand_rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((hand_rmse - 0.816497).abs() < 1e-6);
        let hand_mae = mae(&y, &[2.0, 2.0, 2.0]).unwrap();
        assert!((hand_mae - 2.0 / 3.0).abs() < 1e-12);
        assert!(rmse(&y, &[1.0]).is_err());
    }

    #[test]
    fn trend_window_one_equals_raw() {
        let t = table(&[2000, 2001, 2002], &[("a", vec![1.0, 5.0, 3.0])]);
        let report = trend(&t, "a", 1).unwrap();
        assert_eq!(report.rolling, report.values);
    }

    #[test]
    fn trend_constant_series_has_constant_decade_means() {
        let years: Vec<i64> = (1995..2015).collect();
        let t = table(&years, &[("a", vec![7.0; 20])]);
        let report = trend(&t, "a", 5).unwrap();
        assert_eq!(report.decade_means.len(), 3);
        for (_, mean) in &report.decade_means {
            assert_eq!(*mean, 7.0);
        }
        assert!(report.rolling.iter().all(|v| *v == 7.0));
    }

    #[test]
    fn trend_rolling_mean_truncates_at_edges() {
        let t = table(&[1, 2, 3, 4], &[("a", vec![2.0, 4.0, 6.0, 8.0])]);
        let report = trend(&t, "a", 3).unwrap();
        assert_eq!(report.rolling[0], 3.0); // mean of [2, 4]
        assert_eq!(report.rolling[1], 4.0); // mean of [2, 4, 6]
        assert_eq!(report.rolling[3], 7.0); // mean of [6, 8]
    }

    #[test]
    fn trend_unknown_column_is_error() {
        let t = table(&[1], &[("a", vec![1.0])]);
        assert!(trend(&t, "missing", 3).is_err());
    }

    #[test]
    fn decade_means_follow_declining_series() {
        let years: Vec<i64> = (1970..1990).collect();
        let values: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        let t = table(&years, &[("a", values)]);
        let report = trend(&t, "a", 1).unwrap();
        let d70 = report.decade_mean("1970s").unwrap();
        let d80 = report.decade_mean("1980s").unwrap();
        assert!(d80 < d70);
    }

    fn vehicle_table(n: usize) -> SeriesTable {
        let years: Vec<i64> = (2000..2000 + n as i64).collect();
        let mut rng = Rng::new(1);
        let cols: Vec<(&str, Vec<f64>)> = VEHICLE_COLUMNS
            .iter()
            .map(|&name| {
                let values: Vec<f64> = if name == "unknown_vehicles" {
                    vec![3.0; n]
                } else {
                    (0..n).map(|_| rng.uniform(10.0, 100.0).unwrap()).collect()
                };
                (name, values)
            })
            .collect();
        table(&years, &cols)
    }

    #[test]
    fn correlation_with_proportional_column_is_one() {
        let t = vehicle_table(12);
        let cars = t.column("cars").unwrap().to_vec();
        let preds: Vec<f64> = cars.iter().map(|v| 0.5 * v).collect();
        let years = t.years.clone();
        let report = vehicle_correlations(&t, &preds, &years).unwrap();
        let entry = report.entries.iter().find(|e| e.column == "cars").unwrap();
        assert_eq!(entry.r, Some(1.0));
        assert_eq!(entry.rank, Some(1));

        let negated: Vec<f64> = cars.iter().map(|v| -v).collect();
        let report = vehicle_correlations(&t, &negated, &years).unwrap();
        let entry = report.entries.iter().find(|e| e.column == "cars").unwrap();
        assert_eq!(entry.r, Some(-1.0));
    }

    #[test]
    fn degenerate_column_reports_undefined() {
        let t = vehicle_table(10);
        let preds: Vec<f64> = t.column("cars").unwrap().to_vec();
        let report = vehicle_correlations(&t, &preds, &t.years).unwrap();
        let unknown = report
            .entries
            .iter()
            .find(|e| e.column == "unknown_vehicles")
            .unwrap();
        assert_eq!(unknown.r, None);
        assert_eq!(unknown.rank, None);
        // ranks over the defined entries are a permutation of 1..=k
        let mut ranks: Vec<usize> = report.entries.iter().filter_map(|e| e.rank).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn misaligned_years_are_rejected() {
        let t = vehicle_table(10);
        let preds = vec![1.0, 2.0, 3.0];
        let bad_years = vec![2000, 2002, 2003];
        assert!(vehicle_correlations(&t, &preds, &bad_years).is_err());
        let unknown_start = vec![1990, 1991, 1992];
        assert!(vehicle_correlations(&t, &preds, &unknown_start).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(
            seed in any::<u64>(), n in 1usize..50,
        ) {
            let mut rng = Rng::new(seed);
            let y: Vec<f64> = (0..n).map(|_| rng.uniform(-100.0, 100.0).unwrap()).collect();
            let yhat: Vec<f64> = (0..n).map(|_| rng.uniform(-100.0, 100.0).unwrap()).collect();
            prop_assert!(rmse(&y, &yhat).unwrap() >= mae(&y, &yhat).unwrap());
        }

        #[test]
        fn rmse_matches_brute_force_and_scales(
            seed in any::<u64>(), n in 1usize..40, a in -5.0..5.0f64,
        ) {
            let mut rng = Rng::new(seed);
            let y: Vec<f64> = (0..n).map(|_| rng.uniform(-10.0, 10.0).unwrap()).collect();
            let yhat: Vec<f64> = (0..n).map(|_| rng.uniform(-10.0, 10.0).unwrap()).collect();
            let mut acc = 0.0;
            for k in 0..n {
                acc += (y[k] - yhat[k]) * (y[k] - yhat[k]);
            }
            let brute = (acc / n as f64).sqrt();
            prop_assert!((rmse(&y, &yhat).unwrap() - brute).abs() < 1e-12);
            let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
            let yhs: Vec<f64> = yhat.iter().map(|v| a * v).collect();
            let scaled = rmse(&ys, &yhs).unwrap();
            prop_assert!((scaled - a.abs() * rmse(&y, &yhat).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn correlation_ranks_stable_under_affine_prediction_rescale(
            seed in any::<u64>(), scale in 0.1..4.0f64, shift in -50.0..50.0f64,
        ) {
            let t = vehicle_table(15);
            let mut rng = Rng::new(seed);
            let preds: Vec<f64> = (0..15).map(|_| rng.uniform(-10.0, 10.0).unwrap()).collect();
            prop_assume!(preds.iter().any(|p| *p != preds[0]));
            let base = vehicle_correlations(&t, &preds, &t.years).unwrap();
            let rescaled: Vec<f64> = preds.iter().map(|p| scale * p + shift).collect();
            let moved = vehicle_correlations(&t, &rescaled, &t.years).unwrap();
            for (a, b) in base.entries.iter().zip(&moved.entries) {
                prop_assert_eq!(&a.column, &b.column);
                prop_assert_eq!(a.rank, b.rank);
                match (a.r, b.r) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness changed"),
                }
            }
        }
    }
}
