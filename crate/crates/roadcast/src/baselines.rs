//! Classical comparison baselines: ordinary least squares on a single
//! regressor, autoregression with optional differencing, and a Poisson
//! count model. The autoregression is fitted without an intercept, with an
//! optional mean-centering flag for series that are far from zero; no
//! moving-average terms are estimated, so the model is named AR(p,d)
//! rather than ARIMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simple linear regression `y = β₀ + β₁x + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta0: f64,
    pub beta1: f64,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.beta0 + self.beta1 * x
    }
}

/// Closed-form least squares: `β₁ = cov(x,y)/var(x)`, `β₀ = ȳ − β₁x̄`.
pub fn fit_ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::shape("fit_ols", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Empty("fit_ols needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("degenerate regressor".into()));
    }
    let beta1 = sxy / sxx;
    let beta0 = my - beta1 * mx;
    let residuals = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| b - (beta0 + beta1 * a))
        .collect();
    Ok(OlsFit {
        beta0,
        beta1,
        residuals,
    })
}

/// Autoregression `X_t = α₁X_{t−1} + … + α_pX_{t−p} + ε_t` fitted on the
/// `d`-fold differenced series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArFit {
    pub p: usize,
    pub d: usize,
    pub alpha: Vec<f64>,
    /// Mean subtracted on the differenced scale (0 unless centering).
    pub mean: f64,
    pub residuals: Vec<f64>,
}

fn difference(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Solves the symmetric system `A·x = b` by Gaussian elimination with
/// partial pivoting; `A` is small (p ≤ a handful).
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("non-empty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Degenerate("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Fits AR(p) on the `d`-fold differenced series by least squares through
/// the normal equations, with a tiny ridge (1e−10) for conditioning.
/// `center` subtracts the differenced-series mean before fitting.
pub fn fit_ar(series: &[f64], p: usize, d: usize, center: bool) -> Result<ArFit> {
    if p == 0 {
        return Err(Error::Argument("AR order p must be at least 1".into()));
    }
    if series.len() <= p + d + 1 {
        return Err(Error::Argument(format!(
            "series of length {} too short for AR({p}) with d={d}",
            series.len()
        )));
    }
    let mut work = series.to_vec();
    for _ in 0..d {
        work = difference(&work);
    }
    let mean = if center {
        work.iter().sum::<f64>() / work.len() as f64
    } else {
        0.0
    };
    let centered: Vec<f64> = work.iter().map(|v| v - mean).collect();
    if centered.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("degenerate regressor".into()));
    }

    // design rows: [x_{t-1}, ..., x_{t-p}] -> x_t
    let rows = centered.len() - p;
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for t in p..centered.len() {
        let target = centered[t];
        for i in 0..p {
            let xi = centered[t - 1 - i];
            xty[i] += xi * target;
            for j in i..p {
                xtx[i][j] += xi * centered[t - 1 - j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
        xtx[i][i] += 1e-10;
    }
    let alpha = solve(xtx, xty)?;

    let mut residuals = Vec::with_capacity(rows);
    for t in p..centered.len() {
        let mut pred = 0.0;
        for (i, a) in alpha.iter().enumerate() {
            pred += a * centered[t - 1 - i];
        }
        residuals.push(centered[t] - pred);
    }
    Ok(ArFit {
        p,
        d,
        alpha,
        mean,
        residuals,
    })
}

/// Iterates the fitted recursion forward on the differenced scale, then
/// integrates `d` times back to levels.
pub fn forecast_ar(fit: &ArFit, history: &[f64], steps: usize) -> Result<Vec<f64>> {
    if history.len() < fit.p + fit.d {
        return Err(Error::Argument(format!(
            "history of length {} too short for AR({}) with d={}",
            history.len(),
            fit.p,
            fit.d
        )));
    }

    // keep the last level of each differencing stage for integration
    let mut stages = Vec::with_capacity(fit.d);
    let mut work = history.to_vec();
    for _ in 0..fit.d {
        stages.push(*work.last().expect("non-empty"));
        work = difference(&work);
    }

    let mut recent: Vec<f64> = work[work.len() - fit.p..].to_vec();
    let mut forecast = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = 0.0;
        for (i, a) in fit.alpha.iter().enumerate() {
            next += a * (recent[recent.len() - 1 - i] - fit.mean);
        }
        next += fit.mean;
        forecast.push(next);
        recent.push(next);
        recent.remove(0);
    }

    // integrate back up through the differencing stages
    for level in stages.iter().rev() {
        let mut acc = *level;
        for f in forecast.iter_mut() {
            acc += *f;
            *f = acc;
        }
    }
    Ok(forecast)
}

/// Poisson rate model: `λ` is the mean event count per interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit {
    pub lambda: f64,
}

/// Maximum-likelihood rate: the sample mean of the counts.
pub fn poisson_fit(counts: &[f64]) -> Result<PoissonFit> {
    if counts.is_empty() {
        return Err(Error::Empty("poisson_fit over empty counts"));
    }
    if counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::Argument("counts must be non-negative and finite".into()));
    }
    Ok(PoissonFit {
        lambda: counts.iter().sum::<f64>() / counts.len() as f64,
    })
}

/// `P(X = k) = λᵏ e^{−λ}/k!`, computed in log space so large `k` does not
/// overflow the factorial; `pmf(0 | λ=0) = 1` by convention.
pub fn poisson_pmf(lambda: f64, k: u64) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Argument(format!("lambda {lambda} must be non-negative")));
    }
    if lambda == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    let kf = k as f64;
    let mut ln_k_factorial = 0.0;
    for i in 2..=k {
        ln_k_factorial += (i as f64).ln();
    }
    Ok((kf * lambda.ln() - lambda - ln_k_factorial).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_two_point_exact_fit() {
        let fit = fit_ols(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert!((fit.beta0 - 1.0).abs() < 1e-12);
        assert!((fit.beta1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ols_constant_target_is_flat() {
        let fit = fit_ols(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(fit.beta1, 0.0);
        assert_eq!(fit.beta0, 5.0);
    }

    #[test]
    fn ols_perfect_fit_has_zero_residuals() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let fit = fit_ols(&x, &x).unwrap();
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn ols_residual_orthogonality() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.3, 2.9, 3.1, 5.2, 6.8, 7.1];
        let fit = fit_ols(&x, &y).unwrap();
        let sum: f64 = fit.residuals.iter().sum();
        let weighted: f64 = x.iter().zip(&fit.residuals).map(|(a, r)| a * r).sum();
        assert!(sum.abs() < 1e-8, "{sum}");
        assert!(weighted.abs() < 1e-8, "{weighted}");
    }

    #[test]
    fn ols_degenerate_regressor_is_error() {
        let err = fit_ols(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate regressor"));
    }

    #[test]
    fn ar1_recovers_decay_coefficient() {
        let mut series = vec![1.0];
        for _ in 0..49 {
            series.push(0.9 * series.last().unwrap());
        }
        let fit = fit_ar(&series, 1, 0, false).unwrap();
        assert!((fit.alpha[0] - 0.9).abs() < 1e-6, "{:?}", fit.alpha);
    }

    #[test]
    fn ar2_recovers_both_coefficients() {
        let mut series = vec![1.0, 0.8];
        for t in 2..80 {
            series.push(0.5 * series[t - 1] + 0.3 * series[t - 2]);
        }
        let fit = fit_ar(&series, 2, 0, false).unwrap();
        assert!((fit.alpha[0] - 0.5).abs() < 1e-6, "{:?}", fit.alpha);
        assert!((fit.alpha[1] - 0.3).abs() < 1e-6, "{:?}", fit.alpha);
    }

    #[test]
    fn ar_constant_series_after_differencing_is_degenerate() {
        let series = vec![4.0; 20];
        let err = fit_ar(&series, 1, 1, false).unwrap_err();
        assert!(err.to_string().contains("degenerate regressor"));
    }

    #[test]
    fn forecast_unit_root_repeats_last_value() {
        let fit = ArFit {
            p: 1,
            d: 0,
            alpha: vec![1.0],
            mean: 0.0,
            residuals: vec![],
        };
        let out = forecast_ar(&fit, &[3.0, 7.0], 4).unwrap();
        assert_eq!(out, vec![7.0; 4]);
    }

    #[test]
    fn forecast_ar1_hand_rollout() {
        let fit = ArFit {
            p: 1,
            d: 0,
            alpha: vec![0.9],
            mean: 0.0,
            residuals: vec![],
        };
        let out = forecast_ar(&fit, &[10.0], 2).unwrap();
        assert!((out[0] - 9.0).abs() < 1e-12);
        assert!((out[1] - 8.1).abs() < 1e-12);
    }

    #[test]
    fn forecast_with_differencing_flat_at_last_level() {
        let fit = ArFit {
            p: 1,
            d: 1,
            alpha: vec![0.0],
            mean: 0.0,
            residuals: vec![],
        };
        let out = forecast_ar(&fit, &[5.0, 6.5, 8.0], 3).unwrap();
        assert_eq!(out, vec![8.0, 8.0, 8.0]);
    }

    #[test]
    fn forecast_stable_ar1_decays_toward_zero() {
        let fit = ArFit {
            p: 1,
            d: 0,
            alpha: vec![0.8],
            mean: 0.0,
            residuals: vec![],
        };
        let out = forecast_ar(&fit, &[4.0], 30).unwrap();
        for w in out.windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
        assert!(out.last().unwrap().abs() < 1e-2);
    }

    #[test]
    fn poisson_closed_forms() {
        assert!((poisson_pmf(1.0, 0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert!((poisson_pmf(2.0, 2).unwrap() - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 3).unwrap(), 0.0);
    }

    #[test]
    fn poisson_fit_is_sample_mean() {
        let fit = poisson_fit(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(fit.lambda, 3.0);
        assert!(poisson_fit(&[-1.0]).is_err());
    }

    #[test]
    fn poisson_pmf_normalizes() {
        for lambda in [0.5, 1.0, 5.0, 20.0, 50.0] {
            let total: f64 = (0..=200).map(|k| poisson_pmf(lambda, k).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-9, "lambda {lambda}: {total}");
        }
    }
}
