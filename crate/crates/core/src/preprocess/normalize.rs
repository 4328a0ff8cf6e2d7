//! Z-score, min-max and Box-Cox transforms with reusable fit statistics.

use serde::{Deserialize, Serialize};

use super::PreprocessError;

/// Mean and sample standard deviation of a fitted series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: f64,
    pub std: f64,
}

impl ZScoreStats {
    /// Fits with the `n - 1` divisor.
    pub fn fit(series: &[f64]) -> Result<Self, PreprocessError> {
        let n = series.len();
        if n < 2 {
            return Err(PreprocessError::TooFewValues(n));
        }
        let mean = series.iter().sum::<f64>() / n as f64;
        let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(PreprocessError::ZeroVariance);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// `(x - mean) / std` with the sample standard deviation.
pub fn zscore_normalize(series: &[f64]) -> Result<(Vec<f64>, ZScoreStats), PreprocessError> {
    let stats = ZScoreStats::fit(series)?;
    Ok((series.iter().map(|&x| stats.apply(x)).collect(), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
}

impl MinMaxStats {
    pub fn fit(series: &[f64]) -> Result<Self, PreprocessError> {
        let min = series.iter().copied().fold(f64::INFINITY, f64::min);
        let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(PreprocessError::ZeroRange);
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    /// [`MinMaxStats::apply`] clipped to `[0, 1]`, for data outside the fit range.
    pub fn apply_clipped(&self, x: f64) -> f64 {
        self.apply(x).clamp(0.0, 1.0)
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }
}

/// `(x - min) / (max - min)`; outputs lie in `[0, 1]`.
pub fn minmax_normalize(series: &[f64]) -> Result<(Vec<f64>, MinMaxStats), PreprocessError> {
    let stats = MinMaxStats::fit(series)?;
    Ok((series.iter().map(|&x| stats.apply(x)).collect(), stats))
}

pub const BOXCOX_LAMBDA_MIN: f64 = -2.0;
pub const BOXCOX_LAMBDA_MAX: f64 = 2.0;
pub const BOXCOX_LAMBDA_STEP: f64 = 0.01;

/// `(x^λ - 1) / λ`, or `ln x` at `λ = 0`.
pub fn boxcox_transform(x: f64, lambda: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        x.ln()
    } else {
        (x.powf(lambda) - 1.0) / lambda
    }
}

fn check_positive(series: &[f64]) -> Result<(), PreprocessError> {
    match series.iter().position(|&x| !(x > 0.0)) {
        Some(index) => Err(PreprocessError::NonPositiveValue {
            index,
            value: series[index],
        }),
        None => Ok(()),
    }
}

/// Profile log-likelihood of the Box-Cox model at `lambda`:
/// `-n/2 · ln σ²(λ) + (λ - 1) Σ ln x`, with σ² the biased variance of the
/// transformed data.
pub fn boxcox_log_likelihood(series: &[f64], lambda: f64) -> f64 {
    let n = series.len() as f64;
    let y: Vec<f64> = series.iter().map(|&x| boxcox_transform(x, lambda)).collect();
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let log_sum: f64 = series.iter().map(|x| x.ln()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * log_sum
}

/// The λ grid searched by [`boxcox`], `-2.00, -1.99, …, 2.00`.
pub fn boxcox_lambda_grid() -> impl Iterator<Item = f64> {
    let steps = ((BOXCOX_LAMBDA_MAX - BOXCOX_LAMBDA_MIN) / BOXCOX_LAMBDA_STEP).round() as i64;
    (0..=steps).map(|i| BOXCOX_LAMBDA_MIN + i as f64 * BOXCOX_LAMBDA_STEP)
}

/// Grid-search maximum-likelihood λ. Ties keep the smallest λ.
pub fn boxcox_fit_lambda(series: &[f64]) -> Result<f64, PreprocessError> {
    check_positive(series)?;
    if series.len() < 2 {
        return Err(PreprocessError::TooFewValues(series.len()));
    }
    let mut best = (f64::NEG_INFINITY, 1.0);
    for lambda in boxcox_lambda_grid() {
        let ll = boxcox_log_likelihood(series, lambda);
        if ll > best.0 {
            best = (ll, lambda);
        }
    }
    Ok(best.1)
}

/// Fits λ and transforms the series.
pub fn boxcox(series: &[f64]) -> Result<(Vec<f64>, f64), PreprocessError> {
    let lambda = boxcox_fit_lambda(series)?;
    Ok((boxcox_with_lambda(series, lambda)?, lambda))
}

pub fn boxcox_with_lambda(series: &[f64], lambda: f64) -> Result<Vec<f64>, PreprocessError> {
    check_positive(series)?;
    Ok(series.iter().map(|&x| boxcox_transform(x, lambda)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zscore_consecutive_integers() {
        let (z, s) = zscore_normalize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(z, [-1.0, 0.0, 1.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(zscore_normalize(&[5.0; 3]).unwrap_err(), PreprocessError::ZeroVariance);
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap().0, [0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[1.0, 3.0]).unwrap().0, [0.0, 1.0]);
        assert_eq!(minmax_normalize(&[7.0, 7.0]).unwrap_err(), PreprocessError::ZeroRange);
    }

    #[test]
    fn boxcox_fixed_lambda() {
        assert_eq!(boxcox_transform(5.0, 1.0), 4.0);
        assert!((boxcox_transform(std::f64::consts::E, 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(
            boxcox(&[1.0, 0.0]).unwrap_err(),
            PreprocessError::NonPositiveValue { index: 1, value: 0.0 }
        );
    }

    #[test]
    fn grid_contains_zero_and_endpoints() {
        let grid: Vec<f64> = boxcox_lambda_grid().collect();
        assert_eq!(grid.len(), 401);
        assert_eq!(grid[0], -2.0);
        assert_eq!(grid[400], 2.0);
        assert!(grid[200].abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn zscore_output_is_standardized(s in prop::collection::vec(-1e3..1e3f64, 2..50)) {
            prop_assume!(ZScoreStats::fit(&s).is_ok());
            let (z, stats) = zscore_normalize(&s).unwrap();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-12);
            for (x, zi) in s.iter().zip(&z) {
                prop_assert!((stats.invert(*zi) - x).abs() < 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn minmax_in_unit_interval_and_invertible(s in prop::collection::vec(-1e3..1e3f64, 2..50)) {
            prop_assume!(MinMaxStats::fit(&s).is_ok());
            let (y, stats) = minmax_normalize(&s).unwrap();
            for (x, yi) in s.iter().zip(&y) {
                prop_assert!((0.0..=1.0).contains(yi));
                prop_assert!((stats.invert(*yi) - x).abs() < 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn boxcox_unit_lambda_is_shift(s in prop::collection::vec(1e-3..1e3f64, 1..30)) {
            let y = boxcox_with_lambda(&s, 1.0).unwrap();
            for (x, yi) in s.iter().zip(&y) {
                prop_assert!((yi - (x - 1.0)).abs() < 1e-12 * x.max(1.0));
            }
        }
    }
}
