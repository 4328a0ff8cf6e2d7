//! Gap filling, outlier removal, smoothing and phase filtering.

use super::records::ExcavationRecord;
use super::PreprocessError;

/// Floor applied to the rolling MAD so flat stretches do not flag every
/// small deviation as an outlier.
pub const MAD_FLOOR: f64 = 1e-9;

/// Linearly interpolates NaN gaps between known neighbours and copies the
/// nearest known value into leading and trailing gaps.
pub fn fill_missing(series: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    let known: Vec<usize> = (0..series.len()).filter(|&i| !series[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(PreprocessError::AllMissing);
    };
    let mut out = series.to_vec();
    out[..first].fill(series[first]);
    out[last + 1..].fill(series[last]);
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let (va, vb) = (series[a], series[b]);
        for i in a + 1..b {
            let t = (i - a) as f64 / (b - a) as f64;
            out[i] = va + t * (vb - va);
        }
    }
    Ok(out)
}

fn check_window(window: usize, len: usize) -> Result<(), PreprocessError> {
    if window == 0 || window % 2 == 0 {
        return Err(PreprocessError::InvalidWindow(window));
    }
    if window > len {
        return Err(PreprocessError::WindowTooLarge { window, len });
    }
    Ok(())
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Full-width window around `i`, shifted inward at the series edges.
fn window_bounds(i: usize, window: usize, len: usize) -> (usize, usize) {
    let half = window / 2;
    let start = i.saturating_sub(half).min(len - window);
    (start, start + window)
}

/// Rolling median and median absolute deviation over a centered window.
/// NaN readings inside a window are ignored.
pub fn rolling_median_mad(series: &[f64], window: usize) -> Result<Vec<(f64, f64)>, PreprocessError> {
    check_window(window, series.len())?;
    let mut buf = Vec::with_capacity(window);
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let (lo, hi) = window_bounds(i, window, series.len());
        buf.clear();
        buf.extend(series[lo..hi].iter().copied().filter(|v| !v.is_nan()));
        if buf.is_empty() {
            out.push((f64::NAN, f64::NAN));
            continue;
        }
        let med = median(&mut buf);
        buf.iter_mut().for_each(|v| *v = (*v - med).abs());
        out.push((med, median(&mut buf)));
    }
    Ok(out)
}

/// Marks points further than `k` rolling MADs from the rolling median as
/// missing, then refills them with [`fill_missing`].
pub fn remove_discrete_points(series: &[f64], window: usize, k: f64) -> Result<Vec<f64>, PreprocessError> {
    let stats = rolling_median_mad(series, window)?;
    let marked: Vec<f64> = series
        .iter()
        .zip(&stats)
        .map(|(&x, &(med, mad))| {
            if !x.is_nan() && (x - med).abs() > k * mad.max(MAD_FLOOR) {
                f64::NAN
            } else {
                x
            }
        })
        .collect();
    fill_missing(&marked)
}

/// Centered moving average; near the edges the window is truncated.
pub fn window_smooth(series: &[f64], window: usize) -> Result<Vec<f64>, PreprocessError> {
    check_window(window, series.len())?;
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

/// Keeps only stable excavation rows, preserving order.
pub fn filter_operating_segments(records: &[ExcavationRecord]) -> Vec<ExcavationRecord> {
    records
        .iter()
        .filter(|r| r.phase.is_operating())
        .cloned()
        .collect()
}
