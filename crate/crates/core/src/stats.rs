//! Small numeric helpers shared by the harness, simulator and reports.

use serde::{Deserialize, Serialize};

/// Ordinary least-squares line `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fits a line through `(x, y)` pairs. `r2` is 1 when the points are fitted
/// exactly (including constant `y`). Returns `None` for fewer than two points
/// or when every `x` is equal.
pub fn ols(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(LinearFit {
        slope,
        intercept,
        r2,
    })
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

const COUNT_GUARD: f64 = 1e-9;

/// `floor(ratio · n)`, robust to decimal ratios that are not exact in binary.
pub fn floor_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + COUNT_GUARD).floor() as usize).min(n)
}

/// `ceil(fraction · n)`, robust to decimal fractions that are not exact in binary.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64 - COUNT_GUARD).ceil().max(0.0) as usize).min(n)
}
