use crate::error::{LabError, Result};

/// Lower clamp applied to `q` before dividing.
pub const Q_FLOOR: f64 = 1e-10;
const NORMALIZATION_TOL: f64 = 1e-4;

/// `D_KL(p ‖ q) = Σ p_i ln(p_i / q_i)` in nats.
///
/// Terms with `p_i = 0` contribute nothing and `q_i` is clamped below at
/// [`Q_FLOOR`]. Rounding-level negative totals are flushed to zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LabError::Dimension(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let sum: f64 = dist.iter().sum();
        if dist.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LabError::Input(format!(
                "{name} is not a probability vector (sum {sum})"
            )));
        }
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(Q_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Softmax at temperature 1, evaluated in `f64` with max subtraction.
pub fn logits_to_probs(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
