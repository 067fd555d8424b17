//! Small numeric helpers shared across modules.

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(expit(x))`.
pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`). Returns 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Quantile of already sorted data by linear interpolation between order
/// statistics (position `(n - 1) * p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(xs), p)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// `log N(x; mean, var)`.
pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * (std::f64::consts::TAU * var).ln() - 0.5 * z * z / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_stable_at_extremes() {
        assert_eq!(expit(800.0), 1.0);
        assert!(expit(-800.0) >= 0.0);
        assert!((log_expit(-40.0) - (-40.0 - (-40.0f64).exp().ln_1p())).abs() < 1e-12);
        assert!((log_expit(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn interpolated_quantiles() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert!((quantile(&xs, 0.025) - 0.025).abs() < 1e-15);
        assert!((quantile(&xs, 0.975) - 0.975).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
