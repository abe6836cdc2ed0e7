//! Standard normal helpers for the probit link.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Below this argument the ratio `φ(x)/Φ(x)` switches to a continued fraction.
const TAIL_START: f64 = -6.0;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `φ(x) / Φ(x)`, finite for every finite `x`.
pub fn inverse_mills(x: f64) -> f64 {
    if x >= TAIL_START {
        return normal_pdf(x) / normal_cdf(x);
    }
    // Φ(x)/φ(x) = 1/(t + 1/(t + 2/(t + 3/(t + ...)))) with t = -x
    let t = -x;
    let mut f = t;
    for n in (1..=60).rev() {
        f = t + n as f64 / f;
    }
    f
}

/// Mean of `N(em, 1)` truncated to `z > 0` when `y = 1` and `z <= 0` when
/// `y = 0`.
pub fn truncated_mean(y: f64, em: f64) -> f64 {
    let s = if y > 0.5 { 1.0 } else { -1.0 };
    em + s * inverse_mills(s * em)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-14);
    }

    #[test]
    fn mills_ratio_is_continuous_at_switch() {
        let below = inverse_mills(TAIL_START - 1e-9);
        let above = inverse_mills(TAIL_START + 1e-9);
        assert!((below - above).abs() < 1e-7, "{below} vs {above}");
    }

    #[test]
    fn extreme_arguments_stay_finite() {
        for x in [-40.0, -1e3, -1e8, 40.0, 1e3] {
            let r = inverse_mills(x);
            assert!(r.is_finite() && r >= 0.0, "{x}: {r}");
        }
        // deep tail: φ(x)/Φ(x) ≈ -x
        assert!((inverse_mills(-1e3) - 1e3).abs() < 1e-2);
    }
}
