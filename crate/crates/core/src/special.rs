//! Gaussian tail numerics shared by the truncated-normal p-values and the
//! noise-model CDFs.
//!
//! Everything below works with the standard normal law. Tail masses are kept
//! in log-space so that unions of intervals far out in the tails still give a
//! finite, accurate ratio.

use libm::{erf, erfc};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Beyond this many standard deviations the upper tail is evaluated through
/// the scaled complementary error function.
pub const LOG_SPACE_SWITCH: f64 = 8.0;

const ERFCX_CF_TERMS: usize = 120;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function, `1 - Φ(x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Scaled complementary error function `exp(y²)·erfc(y)`.
///
/// For `y ≥ 2` the Laplace continued fraction is evaluated bottom-up; it
/// converges fast there and never underflows.
pub fn erfcx(y: f64) -> f64 {
    if y < 2.0 {
        return (y * y).exp() * erfc(y);
    }
    let mut f = y;
    for k in (1..=ERFCX_CF_TERMS).rev() {
        f = y + (k as f64 * 0.5) / f;
    }
    1.0 / (PI.sqrt() * f)
}

/// `ln(1 - Φ(x))`, accurate for arbitrarily large `x`.
pub fn log_norm_sf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x < LOG_SPACE_SWITCH {
        (0.5 * erfc(x * FRAC_1_SQRT_2)).ln()
    } else {
        (0.5 * erfcx(x * FRAC_1_SQRT_2)).ln() - 0.5 * x * x
    }
}

/// `ln Φ(x)`.
pub fn log_norm_cdf(x: f64) -> f64 {
    log_norm_sf(-x)
}

/// `ln(e^a - e^b)` for `a ≥ b`.
pub fn log_diff_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp_m1()).ln()
}

/// `ln Σ e^{x_i}`; empty input gives `-∞`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log of the standard normal probability of `[lo, hi]`.
pub fn log_std_normal_mass(lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return f64::NEG_INFINITY;
    }
    if lo >= 0.0 {
        log_diff_exp(log_norm_sf(lo), log_norm_sf(hi))
    } else if hi <= 0.0 {
        log_diff_exp(log_norm_sf(-hi), log_norm_sf(-lo))
    } else {
        // straddles zero: Φ(hi) - Φ(lo) = ½erf(hi/√2) + ½erf(-lo/√2)
        let upper = if hi.is_infinite() { 0.5 } else { 0.5 * erf(hi * FRAC_1_SQRT_2) };
        let lower = if lo.is_infinite() { 0.5 } else { 0.5 * erf(-lo * FRAC_1_SQRT_2) };
        (upper + lower).ln()
    }
}
