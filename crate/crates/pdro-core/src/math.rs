//! Transcendental functions routed through `libm`.
//!
//! `core` has no float math, and `std`'s implementations are not guaranteed
//! bit-identical across platforms. Every call site in this crate uses these
//! wrappers so that seeded runs reproduce exactly everywhere.

pub use core::f64::consts::{LN_2, PI};

/// ln 10, used by the validation-KL adversary filter.
pub const LN_10: f64 = core::f64::consts::LN_10;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Logistic function 1 / (1 + e^-x).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_1p_exp_matches_naive_in_safe_range() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let naive = ln(1.0 + exp(x));
            assert!((ln_1p_exp(x) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_1p_exp_handles_extremes() {
        assert_eq!(ln_1p_exp(-800.0), 0.0);
        assert!((ln_1p_exp(800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for i in -20..=20 {
            let x = i as f64 * 0.7;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
