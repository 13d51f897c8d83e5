//! Stable elementary operations and gradient verification.
//!
//! Vectors are plain `&[f64]` slices; every public operation rejects
//! NaN/Inf inputs instead of propagating them.

use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// log Σ exp(vᵢ), max-shifted for stability.
///
/// Satisfies max(v) ≤ result ≤ max(v) + ln(len(v)).
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    if !math::all_finite(values) {
        return Err(Error::NonFinite("log_sum_exp input"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| math::exp(v - max)).sum();
    Ok(max + math::ln(sum))
}

/// Softmax; non-negative, sums to one, invariant under constant shifts.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|&v| math::exp(v - lse)).collect())
}

/// Compare an analytic gradient against central finite differences.
///
/// The step for coordinate i is `eps * (1 + |xᵢ|)`; returns the largest
/// per-coordinate relative error, with the denominator floored at 1 so that
/// coordinates where both sides vanish compare absolutely.
pub fn check_gradient<F, G>(f: F, grad: G, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if point.is_empty() {
        return Err(Error::EmptyInput("check_gradient"));
    }
    let analytic = grad(point);
    if analytic.len() != point.len() {
        return Err(Error::DimensionMismatch {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let h = eps * (1.0 + math::abs(point[i]));
        probe[i] = point[i] + h;
        let up = f(&probe);
        probe[i] = point[i] - h;
        let down = f(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("check_gradient function value"));
        }
        let fd = (up - down) / (2.0 * h);
        let denom = math::abs(analytic[i]).max(math::abs(fd)).max(1.0);
        worst = worst.max(math::abs(analytic[i] - fd) / denom);
    }
    Ok(worst)
}

/// Sample mean.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    math::sqrt(ss / (values.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn lse_single_element_is_identity() {
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
    }

    #[test]
    fn lse_of_two_zeros_is_ln_two() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - math::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lse_rejects_empty_and_non_finite() {
        assert_eq!(log_sum_exp(&[]), Err(Error::EmptyInput("log_sum_exp")));
        assert!(log_sum_exp(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn lse_matches_compensated_naive_sum() {
        // Oracle: Neumaier-compensated summation of raw exponentials on a
        // range where exp cannot overflow.
        let mut rng = Rng::new(17);
        let v: Vec<f64> = (0..100).map(|_| rng.next_f64() * 10.0 - 5.0).collect();
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &x in &v {
            let e = math::exp(x);
            let t = sum + e;
            comp += if math::abs(sum) >= math::abs(e) {
                (sum - t) + e
            } else {
                (e - t) + sum
            };
            sum = t;
        }
        let oracle = math::ln(sum + comp);
        let got = log_sum_exp(&v).unwrap();
        assert!((got - oracle).abs() / oracle.abs() < 1e-12);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[3.7, 3.7, 3.7, 3.7]).unwrap();
        for p in s {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_check_on_square() {
        let err = check_gradient(
            |x| x[0] * x[0],
            |x| vec![2.0 * x[0]],
            &[3.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn gradient_check_on_norm_squared_5d() {
        let mut rng = Rng::new(2);
        let p: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let err = check_gradient(
            |x| x.iter().map(|v| v * v).sum::<f64>(),
            |x| x.iter().map(|v| 2.0 * v).collect(),
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn gradient_check_flags_non_finite_function() {
        let r = check_gradient(|_| f64::NAN, |x| x.to_vec(), &[1.0], 1e-5);
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn lse_is_bounded_by_max_plus_log_n(v in prop::collection::vec(-50.0f64..50.0, 1..60)) {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = log_sum_exp(&v).unwrap();
            prop_assert!(lse >= max - 1e-12);
            prop_assert!(lse <= max + math::ln(v.len() as f64) + 1e-12);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..40),
            shift in -20.0f64..20.0,
        ) {
            let s = softmax(&v).unwrap();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_shift_by_17_3_matches() {
        let mut rng = Rng::new(9);
        let v: Vec<f64> = (0..50).map(|_| rng.normal() * 3.0).collect();
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.3).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn std_uses_sample_denominator() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        let s = sample_std(&[1.0, 3.0]);
        assert!((s - math::sqrt(2.0)).abs() < 1e-15);
    }
}
