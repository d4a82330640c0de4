//! Scalar activation functions and their derivatives.
//!
//! All functions are numerically stable for |x| well beyond 30, which covers
//! every logit that can arise from scores clamped into `[1e-6, 1 - 1e-6]`.

use crate::error::{Error, Result};

/// Exponential Linear Unit with alpha = 1: `x` for `x >= 0`, `e^x - 1` below.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`]. Continuous at 0 (both sides give 1).
#[inline]
pub fn elu_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Fused `1 + elu(x)`, kept strictly positive in floating point.
///
/// Algebraically `1 + (e^x - 1) = e^x` for `x < 0`; computing the exponential
/// directly avoids the cancellation that would round `1 + elu(x)` to exactly
/// zero for `x` below about -37. The floor guards against `exp` underflow for
/// inputs past -745.
#[inline]
pub fn one_plus_elu(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 + x
    } else {
        x.exp().max(f64::MIN_POSITIVE)
    }
}

/// Derivative of [`one_plus_elu`]: identical to [`elu_deriv`].
#[inline]
pub fn one_plus_elu_deriv(x: f64) -> f64 {
    elu_deriv(x)
}

/// Logistic sigmoid `1 / (1 + e^-x)`, evaluated without overflow for any sign.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid. Callers are expected to clamp scores first; this checked
/// wrapper guards standalone use.
///
/// Returns a domain error unless `p` lies strictly inside `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("logit requires p in (0,1), got {p}")));
    }
    Ok(logit_unchecked(p))
}

/// Inverse sigmoid without the domain check, for inputs already clamped
/// into `[eps, 1 - eps]`.
#[inline]
pub(crate) fn logit_unchecked(p: f64) -> f64 {
    // ln(p) - ln(1 - p); ln_1p keeps precision for p near 0.
    p.ln() - (-p).ln_1p()
}

/// Derivative of the inverse sigmoid: `1 / (p (1 - p))`.
#[inline]
pub(crate) fn logit_deriv(p: f64) -> f64 {
    1.0 / (p * (1.0 - p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_at_zero() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.5), 2.5);
        assert!((elu(-1.0) - (f64::exp(-1.0) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn elu_lower_bound() {
        // ELU(x) > -1 within representable range; 1 + ELU in fused form stays
        // strictly positive even where the plain sum would round to zero.
        assert!(elu(-30.0) > -1.0);
        assert!(one_plus_elu(-30.0) > 0.0);
        assert!(one_plus_elu(-1e6) > 0.0);
        assert_eq!(one_plus_elu(0.0), 1.0);
        assert_eq!(one_plus_elu(2.0), 3.0);
        // Fused and naive forms agree where both are accurate.
        for &x in &[-5.0, -0.3, 0.0, 0.4, 8.0] {
            assert!((one_plus_elu(x) - (1.0 + elu(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn elu_derivative_continuous_at_zero() {
        assert_eq!(elu_deriv(0.0), 1.0);
        assert!((elu_deriv(-1e-12) - 1.0).abs() < 1e-11);
        // Slope matches a central difference straddling 0.
        let h = 1e-7;
        let fd = (elu(h) - elu(-h)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[0.3, 1.0, 7.5, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(sigmoid(-745.0) >= 0.0);
        assert!(sigmoid(745.0) <= 1.0);
        assert!(sigmoid(30.0) < 1.0);
        assert!(sigmoid(-30.0) > 0.0);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        let x = 3.7;
        assert!((logit(sigmoid(x)).unwrap() - x).abs() < 1e-12);
        for &x in &[-12.0, -0.01, 0.0, 5.0, 13.8] {
            assert!((logit(sigmoid(x)).unwrap() - x).abs() < 1e-9);
        }
    }

    #[test]
    fn logit_domain_errors() {
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!(logit(-0.2).is_err());
        assert!(logit(f64::NAN).is_err());
    }

    #[test]
    fn logit_deriv_matches_difference() {
        let p = 0.37;
        let h = 1e-6;
        let fd = (logit_unchecked(p + h) - logit_unchecked(p - h)) / (2.0 * h);
        assert!((logit_deriv(p) - fd).abs() / fd.abs() < 1e-8);
    }
}
