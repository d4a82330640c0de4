//! Clenshaw–Curtis quadrature on the reference interval [-1, 1], plus
//! definite integration over [0, b] for arbitrary finite b.
//!
//! Nodes are the Chebyshev extrema `x_j = cos(j pi / (T-1))`; weights come
//! from the standard cosine-sum formula and are computed once at rule
//! construction. The rule is exact for polynomials of degree <= T-1.
//! Negative upper limits (needed whenever a score is below 0.5, so its logit
//! is negative) are handled by the affine map, not by interval swapping.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Fixed node/weight table on [-1, 1].
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Build the T-point Clenshaw–Curtis rule. Requires `T >= 2`.
    pub fn clenshaw_curtis(t: usize) -> Result<Self> {
        if t < 2 {
            return Err(Error::Config(format!(
                "quadrature rule needs at least 2 nodes, got {t}"
            )));
        }
        let n = t - 1;
        let mut nodes = Vec::with_capacity(t);
        let mut weights = Vec::with_capacity(t);
        for j in 0..=n {
            let theta = j as f64 * PI / n as f64;
            nodes.push(theta.cos());
            let mut sum = 0.0;
            for k in 1..=n / 2 {
                let b_k = if 2 * k == n { 1.0 } else { 2.0 };
                sum += b_k / ((4 * k * k - 1) as f64) * (2.0 * k as f64 * theta).cos();
            }
            let c_j = if j == 0 || j == n { 1.0 } else { 2.0 };
            weights.push(c_j / n as f64 * (1.0 - sum));
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reference nodes in [-1, 1], ordered from +1 down to -1.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Node positions for the interval [0, b]: `t_j = (b/2)(x_j + 1)`.
    pub fn mapped_nodes(&self, b: f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| 0.5 * b * (x + 1.0)).collect()
    }

    /// `integral_0^b f(t) dt ~= (b/2) * sum_j w_j f(t_j)` given `f` evaluated
    /// at the mapped nodes. The sign of the result follows the sign of `b`
    /// for positive integrands.
    pub fn integrate_on_interval(&self, f_at_mapped_nodes: &[f64], b: f64) -> Result<f64> {
        if f_at_mapped_nodes.len() != self.nodes.len() {
            return Err(Error::Shape(format!(
                "integrand sampled at {} nodes, rule has {}",
                f_at_mapped_nodes.len(),
                self.nodes.len()
            )));
        }
        let s: f64 = self
            .weights
            .iter()
            .zip(f_at_mapped_nodes)
            .map(|(w, f)| w * f)
            .sum();
        Ok(0.5 * b * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
        coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// Analytic antiderivative oracle: integral of sum c_k x^k over [0, b].
    fn poly_integral(coeffs: &[f64], b: f64) -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| c * b.powi(k as i32 + 1) / (k as f64 + 1.0))
            .sum()
    }

    #[test]
    fn two_point_rule_is_trapezoid() {
        let r = QuadratureRule::clenshaw_curtis(2).unwrap();
        assert_eq!(r.nodes(), &[1.0, -1.0]);
        assert_eq!(r.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_degenerate_node_count() {
        assert!(matches!(
            QuadratureRule::clenshaw_curtis(1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weights_sum_to_interval_length() {
        for t in [2, 5, 50] {
            let r = QuadratureRule::clenshaw_curtis(t).unwrap();
            let sum: f64 = r.weights().iter().sum();
            assert!((sum - 2.0).abs() < 1e-12, "T={t}: sum={sum}");
        }
    }

    #[test]
    fn nodes_symmetric_about_zero() {
        for t in [2, 5, 50, 51] {
            let r = QuadratureRule::clenshaw_curtis(t).unwrap();
            let n = r.len();
            for j in 0..n {
                assert!((r.nodes()[j] + r.nodes()[n - 1 - j]).abs() < 1e-12);
                assert!((r.weights()[j] - r.weights()[n - 1 - j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_interval_x_squared() {
        // Analytic: integral of x^2 over [-1,1] = 2/3.
        let r = QuadratureRule::clenshaw_curtis(5).unwrap();
        let quad: f64 = r
            .nodes()
            .iter()
            .zip(r.weights())
            .map(|(x, w)| w * x * x)
            .sum();
        assert!((quad - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_integrand_unit_interval() {
        let r = QuadratureRule::clenshaw_curtis(2).unwrap();
        let f = vec![1.0; r.len()];
        assert_eq!(r.integrate_on_interval(&f, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn linear_integrand_matches_antiderivative() {
        let r = QuadratureRule::clenshaw_curtis(5).unwrap();
        let f = r.mapped_nodes(2.0);
        let q = r.integrate_on_interval(&f, 2.0).unwrap();
        assert!((q - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_upper_limit_flips_sign() {
        let r = QuadratureRule::clenshaw_curtis(7).unwrap();
        let f = vec![1.0; r.len()];
        let q = r.integrate_on_interval(&f, -1.0).unwrap();
        assert!((q + 1.0).abs() < 1e-15);
    }

    #[test]
    fn node_count_mismatch_is_shape_error() {
        let r = QuadratureRule::clenshaw_curtis(5).unwrap();
        assert!(matches!(
            r.integrate_on_interval(&[1.0, 2.0], 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn degree_ten_polynomials_integrate_to_analytic_values() {
        let r = QuadratureRule::clenshaw_curtis(50).unwrap();
        // Deterministic pseudo-random coefficients.
        let mut state = 0x9e3779b97f4a7c15_u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..20 {
            let coeffs: Vec<f64> = (0..11).map(|_| next()).collect();
            for &b in &[-10.0, -3.2, -0.5, 0.7, 4.1, 10.0] {
                let f: Vec<f64> = r.mapped_nodes(b).iter().map(|&t| poly_eval(&coeffs, t)).collect();
                let q = r.integrate_on_interval(&f, b).unwrap();
                let a = poly_integral(&coeffs, b);
                let rel = (q - a).abs() / a.abs().max(1.0);
                assert!(rel < 1e-10, "b={b}: quad={q}, analytic={a}");
            }
        }
    }

    proptest! {
        #[test]
        fn integration_is_linear(
            alpha in -5.0..5.0_f64,
            beta in -5.0..5.0_f64,
            b in -8.0..8.0_f64,
            seed in 0u64..1000
        ) {
            let r = QuadratureRule::clenshaw_curtis(9).unwrap();
            let f: Vec<f64> = (0..r.len()).map(|j| ((j as u64 + seed) % 7) as f64 * 0.3 - 1.0).collect();
            let g: Vec<f64> = (0..r.len()).map(|j| ((j as u64 * 3 + seed) % 5) as f64 * 0.25).collect();
            let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = r.integrate_on_interval(&combo, b).unwrap();
            let rhs = alpha * r.integrate_on_interval(&f, b).unwrap()
                + beta * r.integrate_on_interval(&g, b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }
    }
}
