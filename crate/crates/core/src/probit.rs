//! Sigmoid, the probit approximation, and three estimators of the Gaussian
//! posterior predictive `∫ σ(a) N(a | μ_a, Σ_a) da`.
//!
//! * [`predictive_probit`]: closed form `σ(μ_a / sqrt(1 + π/8 · Σ_a))`.
//! * [`predictive_mc`]: plain Monte Carlo over `a ~ N(μ_a, Σ_a)`.
//! * [`predictive_quadrature`]: Gauss–Hermite evaluation of the integral,
//!   used as the reference the other two are checked against.

use gauss_quad::GaussHermite;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variances at or below this are treated as exactly zero.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Node count used by the reference quadrature unless told otherwise.
pub const DEFAULT_QUADRATURE_NODES: usize = 64;

/// Smallest node count [`predictive_quadrature`] accepts.
pub const MIN_QUADRATURE_NODES: usize = 32;

/// Distribution of a pre-activation `a = fᵀw` under a Gaussian weight posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationGaussian<T> {
    mean: T,
    var: T,
}

impl<T: Scalar> ActivationGaussian<T> {
    pub fn new(mean: T, var: T) -> Result<Self> {
        if !mean.is_finite() || !var.is_finite() {
            return Err(Error::NonFinite("activation gaussian".into()));
        }
        if var < T::zero() {
            return Err(Error::NegativeVariance(var.as_f64()));
        }
        Ok(Self { mean, var })
    }

    /// A point mass at `mean`.
    pub fn point(mean: T) -> Self {
        Self {
            mean,
            var: T::zero(),
        }
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn var(&self) -> T {
        self.var
    }

    fn is_degenerate(&self) -> bool {
        self.var <= T::lit(ZERO_VARIANCE)
    }
}

/// Constants of the probit approximation `σ(x) ≈ Φ(λx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitConstants<T> {
    pub lambda: T,
}

impl<T: Scalar> ProbitConstants<T> {
    /// `λ = sqrt(π/8)`, which matches the slopes of `σ` and `Φ(λ·)` at the origin.
    pub fn new() -> Self {
        Self {
            lambda: (T::PI() / T::lit(8.0)).sqrt(),
        }
    }

    /// `λ² = π/8`.
    pub fn lambda_sq(&self) -> T {
        self.lambda * self.lambda
    }
}

impl<T: Scalar> Default for ProbitConstants<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x / T::SQRT_2()).erf())
}

/// `Φ(λx)`, the probit stand-in for `σ(x)`.
#[inline]
pub fn probit_approx<T: Scalar>(x: T) -> T {
    normal_cdf(ProbitConstants::<T>::new().lambda * x)
}

/// `(π/8)`-scaled variance inflation `1 / sqrt(1 + π/8 · Σ_a)`.
#[inline]
pub(crate) fn variance_scale<T: Scalar>(var: T) -> T {
    let k = ProbitConstants::<T>::new().lambda_sq();
    T::one() / (T::one() + k * var).sqrt()
}

/// Closed-form predictive `σ(μ_a / sqrt(1 + π/8 · Σ_a))`.
///
/// Degenerate variances return `sigmoid(mean)` bit-for-bit, which is what keeps
/// zero-variance base classes identical to their point-estimate scores.
pub fn predictive_probit<T: Scalar>(g: ActivationGaussian<T>) -> T {
    if g.is_degenerate() {
        return sigmoid(g.mean);
    }
    sigmoid(g.mean * variance_scale(g.var))
}

/// Monte Carlo estimate `(1/T) Σ σ(a_t)`, `a_t ~ N(μ_a, Σ_a)`, drawn from a
/// ChaCha8 stream seeded with `seed`.
pub fn predictive_mc<T: Scalar>(g: ActivationGaussian<T>, samples: usize, seed: u64) -> Result<T>
where
    StandardNormal: Distribution<T>,
{
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least one sample".into()));
    }
    if g.is_degenerate() {
        return Ok(sigmoid(g.mean));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = g.var.sqrt();
    let mut acc = T::zero();
    for _ in 0..samples {
        let eps: T = StandardNormal.sample(&mut rng);
        acc = acc + sigmoid(g.mean + sd * eps);
    }
    Ok(acc / T::from_usize(samples).expect("sample count representable"))
}

/// Gauss–Hermite rule for expectations under a Gaussian.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl HermiteRule {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < MIN_QUADRATURE_NODES {
            return Err(Error::InvalidArgument(format!(
                "quadrature needs at least {MIN_QUADRATURE_NODES} nodes, got {nodes}"
            )));
        }
        let rule = GaussHermite::new(nodes)
            .map_err(|e| Error::InvalidArgument(format!("gauss-hermite: {e}")))?;
        let (nodes, weights) = rule.into_iter().unzip();
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[h(a)]` for `a ~ N(mean, var)`, via the substitution `a = μ + sqrt(2Σ)·x`.
    pub fn expectation<T: Scalar>(&self, g: ActivationGaussian<T>, h: impl Fn(T) -> T) -> T {
        if g.is_degenerate() {
            return h(g.mean);
        }
        let scale = (T::lit(2.0) * g.var).sqrt();
        let total = self
            .nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + T::lit(w) * h(g.mean + scale * T::lit(x)));
        total / T::PI().sqrt()
    }

    pub fn predictive<T: Scalar>(&self, g: ActivationGaussian<T>) -> T {
        self.expectation(g, sigmoid)
    }
}

/// Gauss–Hermite evaluation of `∫ σ(a) N(a | μ_a, Σ_a) da` with `nodes` nodes.
pub fn predictive_quadrature<T: Scalar>(g: ActivationGaussian<T>, nodes: usize) -> Result<T> {
    Ok(HermiteRule::new(nodes)?.predictive(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(m: f64, v: f64) -> ActivationGaussian<f64> {
        ActivationGaussian::new(m, v).unwrap()
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        for &x in &[0.1f64, 1.0, 7.5, 40.0, 700.0, 1000.0] {
            assert_abs_diff_eq!(sigmoid(x) + sigmoid(-x), 1.0, epsilon = 1e-15);
            assert!(sigmoid(-x).is_finite() && sigmoid(x).is_finite());
        }
        assert_abs_diff_eq!(sigmoid(0.8474f64), 0.6999, epsilon = 2e-4);
        assert!(sigmoid(-1e3f64) >= 0.0 && sigmoid(1e3f64) <= 1.0);
    }

    #[test]
    fn lambda_squared_is_pi_over_eight() {
        let c = ProbitConstants::<f64>::new();
        assert_abs_diff_eq!(c.lambda_sq(), std::f64::consts::PI / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn probit_approx_matches_sigmoid_at_origin() {
        assert_eq!(probit_approx(0.0f64), 0.5);
        let h = 1e-5;
        let slope = (probit_approx(h) - probit_approx(-h)) / (2.0 * h);
        assert_abs_diff_eq!(slope, 0.25, epsilon = 1e-8);
        let worst = (0..=200_000)
            .map(|i| -10.0 + i as f64 * 1e-4)
            .map(|x| (probit_approx(x) - sigmoid(x)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.02, "{worst}");
    }

    #[test]
    fn predictive_probit_examples() {
        assert_eq!(predictive_probit(g(1.5, 0.0)), sigmoid(1.5));
        assert_abs_diff_eq!(predictive_probit(g(0.0, 7.3)), 0.5, epsilon = 1e-15);
        let p = predictive_probit(g(1.0, 1.0));
        assert_abs_diff_eq!(p, 0.700, epsilon = 1e-3);
        let q = predictive_quadrature(g(1.0, 1.0), 64).unwrap();
        assert!((p - q).abs() <= 0.02);
        assert!(ActivationGaussian::new(0.0, -1e-3).is_err());
        assert!(ActivationGaussian::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn predictive_mc_examples() {
        assert_eq!(predictive_mc(g(2.0, 0.0), 7, 1).unwrap(), sigmoid(2.0));
        let p = predictive_mc(g(0.0, 4.0), 100_000, 3).unwrap();
        assert!((p - 0.5).abs() <= 0.01, "{p}");
        let q = predictive_quadrature(g(1.0, 1.0), 64).unwrap();
        let p = predictive_mc(g(1.0, 1.0), 100_000, 11).unwrap();
        assert!((p - q).abs() <= 0.01);
        assert!(predictive_mc(g(0.0, 1.0), 0, 0).is_err());
        assert_eq!(
            predictive_mc(g(0.3, 2.0), 50, 9).unwrap(),
            predictive_mc(g(0.3, 2.0), 50, 9).unwrap()
        );
    }

    #[test]
    fn quadrature_examples() {
        let rule = HermiteRule::new(64).unwrap();
        assert_eq!(rule.predictive(g(0.7, 0.0)), sigmoid(0.7));
        for &v in &[0.5, 3.0, 25.0] {
            assert_abs_diff_eq!(rule.predictive(g(0.0, v)), 0.5, epsilon = 1e-14);
        }
        assert!(HermiteRule::new(31).is_err());
    }

    #[test]
    fn quadrature_converges_in_node_count() {
        let coarse = HermiteRule::new(32).unwrap();
        let medium = HermiteRule::new(64).unwrap();
        let fine = HermiteRule::new(128).unwrap();
        let means = (0..=48).map(|i| -6.0 + 0.25 * i as f64);
        let mut worst_low_var: f64 = 0.0;
        let mut worst_64: f64 = 0.0;
        for m in means {
            for j in 0..=40 {
                let v = 0.25 * j as f64;
                let reference = fine.predictive(g(m, v));
                if v <= 2.0 {
                    worst_low_var = worst_low_var.max((coarse.predictive(g(m, v)) - reference).abs());
                }
                worst_64 = worst_64.max((medium.predictive(g(m, v)) - reference).abs());
            }
        }
        // 32 nodes resolve the integrand's complex poles only for moderate variance.
        assert!(worst_low_var < 1e-8, "{worst_low_var}");
        assert!(worst_64 < 1e-6, "{worst_64}");
    }

    #[test]
    fn generic_over_f32() {
        let p = predictive_probit(ActivationGaussian::new(1.0f32, 1.0).unwrap());
        assert!((p as f64 - predictive_probit(g(1.0, 1.0))).abs() < 1e-6);
        let q = predictive_quadrature(ActivationGaussian::new(1.0f32, 1.0).unwrap(), 64).unwrap();
        assert!((q - p).abs() < 0.02);
    }
}
