//! Per-class classification heads over box features.
//!
//! Three scoring modes share one feature layout (a trailing constant 1 carries
//! the bias):
//!
//! * point estimates scored with an independent sigmoid per class,
//! * a diagonal Gaussian weight posterior scored with the closed-form probit
//!   predictive (or Monte Carlo, for the sampling baseline),
//! * a softmax over classes plus a background row, trained with cross-entropy.
//!
//! The Bayesian head is trained on focal loss over the predictive plus a
//! `KL(N(μ, Σ) ‖ N(0, 1))` prior term; gradients are analytic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::probit::{predictive_mc, predictive_probit, sigmoid, variance_scale, ActivationGaussian};
use crate::scalar::{softplus, softplus_inv, Scalar};

/// Probabilities are clamped to `[ε, 1 − ε]` inside every log-loss.
pub const PROB_EPS: f64 = 1e-7;

/// Feature of one proposal. The last entry is the constant bias input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxFeature<T>(Vec<T>);

impl<T: Scalar> BoxFeature<T> {
    /// Appends the bias entry to `values`.
    pub fn with_bias(mut values: Vec<T>) -> Self {
        values.push(T::one());
        Self(values)
    }

    /// Wraps a vector that already carries its bias entry.
    pub fn from_raw(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Ground-truth or predicted label of a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Class(usize),
    Background,
}

impl ClassLabel {
    pub fn index(self) -> Option<usize> {
        match self {
            ClassLabel::Class(c) => Some(c),
            ClassLabel::Background => None,
        }
    }

    fn check(self, classes: usize) -> Result<()> {
        match self {
            ClassLabel::Class(c) if c >= classes => Err(Error::UnknownClass(c)),
            _ => Ok(()),
        }
    }
}

/// Point-estimate class weights, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointClassifier<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> PointClassifier<T> {
    pub fn new(weights: Matrix<T>) -> Self {
        Self { weights }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }
}

/// Diagonal Gaussian posterior over class weights; `Σ = softplus(rho)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightPosterior<T> {
    mu: Matrix<T>,
    rho: Matrix<T>,
}

impl<T: Scalar> ClassWeightPosterior<T> {
    pub fn new(mu: Matrix<T>, rho: Matrix<T>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::ShapeMismatch {
                name: "rho".into(),
                expected: mu.shape().to_vec(),
                got: rho.shape().to_vec(),
            });
        }
        Ok(Self { mu, rho })
    }

    /// `μ ~ N(0, 0.01)` entrywise and `softplus(rho) = 1`.
    pub fn init(classes: usize, dim: usize, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<T>,
    {
        let sd = T::lit(0.1);
        let mu = Matrix::from_fn(classes, dim, |_, _| {
            let z: T = StandardNormal.sample(rng);
            sd * z
        });
        Self::with_mean(mu)
    }

    /// Given means with unit variances (the prior's variance).
    pub fn with_mean(mu: Matrix<T>) -> Self {
        let rho = Matrix::filled(mu.rows(), mu.cols(), softplus_inv(T::one()));
        Self { mu, rho }
    }

    pub fn mu(&self) -> &Matrix<T> {
        &self.mu
    }

    pub fn rho(&self) -> &Matrix<T> {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut Matrix<T> {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut Matrix<T> {
        &mut self.rho
    }

    pub fn classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn variances(&self) -> Matrix<T> {
        self.rho.map(softplus)
    }

    pub fn gaussian(&self) -> GaussianWeights<T> {
        GaussianWeights {
            mu: self.mu.clone(),
            var: self.variances(),
        }
    }
}

/// Means and explicit variances. Unlike [`ClassWeightPosterior`] a variance may
/// be exactly zero, which is how frozen point-estimate rows are represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianWeights<T> {
    pub mu: Matrix<T>,
    pub var: Matrix<T>,
}

impl<T: Scalar> GaussianWeights<T> {
    pub fn point(weights: &Matrix<T>) -> Self {
        Self {
            mu: weights.clone(),
            var: Matrix::zeros(weights.rows(), weights.cols()),
        }
    }

    pub fn classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn vstack(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            mu: self.mu.vstack(&other.mu)?,
            var: self.var.vstack(&other.var)?,
        })
    }

    /// Activation distribution of class `c` for feature `f`.
    pub fn activation(&self, c: usize, f: &[T]) -> Result<ActivationGaussian<T>> {
        let mean = dot(f, self.mu.row(c));
        let var = f
            .iter()
            .zip(self.var.row(c))
            .fold(T::zero(), |acc, (&x, &s)| acc + x * x * s);
        ActivationGaussian::new(mean, var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams<T> {
    pub gamma: T,
    pub alpha: T,
}

impl<T: Scalar> Default for FocalParams<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(2.0),
            alpha: T::lit(0.25),
        }
    }
}

pub fn class_scores_point<T: Scalar>(f: &BoxFeature<T>, w: &PointClassifier<T>) -> Result<Vec<T>> {
    ensure_dim(w.weights.cols(), f.dim())?;
    Ok((0..w.classes())
        .map(|c| sigmoid(dot(f.as_slice(), w.weights.row(c))))
        .collect())
}

pub fn class_scores_probit<T: Scalar>(f: &BoxFeature<T>, post: &ClassWeightPosterior<T>) -> Result<Vec<T>> {
    class_scores_gaussian(f, &post.gaussian())
}

/// Per-class closed-form probit scores under explicit variances.
pub fn class_scores_gaussian<T: Scalar>(f: &BoxFeature<T>, w: &GaussianWeights<T>) -> Result<Vec<T>> {
    ensure_dim(w.mu.cols(), f.dim())?;
    (0..w.classes())
        .map(|c| Ok(predictive_probit(w.activation(c, f.as_slice())?)))
        .collect()
}

/// Per-class Monte Carlo scores; class `c` draws from the stream `seed + c`.
pub fn class_scores_mc<T: Scalar>(
    f: &BoxFeature<T>,
    w: &GaussianWeights<T>,
    samples: usize,
    seed: u64,
) -> Result<Vec<T>>
where
    StandardNormal: Distribution<T>,
{
    ensure_dim(w.mu.cols(), f.dim())?;
    (0..w.classes())
        .map(|c| predictive_mc(w.activation(c, f.as_slice())?, samples, seed.wrapping_add(c as u64)))
        .collect()
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let eps = T::lit(PROB_EPS);
    if p < eps {
        (eps, true)
    } else if p > T::one() - eps {
        (T::one() - eps, true)
    } else {
        (p, false)
    }
}

/// Sigmoid focal loss `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss<T: Scalar>(p: T, positive: bool, params: FocalParams<T>) -> T {
    let (p, _) = clamp_prob(p);
    let (pt, at) = if positive {
        (p, params.alpha)
    } else {
        (T::one() - p, T::one() - params.alpha)
    };
    -at * (T::one() - pt).powf(params.gamma) * pt.ln()
}

/// `d focal / dp`; zero where the probability is clamped.
pub fn focal_loss_dp<T: Scalar>(p: T, positive: bool, params: FocalParams<T>) -> T {
    let (p, clamped) = clamp_prob(p);
    if clamped {
        return T::zero();
    }
    let (pt, at, sign) = if positive {
        (p, params.alpha, T::one())
    } else {
        (T::one() - p, T::one() - params.alpha, -T::one())
    };
    let q = T::one() - pt;
    let g = params.gamma;
    let d_pt = at * (g * q.powf(g - T::one()) * pt.ln() - q.powf(g) / pt);
    sign * d_pt
}

/// `Σ ½(σ² + μ² − 1 − ln σ²)` over every entry of the posterior.
pub fn kl_diag_gaussian<T: Scalar>(post: &ClassWeightPosterior<T>) -> T {
    let half = T::lit(0.5);
    post.mu
        .as_slice()
        .iter()
        .zip(post.rho.as_slice())
        .fold(T::zero(), |acc, (&m, &r)| {
            let var = softplus(r);
            acc + half * (var + m * m - T::one() - ln_softplus(r))
        })
}

/// `ln softplus(x)`, finite for very negative `x`.
fn ln_softplus<T: Scalar>(x: T) -> T {
    if x < T::lit(-30.0) {
        x
    } else {
        softplus(x).ln()
    }
}

fn check_batch<T: Scalar>(batch: &[(BoxFeature<T>, ClassLabel)], classes: usize, dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (f, y) in batch {
        ensure_dim(dim, f.dim())?;
        y.check(classes)?;
    }
    Ok(())
}

fn is_positive(label: ClassLabel, c: usize) -> bool {
    label == ClassLabel::Class(c)
}

/// Mean focal loss over every (proposal, class) binary target plus
/// `kl_weight · KL`.
pub fn loss_classifier<T: Scalar>(
    batch: &[(BoxFeature<T>, ClassLabel)],
    post: &ClassWeightPosterior<T>,
    kl_weight: T,
    focal: FocalParams<T>,
) -> Result<T> {
    check_batch(batch, post.classes(), post.dim())?;
    let weights = post.gaussian();
    let mut total = T::zero();
    for (f, y) in batch {
        for c in 0..post.classes() {
            let p = predictive_probit(weights.activation(c, f.as_slice())?);
            total = total + focal_loss(p, is_positive(*y, c), focal);
        }
    }
    let pairs = T::from_usize(batch.len() * post.classes()).expect("pair count");
    Ok(total / pairs + kl_weight * kl_diag_gaussian(post))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrads<T> {
    pub loss: T,
    pub mu: Matrix<T>,
    pub rho: Matrix<T>,
}

/// Loss and analytic gradient of [`loss_classifier`] with respect to `mu` and `rho`.
pub fn grad_loss_classifier<T: Scalar>(
    batch: &[(BoxFeature<T>, ClassLabel)],
    post: &ClassWeightPosterior<T>,
    kl_weight: T,
    focal: FocalParams<T>,
) -> Result<PosteriorGrads<T>> {
    check_batch(batch, post.classes(), post.dim())?;
    let (classes, dim) = (post.classes(), post.dim());
    let weights = post.gaussian();
    let k = T::PI() / T::lit(8.0);
    let half = T::lit(0.5);
    let pairs = T::from_usize(batch.len() * classes).expect("pair count");
    let mut g_mu: Matrix<T> = Matrix::zeros(classes, dim);
    let mut g_var: Matrix<T> = Matrix::zeros(classes, dim);
    let mut total = T::zero();
    for (f, y) in batch {
        let f = f.as_slice();
        for c in 0..classes {
            let act = weights.activation(c, f)?;
            let s = variance_scale(act.var());
            let p = predictive_probit(act);
            let positive = is_positive(*y, c);
            total = total + focal_loss(p, positive, focal);
            let dz = focal_loss_dp(p, positive, focal) * p * (T::one() - p) / pairs;
            let d_mean = dz * s;
            let d_var = -dz * half * k * act.mean() * s * s * s;
            for (j, &x) in f.iter().enumerate() {
                let gm = g_mu.row_mut(c);
                gm[j] = gm[j] + d_mean * x;
                let gv = g_var.row_mut(c);
                gv[j] = gv[j] + d_var * x * x;
            }
        }
    }
    let mut g_rho = Matrix::zeros(classes, dim);
    for c in 0..classes {
        for j in 0..dim {
            let m = post.mu.get(c, j);
            let r = post.rho.get(c, j);
            let var = softplus(r);
            g_mu.set(c, j, g_mu.get(c, j) + kl_weight * m);
            let dvar = g_var.get(c, j) + kl_weight * half * (T::one() - T::one() / var);
            g_rho.set(c, j, dvar * sigmoid(r));
        }
    }
    Ok(PosteriorGrads {
        loss: total / pairs + kl_weight * kl_diag_gaussian(post),
        mu: g_mu,
        rho: g_rho,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointGrads<T> {
    pub loss: T,
    pub weights: Matrix<T>,
}

/// Mean focal loss of the point sigmoid head and its gradient.
pub fn grad_loss_point<T: Scalar>(
    batch: &[(BoxFeature<T>, ClassLabel)],
    w: &PointClassifier<T>,
    focal: FocalParams<T>,
) -> Result<PointGrads<T>> {
    check_batch(batch, w.classes(), w.weights.cols())?;
    let classes = w.classes();
    let pairs = T::from_usize(batch.len() * classes).expect("pair count");
    let mut grad = Matrix::zeros(classes, w.weights.cols());
    let mut total = T::zero();
    for (f, y) in batch {
        let f = f.as_slice();
        for c in 0..classes {
            let p = sigmoid(dot(f, w.weights.row(c)));
            let positive = is_positive(*y, c);
            total = total + focal_loss(p, positive, focal);
            let dz = focal_loss_dp(p, positive, focal) * p * (T::one() - p) / pairs;
            for (g, &x) in grad.row_mut(c).iter_mut().zip(f) {
                *g = *g + dz * x;
            }
        }
    }
    Ok(PointGrads {
        loss: total / pairs,
        weights: grad,
    })
}

/// Standard-normal draws for reparameterized Monte Carlo training: one block of
/// `samples` values per (proposal, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct McNoise<T> {
    samples: usize,
    classes: usize,
    draws: Vec<T>,
}

impl<T: Scalar> McNoise<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn draw(proposals: usize, classes: usize, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..proposals * classes * samples)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            samples,
            classes,
            draws,
        }
    }

    fn block(&self, i: usize, c: usize) -> &[T] {
        let start = (i * self.classes + c) * self.samples;
        &self.draws[start..start + self.samples]
    }
}

/// Monte Carlo variant of [`grad_loss_classifier`]: the predictive is the mean of
/// `σ(μ_a + sqrt(Σ_a)·ε_t)` over the supplied draws, differentiated through the
/// reparameterization.
pub fn grad_loss_classifier_mc<T: Scalar>(
    batch: &[(BoxFeature<T>, ClassLabel)],
    post: &ClassWeightPosterior<T>,
    kl_weight: T,
    focal: FocalParams<T>,
    noise: &McNoise<T>,
) -> Result<PosteriorGrads<T>>
where
    StandardNormal: Distribution<T>,
{
    check_batch(batch, post.classes(), post.dim())?;
    if noise.classes != post.classes() || noise.draws.len() < batch.len() * post.classes() * noise.samples {
        return Err(Error::InvalidArgument("Monte Carlo noise block too small".into()));
    }
    let (classes, dim) = (post.classes(), post.dim());
    let weights = post.gaussian();
    let pairs = T::from_usize(batch.len() * classes).expect("pair count");
    let t = T::from_usize(noise.samples).expect("sample count");
    let mut g_mu: Matrix<T> = Matrix::zeros(classes, dim);
    let mut g_var: Matrix<T> = Matrix::zeros(classes, dim);
    let mut total = T::zero();
    for (i, (f, y)) in batch.iter().enumerate() {
        let f = f.as_slice();
        for c in 0..classes {
            let act = weights.activation(c, f)?;
            let sd = act.var().sqrt();
            let (mut p, mut dp_mean, mut dp_sd) = (T::zero(), T::zero(), T::zero());
            for &eps in noise.block(i, c) {
                let s = sigmoid(act.mean() + sd * eps);
                let ds = s * (T::one() - s);
                p = p + s;
                dp_mean = dp_mean + ds;
                dp_sd = dp_sd + ds * eps;
            }
            p = p / t;
            dp_mean = dp_mean / t;
            dp_sd = dp_sd / t;
            let positive = is_positive(*y, c);
            total = total + focal_loss(p, positive, focal);
            let dl = focal_loss_dp(p, positive, focal) / pairs;
            let d_var = if sd > T::zero() {
                dl * dp_sd / (T::lit(2.0) * sd)
            } else {
                T::zero()
            };
            for (j, &x) in f.iter().enumerate() {
                let gm = g_mu.row_mut(c);
                gm[j] = gm[j] + dl * dp_mean * x;
                let gv = g_var.row_mut(c);
                gv[j] = gv[j] + d_var * x * x;
            }
        }
    }
    let half = T::lit(0.5);
    let mut g_rho = Matrix::zeros(classes, dim);
    for c in 0..classes {
        for j in 0..dim {
            let r = post.rho.get(c, j);
            g_mu.set(c, j, g_mu.get(c, j) + kl_weight * post.mu.get(c, j));
            let dvar = g_var.get(c, j) + kl_weight * half * (T::one() - T::one() / softplus(r));
            g_rho.set(c, j, dvar * sigmoid(r));
        }
    }
    Ok(PosteriorGrads {
        loss: total / pairs + kl_weight * kl_diag_gaussian(post),
        mu: g_mu,
        rho: g_rho,
    })
}

/// Softmax head over `C` classes plus a final background row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> SoftmaxClassifier<T> {
    /// Number of object classes (excluding background).
    pub fn classes(&self) -> usize {
        self.weights.rows().saturating_sub(1)
    }

    pub fn background_row(&self) -> usize {
        self.weights.rows() - 1
    }
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax scores over `C + 1` rows and the cross-entropy against `target`
/// (background maps to the last row).
pub fn softmax_ce_baseline<T: Scalar>(
    f: &BoxFeature<T>,
    w: &SoftmaxClassifier<T>,
    target: ClassLabel,
) -> Result<(Vec<T>, T)> {
    if w.weights.rows() < 2 {
        return Err(Error::InvalidArgument("softmax head needs a background row".into()));
    }
    target.check(w.classes())?;
    let logits = w.weights.matvec(f.as_slice())?;
    let scores = softmax(&logits);
    let t = target.index().unwrap_or(w.background_row());
    let (p, _) = clamp_prob(scores[t]);
    Ok((scores, -p.ln()))
}

/// Mean cross-entropy of the softmax head and its gradient.
pub fn grad_softmax_ce<T: Scalar>(
    batch: &[(BoxFeature<T>, ClassLabel)],
    w: &SoftmaxClassifier<T>,
) -> Result<PointGrads<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = T::from_usize(batch.len()).expect("batch length");
    let mut grad = Matrix::zeros(w.weights.rows(), w.weights.cols());
    let mut total = T::zero();
    for (f, y) in batch {
        let (scores, loss) = softmax_ce_baseline(f, w, *y)?;
        total = total + loss;
        let t = y.index().unwrap_or(w.background_row());
        for (r, &p) in scores.iter().enumerate() {
            let d = (p - if r == t { T::one() } else { T::zero() }) / n;
            for (g, &x) in grad.row_mut(r).iter_mut().zip(f.as_slice()) {
                *g = *g + d * x;
            }
        }
    }
    Ok(PointGrads {
        loss: total / n,
        weights: grad,
    })
}

/// Draws `μ ~ N(0, 0.01)` point weights, the same initial law as the posterior means.
pub fn init_point_weights<T: Scalar>(rows: usize, dim: usize, rng: &mut impl Rng) -> Matrix<T> {
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    Matrix::from_fn(rows, dim, |_, _| T::lit(normal.sample(rng)))
}
