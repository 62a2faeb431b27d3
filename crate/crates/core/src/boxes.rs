//! Uncertainty-guided box head.
//!
//! A class-specific linear predictor maps a proposal feature to four side
//! offsets `m` and four raw uncertainties; `u = softplus(raw)`. A two-layer
//! refiner reads a feature together with `ln u` and emits the final offsets `b`:
//!
//! ```text
//! h = tanh(W_in · [f; ln u])      shared across classes
//! b = W_out[c] · [h; 1]           class-specific
//! ```
//!
//! Training minimizes `L_u + L_refine` where
//! `L_u = Σ_k ½((m_k − b*_k)² / u_k² + u_k²)` and `L_refine = Σ_k smoothL1(b_k − b*_k)`.
//! `L_u`'s per-side infimum over `u` is `|m_k − b*_k|`, reached at `u_k² = |m_k − b*_k|`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::probit::sigmoid;
use crate::scalar::{softplus, Scalar};

pub type Sides<T> = [T; 4];

/// Four positive per-side uncertainties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideUncertainty<T>(Sides<T>);

impl<T: Scalar> SideUncertainty<T> {
    pub fn new(u: Sides<T>) -> Result<Self> {
        for &v in &u {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::NonPositiveUncertainty(v.as_f64()));
            }
        }
        Ok(Self(u))
    }

    pub fn from_raw(raw: Sides<T>) -> Self {
        // softplus underflows to 0 only past raw ≈ -745; keep u strictly positive.
        let tiny = T::min_positive_value();
        Self(raw.map(|r| softplus(r).max(tiny)))
    }

    /// `u = 1` on every side, so `ln u = 0` at the refiner input.
    pub fn neutral() -> Self {
        Self([T::one(); 4])
    }

    pub fn values(&self) -> Sides<T> {
        self.0
    }
}

/// Which box loss trains the predictor, mirroring the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLossMode {
    /// Single-stage box head: refiner on the proposal feature, `L_refine` only.
    Plain,
    /// `L_u + L_refine`, refiner fed `ln u` at the initially predicted box.
    Uncertainty,
    /// Gaussian negative log-likelihood in place of `L_u`.
    Gaussian,
    /// Two-stage refinement without uncertainty: smooth L1 on `m`, neutral `u`.
    Cascade,
}

impl BoxLossMode {
    pub fn two_stage(self) -> bool {
        !matches!(self, BoxLossMode::Plain)
    }

    /// Whether the refiner sees the predicted uncertainty.
    pub fn feeds_uncertainty(self) -> bool {
        matches!(self, BoxLossMode::Uncertainty | BoxLossMode::Gaussian)
    }
}

/// Parameters of the predictor and refiner for `classes` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHeadParams<T> {
    /// `(classes · 8) × dim`: rows `8c..8c+4` predict offsets, `8c+4..8c+8` raw uncertainties.
    pub predictor: Matrix<T>,
    /// `hidden × (dim + 4)`, shared.
    pub refiner_in: Matrix<T>,
    /// `(classes · 4) × (hidden + 1)`, class-specific.
    pub refiner_out: Matrix<T>,
}

impl<T: Scalar> BoxHeadParams<T> {
    pub fn zeros(classes: usize, dim: usize, hidden: usize) -> Self {
        Self {
            predictor: Matrix::zeros(classes * 8, dim),
            refiner_in: Matrix::zeros(hidden, dim + 4),
            refiner_out: Matrix::zeros(classes * 4, hidden + 1),
        }
    }

    /// Zero predictor and refiner output; Gaussian first refiner layer with
    /// variance `1 / fan_in`.
    pub fn init(classes: usize, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(classes, dim, hidden);
        let normal = Normal::new(0.0, 1.0 / ((dim + 4) as f64).sqrt()).expect("valid normal");
        p.refiner_in = Matrix::from_fn(hidden, dim + 4, |_, _| T::lit(normal.sample(rng)));
        p
    }

    pub fn classes(&self) -> usize {
        self.predictor.rows() / 8
    }

    pub fn dim(&self) -> usize {
        self.predictor.cols()
    }

    pub fn hidden(&self) -> usize {
        self.refiner_in.rows()
    }

    fn check(&self, f: &[T], class: usize) -> Result<()> {
        ensure_dim(self.dim(), f.len())?;
        if class >= self.classes() {
            return Err(Error::UnknownClass(class));
        }
        Ok(())
    }

    /// Copies the class-specific rows of `classes` (in order) into a new head that
    /// shares this head's first refiner layer.
    pub fn select_classes(&self, classes: &[usize]) -> Self {
        let mut out = Self::zeros(classes.len(), self.dim(), self.hidden());
        out.refiner_in = self.refiner_in.clone();
        for (dst, &src) in classes.iter().enumerate() {
            for k in 0..8 {
                out.predictor.row_mut(dst * 8 + k).copy_from_slice(self.predictor.row(src * 8 + k));
            }
            for k in 0..4 {
                out.refiner_out.row_mut(dst * 4 + k).copy_from_slice(self.refiner_out.row(src * 4 + k));
            }
        }
        out
    }

    /// Class-specific rows of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.refiner_in != other.refiner_in {
            return Err(Error::Merge("box heads disagree on the shared refiner layer".into()));
        }
        Ok(Self {
            predictor: self.predictor.vstack(&other.predictor)?,
            refiner_in: self.refiner_in.clone(),
            refiner_out: self.refiner_out.vstack(&other.refiner_out)?,
        })
    }
}

/// Initial offsets `m` and uncertainties `u` of class `class` for feature `f`.
pub fn predict_box<T: Scalar>(f: &[T], class: usize, params: &BoxHeadParams<T>) -> Result<(Sides<T>, SideUncertainty<T>)> {
    params.check(f, class)?;
    let row = |k: usize| dot(f, params.predictor.row(class * 8 + k));
    let m = [row(0), row(1), row(2), row(3)];
    let raw = [row(4), row(5), row(6), row(7)];
    Ok((m, SideUncertainty::from_raw(raw)))
}

fn refiner_input<T: Scalar>(f: &[T], u: &SideUncertainty<T>) -> Vec<T> {
    let mut x = f.to_vec();
    x.extend(u.values().iter().map(|v| v.ln()));
    x
}

fn refiner_hidden<T: Scalar>(x: &[T], params: &BoxHeadParams<T>) -> Vec<T> {
    let mut h: Vec<T> = (0..params.hidden())
        .map(|j| dot(x, params.refiner_in.row(j)).tanh())
        .collect();
    h.push(T::one());
    h
}

/// Refined offsets `b` from feature `f` and uncertainty `u`.
pub fn refine_box<T: Scalar>(f: &[T], u: &SideUncertainty<T>, class: usize, params: &BoxHeadParams<T>) -> Result<Sides<T>> {
    params.check(f, class)?;
    let h = refiner_hidden(&refiner_input(f, u), params);
    let out = |k: usize| dot(&h, params.refiner_out.row(class * 4 + k));
    Ok([out(0), out(1), out(2), out(3)])
}

fn check_u<T: Scalar>(u: &Sides<T>) -> Result<()> {
    SideUncertainty::new(*u).map(|_| ())
}

/// `Σ_k ½((m_k − b*_k)² / u_k² + u_k²)`.
pub fn loss_box_uncertainty<T: Scalar>(m: &Sides<T>, u: &Sides<T>, gt: &Sides<T>) -> Result<T> {
    check_u(u)?;
    let half = T::lit(0.5);
    Ok((0..4).fold(T::zero(), |acc, k| {
        let r = m[k] - gt[k];
        acc + half * (r * r / (u[k] * u[k]) + u[k] * u[k])
    }))
}

pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// `Σ_k smoothL1(b_k − b*_k)`.
pub fn loss_refine<T: Scalar>(b: &Sides<T>, gt: &Sides<T>) -> T {
    (0..4).fold(T::zero(), |acc, k| acc + smooth_l1(b[k] - gt[k]))
}

/// `L_u + L_refine` against the same ground-truth offsets.
pub fn loss_box_total<T: Scalar>(m: &Sides<T>, u: &Sides<T>, b: &Sides<T>, gt: &Sides<T>) -> Result<T> {
    Ok(loss_box_uncertainty(m, u, gt)? + loss_refine(b, gt))
}

/// `Σ_k ((m_k − b*_k)² / (2u_k²) + ½ ln u_k²)`.
pub fn loss_box_gaussian_nll<T: Scalar>(m: &Sides<T>, u: &Sides<T>, gt: &Sides<T>) -> Result<T> {
    check_u(u)?;
    let half = T::lit(0.5);
    Ok((0..4).fold(T::zero(), |acc, k| {
        let r = m[k] - gt[k];
        acc + r * r / (T::lit(2.0) * u[k] * u[k]) + half * (u[k] * u[k]).ln()
    }))
}

/// One box-training example for class `class`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxExample<T> {
    pub class: usize,
    /// Feature pooled at the proposal; drives the predictor (and the refiner in
    /// [`BoxLossMode::Plain`]).
    pub proposal_feature: Vec<T>,
    /// Ground-truth offsets relative to the proposal.
    pub target_initial: Sides<T>,
    /// Feature pooled at the initially predicted box (ignored in `Plain` mode).
    pub refine_feature: Vec<T>,
    /// Ground-truth offsets relative to the initially predicted box (ignored in `Plain` mode).
    pub target_refined: Sides<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxGrads<T> {
    pub loss: T,
    pub predictor: Matrix<T>,
    pub refiner_in: Matrix<T>,
    pub refiner_out: Matrix<T>,
}

/// Loss of one example under `mode` (no gradients).
pub fn box_example_loss<T: Scalar>(ex: &BoxExample<T>, params: &BoxHeadParams<T>, mode: BoxLossMode) -> Result<T> {
    if mode == BoxLossMode::Plain {
        let b = refine_box(&ex.proposal_feature, &SideUncertainty::neutral(), ex.class, params)?;
        return Ok(loss_refine(&b, &ex.target_initial));
    }
    let (m, u) = predict_box(&ex.proposal_feature, ex.class, params)?;
    let refine_u = if mode.feeds_uncertainty() { u } else { SideUncertainty::neutral() };
    let b = refine_box(&ex.refine_feature, &refine_u, ex.class, params)?;
    let initial = match mode {
        BoxLossMode::Uncertainty => loss_box_uncertainty(&m, &u.values(), &ex.target_initial)?,
        BoxLossMode::Gaussian => loss_box_gaussian_nll(&m, &u.values(), &ex.target_initial)?,
        BoxLossMode::Cascade => loss_refine(&m, &ex.target_initial),
        BoxLossMode::Plain => unreachable!(),
    };
    Ok(initial + loss_refine(&b, &ex.target_refined))
}

/// Mean loss over `batch` and its analytic gradient for every box-head parameter.
/// With `stop_grad_u`, the refiner's `ln u` input is treated as a constant.
pub fn grad_box_losses<T: Scalar>(
    batch: &[BoxExample<T>],
    params: &BoxHeadParams<T>,
    mode: BoxLossMode,
    stop_grad_u: bool,
) -> Result<BoxGrads<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = T::from_usize(batch.len()).expect("batch length");
    let dim = params.dim();
    let hidden = params.hidden();
    let mut g = BoxGrads {
        loss: T::zero(),
        predictor: Matrix::zeros(params.predictor.rows(), dim),
        refiner_in: Matrix::zeros(hidden, dim + 4),
        refiner_out: Matrix::zeros(params.refiner_out.rows(), hidden + 1),
    };
    for ex in batch {
        let c = ex.class;
        params.check(&ex.proposal_feature, c)?;
        let two_stage = mode.two_stage();
        let (m, raw, u) = if two_stage {
            let (m, u) = predict_box(&ex.proposal_feature, c, params)?;
            let raw: Sides<T> = std::array::from_fn(|k| dot(&ex.proposal_feature, params.predictor.row(c * 8 + 4 + k)));
            (m, raw, u)
        } else {
            ([T::zero(); 4], [T::zero(); 4], SideUncertainty::neutral())
        };
        let refine_u = if mode.feeds_uncertainty() { u } else { SideUncertainty::neutral() };
        let (feat, target) = if two_stage {
            params.check(&ex.refine_feature, c)?;
            (&ex.refine_feature, &ex.target_refined)
        } else {
            (&ex.proposal_feature, &ex.target_initial)
        };

        // Refiner forward.
        let x = refiner_input(feat, &refine_u);
        let h = refiner_hidden(&x, params);
        let b: Sides<T> = std::array::from_fn(|k| dot(&h, params.refiner_out.row(c * 4 + k)));
        let mut loss = loss_refine(&b, target);

        // Refiner backward.
        let db: Sides<T> = std::array::from_fn(|k| smooth_l1_grad(b[k] - target[k]) / n);
        let mut dh = vec![T::zero(); hidden];
        for k in 0..4 {
            let w = params.refiner_out.row(c * 4 + k);
            for (gw, &hj) in g.refiner_out.row_mut(c * 4 + k).iter_mut().zip(&h) {
                *gw = *gw + db[k] * hj;
            }
            for j in 0..hidden {
                dh[j] = dh[j] + db[k] * w[j];
            }
        }
        let mut dx_u = [T::zero(); 4];
        for j in 0..hidden {
            let da = dh[j] * (T::one() - h[j] * h[j]);
            for (gw, &xi) in g.refiner_in.row_mut(j).iter_mut().zip(&x) {
                *gw = *gw + da * xi;
            }
            for (k, d) in dx_u.iter_mut().enumerate() {
                *d = *d + da * params.refiner_in.get(j, dim + k);
            }
        }

        if two_stage {
            let uv = u.values();
            let mut dm = [T::zero(); 4];
            let mut du = [T::zero(); 4];
            match mode {
                BoxLossMode::Uncertainty => {
                    loss = loss + loss_box_uncertainty(&m, &uv, &ex.target_initial)?;
                    for k in 0..4 {
                        let r = m[k] - ex.target_initial[k];
                        let u2 = uv[k] * uv[k];
                        dm[k] = r / u2 / n;
                        du[k] = (-r * r / (u2 * uv[k]) + uv[k]) / n;
                    }
                }
                BoxLossMode::Gaussian => {
                    loss = loss + loss_box_gaussian_nll(&m, &uv, &ex.target_initial)?;
                    for k in 0..4 {
                        let r = m[k] - ex.target_initial[k];
                        let u2 = uv[k] * uv[k];
                        dm[k] = r / u2 / n;
                        du[k] = (-r * r / (u2 * uv[k]) + T::one() / uv[k]) / n;
                    }
                }
                BoxLossMode::Cascade => {
                    loss = loss + loss_refine(&m, &ex.target_initial);
                    for k in 0..4 {
                        dm[k] = smooth_l1_grad(m[k] - ex.target_initial[k]) / n;
                    }
                }
                BoxLossMode::Plain => unreachable!(),
            }
            if mode.feeds_uncertainty() && !stop_grad_u {
                for k in 0..4 {
                    du[k] = du[k] + dx_u[k] / uv[k];
                }
            }
            for k in 0..4 {
                let draw = du[k] * sigmoid(raw[k]);
                for (j, &fj) in ex.proposal_feature.iter().enumerate() {
                    let gm = g.predictor.row_mut(c * 8 + k);
                    gm[j] = gm[j] + dm[k] * fj;
                    let gr = g.predictor.row_mut(c * 8 + 4 + k);
                    gr[j] = gr[j] + draw * fj;
                }
            }
        }
        g.loss = g.loss + loss / n;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn predict_examples() {
        let p = BoxHeadParams::<f64>::zeros(2, 5, 3);
        let (m, u) = predict_box(&[0.3, -1.0, 2.0, 0.5, 1.0], 1, &p).unwrap();
        assert_eq!(m, [0.0; 4]);
        for v in u.values() {
            assert_abs_diff_eq!(v, 0.6931, epsilon = 1e-4);
        }
        assert!(predict_box(&[1.0], 0, &p).is_err());
        assert!(predict_box(&[0.0; 5], 2, &p).is_err());
        let u = SideUncertainty::<f64>::from_raw([-800.0, -40.0, 0.0, 900.0]);
        assert!(u.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn refine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = BoxHeadParams::<f64>::init(1, 3, 4, &mut rng);
        let f = [0.2, -0.4, 1.0];
        let u1 = SideUncertainty::new([0.5, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(refine_box(&f, &u1, 0, &p).unwrap(), [0.0; 4]);
        p.refiner_out = Matrix::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let u2 = SideUncertainty::new([0.5, 1.4, 2.0, 3.0]).unwrap();
        assert_ne!(refine_box(&f, &u1, 0, &p).unwrap(), refine_box(&f, &u2, 0, &p).unwrap());
        let big = SideUncertainty::new([1e3; 4]).unwrap();
        assert!(refine_box(&f, &big, 0, &p).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uncertainty_loss_examples() {
        assert_eq!(loss_box_uncertainty(&[0.1; 4], &[1.0; 4], &[0.1; 4]).unwrap(), 2.0);
        let l = loss_box_uncertainty(&[4.0, 0.0, 0.0, 0.0], &[2.0, 1.0, 1.0, 1.0], &[0.0; 4]).unwrap();
        assert_abs_diff_eq!(l, 4.0 + 1.5, epsilon = 1e-15);
        assert!(loss_box_uncertainty(&[0.0; 4], &[1.0, 0.0, 1.0, 1.0], &[0.0; 4]).is_err());
        assert!(loss_box_uncertainty(&[0.0; 4], &[1.0, -2.0, 1.0, 1.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(loss_refine(&[0.3; 4], &[0.3; 4]), 0.0);
        assert_eq!(loss_refine(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]), 0.125);
        assert_eq!(loss_refine(&[2.0; 4], &[0.0; 4]), 6.0);
    }

    #[test]
    fn total_and_gaussian_examples() {
        let gt = [0.1, -0.2, 0.05, 0.3];
        assert_eq!(loss_box_total(&gt, &[1.0; 4], &gt, &gt).unwrap(), 2.0);
        let m = [0.3, -0.1, 0.0, 0.2];
        let u = [0.4, 0.9, 1.3, 0.7];
        let b = [0.2, 0.0, 0.1, 0.25];
        let total = loss_box_total(&m, &u, &b, &gt).unwrap();
        assert_abs_diff_eq!(
            total,
            loss_box_uncertainty(&m, &u, &gt).unwrap() + loss_refine(&b, &gt),
            epsilon = 1e-12
        );
        let closer = [0.15, -0.1, 0.075, 0.275];
        assert!(loss_box_total(&m, &u, &closer, &gt).unwrap() < total);

        assert_eq!(loss_box_gaussian_nll(&gt, &[1.0; 4], &gt).unwrap(), 0.0);
        assert!(loss_box_gaussian_nll(&gt, &[0.0; 4], &gt).is_err());
    }

    fn zero_residual_example() -> BoxExample<f64> {
        BoxExample {
            class: 0,
            proposal_feature: vec![0.0, 0.0, 1.0],
            target_initial: [0.0; 4],
            refine_feature: vec![0.0, 0.0, 1.0],
            target_refined: [0.0; 4],
        }
    }

    #[test]
    fn zero_residual_pushes_u_down() {
        let p = BoxHeadParams::<f64>::zeros(1, 3, 2);
        let g = grad_box_losses(&[zero_residual_example()], &p, BoxLossMode::Uncertainty, true).unwrap();
        // d L / d raw = u · σ(raw) > 0 on the bias column: descent lowers u.
        for k in 4..8 {
            assert!(g.predictor.get(k, 2) > 0.0);
        }
    }

    #[test]
    fn u_gradient_vanishes_at_am_gm_optimum() {
        // residual r on every side; set raw so that u² = |r|.
        let r: f64 = 0.36;
        let raw = crate::scalar::softplus_inv(r.sqrt());
        let mut p = BoxHeadParams::<f64>::zeros(1, 1, 1);
        for k in 4..8 {
            p.predictor.set(k, 0, raw);
        }
        let ex = BoxExample {
            class: 0,
            proposal_feature: vec![1.0],
            target_initial: [r; 4],
            refine_feature: vec![1.0],
            target_refined: [0.0; 4],
        };
        let g = grad_box_losses(&[ex], &p, BoxLossMode::Uncertainty, true).unwrap();
        for k in 4..8 {
            assert!(g.predictor.get(k, 0).abs() < 1e-12);
        }
    }
}
