//! Per-cell mask classifier on a `G × G` grid aligned to a box.
//!
//! Every cell is an independent example: its logit is the dot product of that
//! cell's feature with the class row, with no coupling between cells.

use serde::{Deserialize, Serialize};

use crate::classifier::PROB_EPS;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::probit::sigmoid;
use crate::scalar::Scalar;

/// Row-major `size × size` grid of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid<T> {
    size: usize,
    values: Vec<T>,
}

impl<T: Copy> MaskGrid<T> {
    pub fn new(size: usize, values: Vec<T>) -> Result<Self> {
        ensure_dim(size * size, values.len())?;
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.size + col]
    }
}

impl<T: Scalar> MaskGrid<T> {
    pub fn probabilities(&self) -> Self {
        Self {
            size: self.size,
            values: self.values.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

pub type BinaryMask = MaskGrid<bool>;

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Run-length encoding in row-major order; runs alternate starting with a
    /// (possibly empty) run of background cells.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &v in &self.values {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(size: usize, runs: &[u32]) -> Result<Self> {
        let mut values = Vec::with_capacity(size * size);
        let mut v = false;
        for &r in runs {
            values.extend(std::iter::repeat_n(v, r as usize));
            v = !v;
        }
        Self::new(size, values)
    }
}

/// Per-cell features: `size × size × dim` in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures<T> {
    size: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> CellFeatures<T> {
    pub fn new(size: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        ensure_dim(size * size * dim, data.len())?;
        Ok(Self { size, dim, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }
}

/// One linear row per class over cell features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeadParams<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> MaskHeadParams<T> {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, dim),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }
}

pub fn mask_logits<T: Scalar>(cells: &CellFeatures<T>, class: usize, params: &MaskHeadParams<T>) -> Result<MaskGrid<T>> {
    if class >= params.classes() {
        return Err(Error::UnknownClass(class));
    }
    ensure_dim(params.weights.cols(), cells.dim())?;
    let w = params.weights.row(class);
    MaskGrid::new(cells.size(), (0..cells.cells()).map(|i| dot(cells.cell(i), w)).collect())
}

/// Mean per-cell binary cross-entropy, probabilities clamped to `[ε, 1 − ε]`.
pub fn mask_bce_loss<T: Scalar>(probs: &MaskGrid<T>, gt: &BinaryMask) -> Result<T> {
    ensure_dim(gt.size(), probs.size())?;
    let eps = T::lit(PROB_EPS);
    let total = probs.values().iter().zip(gt.values()).fold(T::zero(), |acc, (&p, &y)| {
        let p = p.max(eps).min(T::one() - eps);
        acc - if y { p.ln() } else { (T::one() - p).ln() }
    });
    Ok(total / T::from_usize(probs.values().len()).expect("cell count"))
}

/// Foreground iff `p ≥ 0.5`.
pub fn binarize<T: Scalar>(probs: &MaskGrid<T>) -> BinaryMask {
    let half = T::lit(0.5);
    MaskGrid {
        size: probs.size(),
        values: probs.values().iter().map(|&p| p >= half).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct MaskExample<T> {
    pub class: usize,
    pub cells: CellFeatures<T>,
    pub target: BinaryMask,
}

/// Mean over examples of [`mask_bce_loss`] and its gradient for the class rows.
pub fn grad_mask_bce<T: Scalar>(batch: &[MaskExample<T>], params: &MaskHeadParams<T>) -> Result<(T, Matrix<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = T::from_usize(batch.len()).expect("batch length");
    let eps = T::lit(PROB_EPS);
    let mut grad = Matrix::zeros(params.weights.rows(), params.weights.cols());
    let mut total = T::zero();
    for ex in batch {
        let probs = mask_logits(&ex.cells, ex.class, params)?.probabilities();
        total = total + mask_bce_loss(&probs, &ex.target)?;
        let scale = n * T::from_usize(ex.cells.cells()).expect("cell count");
        let row = grad.row_mut(ex.class);
        for (i, (&p, &y)) in probs.values().iter().zip(ex.target.values()).enumerate() {
            if p < eps || p > T::one() - eps {
                continue;
            }
            let d = (p - if y { T::one() } else { T::zero() }) / scale;
            for (g, &x) in row.iter_mut().zip(ex.cells.cell(i)) {
                *g = *g + d * x;
            }
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cells(size: usize, dim: usize, f: impl Fn(usize, usize) -> f64) -> CellFeatures<f64> {
        let data = (0..size * size).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        CellFeatures::new(size, dim, data).unwrap()
    }

    #[test]
    fn logits_examples() {
        let c = cells(3, 2, |i, j| (i * 2 + j) as f64 * 0.1);
        let zero = MaskHeadParams::zeros(1, 2);
        let l = mask_logits(&c, 0, &zero).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
        assert!(l.probabilities().values().iter().all(|&p| p == 0.5));
        assert!(mask_logits(&c, 1, &zero).is_err());

        let params = MaskHeadParams {
            weights: Matrix::from_vec(1, 2, vec![0.7, -1.3]).unwrap(),
        };
        let base = mask_logits(&c, 0, &params).unwrap();
        let bumped = cells(3, 2, |i, j| (i * 2 + j) as f64 * 0.1 + if i == 4 { 1.0 } else { 0.0 });
        let changed = mask_logits(&bumped, 0, &params).unwrap();
        for i in 0..9 {
            assert_eq!(base.values()[i] == changed.values()[i], i != 4);
        }
        // permuting cells permutes logits
        let perm = |i: usize| 8 - i;
        let permuted = cells(3, 2, |i, j| (perm(i) * 2 + j) as f64 * 0.1);
        let pl = mask_logits(&permuted, 0, &params).unwrap();
        for i in 0..9 {
            assert_eq!(pl.values()[i], base.values()[perm(i)]);
        }
    }

    #[test]
    fn bce_examples() {
        let gt = MaskGrid::new(2, vec![true, false, false, true]).unwrap();
        let exact = MaskGrid::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(mask_bce_loss(&exact, &gt).unwrap() < 1e-6);
        let half = MaskGrid::new(2, vec![0.5; 4]).unwrap();
        assert_abs_diff_eq!(mask_bce_loss(&half, &gt).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let p = MaskGrid::new(2, vec![0.9, 0.2, 0.4, 0.6]).unwrap();
        let manual = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.6f64.ln()) / 4.0;
        assert_abs_diff_eq!(mask_bce_loss(&p, &gt).unwrap(), manual, epsilon = 1e-10);
        let small = MaskGrid::new(1, vec![true]).unwrap();
        assert!(mask_bce_loss(&p, &small).is_err());
    }

    #[test]
    fn binarize_examples() {
        let b = binarize(&MaskGrid::new(2, vec![0.5; 4]).unwrap());
        assert_eq!(b.count(), 4);
        let b = binarize(&MaskGrid::new(2, vec![0.49; 4]).unwrap());
        assert_eq!(b.count(), 0);
        let bits = MaskGrid::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let once = binarize(&bits);
        let as_probs = MaskGrid::new(2, once.values().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(binarize(&as_probs), once);
    }

    #[test]
    fn rle_roundtrip() {
        let m = MaskGrid::new(3, vec![true, true, false, false, true, true, true, false, false]).unwrap();
        let rle = m.to_rle();
        assert_eq!(rle, vec![0, 2, 2, 3, 2]);
        assert_eq!(BinaryMask::from_rle(3, &rle).unwrap(), m);
        let empty = MaskGrid::new(2, vec![false; 4]).unwrap();
        assert_eq!(empty.to_rle(), vec![4]);
    }
}
