//! Independent numerical references for the head math and the evaluator.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::boxes::{box_example_loss, grad_box_losses, BoxExample, BoxHeadParams, BoxLossMode};
use crate::classifier::{
    focal_loss, grad_loss_classifier, grad_loss_classifier_mc, grad_loss_point, grad_softmax_ce, loss_classifier,
    softmax_ce_baseline, BoxFeature, ClassLabel, ClassWeightPosterior, FocalParams, McNoise, PointClassifier,
    SoftmaxClassifier,
};
use crate::error::Result;
use crate::geometry::SideBox;
use crate::linalg::{dot, Matrix};
use crate::mask::{grad_mask_bce, mask_bce_loss, mask_logits, CellFeatures, MaskExample, MaskGrid, MaskHeadParams};
use crate::probit::{predictive_mc, predictive_probit, sigmoid, ActivationGaussian, HermiteRule, DEFAULT_QUADRATURE_NODES};
use crate::scalar::softplus;
use crate::world::{evaluate_ap, ApMode, ClassGroups, Detection, Ellipse, EvalScene, SceneObject};

pub const PROBIT_TOL: f64 = 0.02;
pub const MC_TOL: f64 = 0.01;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const AMGM_U_TOL: f64 = 1e-3;
pub const AMGM_LOSS_TOL: f64 = 1e-6;
pub const AP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbitGridRow {
    pub mean_a: f64,
    pub var_a: f64,
    pub probit: f64,
    pub mc: f64,
    pub quadrature: f64,
    pub abs_err: f64,
}

/// Means in `[-6, 6]` and variances in `[0, 10]`, both at step 0.25.
pub fn probit_grid(mc_samples: usize, seed: u64) -> Result<Vec<ProbitGridRow>> {
    let rule = HermiteRule::new(DEFAULT_QUADRATURE_NODES)?;
    let mut rows = Vec::with_capacity(49 * 41);
    for i in 0..=48 {
        for j in 0..=40 {
            let g = ActivationGaussian::new(-6.0 + 0.25 * i as f64, 0.25 * j as f64)?;
            let probit = predictive_probit(g);
            let quadrature = rule.predictive(g);
            rows.push(ProbitGridRow {
                mean_a: g.mean(),
                var_a: g.var(),
                probit,
                mc: predictive_mc(g, mc_samples, seed ^ (i * 41 + j) as u64)?,
                quadrature,
                abs_err: (probit - quadrature).abs(),
            });
        }
    }
    Ok(rows)
}

pub fn write_probit_grid(rows: &[ProbitGridRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConsistency {
    /// Largest `|MC(10⁵) − quadrature|` at `(1, 1)` over five seeds.
    pub max_err: f64,
    pub std_small: f64,
    pub std_large: f64,
    /// `std_small / std_large`; `1/√T` scaling predicts 10.
    pub ratio: f64,
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn mc_consistency(seed: u64) -> Result<McConsistency> {
    let g = ActivationGaussian::new(1.0f64, 1.0)?;
    let q = HermiteRule::new(DEFAULT_QUADRATURE_NODES)?.predictive(g);
    let mut max_err: f64 = 0.0;
    for s in 0..5 {
        max_err = max_err.max((predictive_mc(g, 100_000, seed + s)? - q).abs());
    }
    let runs = |t: usize, offset: u64| -> Result<Vec<f64>> {
        (0..30).map(|s| predictive_mc(g, t, seed + offset + s)).collect()
    };
    let std_small = sample_std(&runs(10_000, 1000)?);
    let std_large = sample_std(&runs(1_000_000, 2000)?);
    Ok(McConsistency {
        max_err,
        std_small,
        std_large,
        ratio: std_small / std_large,
    })
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel <= GRAD_TOL
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mean: f64, sd: f64) -> Matrix<f64> {
    let n = Normal::new(mean, sd).expect("valid normal");
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("valid normal");
    (0..len).map(|_| n.sample(rng)).collect()
}

fn split(x: &[f64], shapes: &[[usize; 2]]) -> Vec<Matrix<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&[r, c]| {
            let m = Matrix::from_vec(r, c, x[at..at + r * c].to_vec()).expect("shape");
            at += r * c;
            m
        })
        .collect()
}

fn flat(ms: &[&Matrix<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

const CLASSES: usize = 2;
const DIM: usize = 4;
const PROPOSALS: usize = 6;

fn classifier_batch(rng: &mut ChaCha8Rng) -> Vec<(BoxFeature<f64>, ClassLabel)> {
    (0..PROPOSALS)
        .map(|_| {
            let label = match rng.random_range(0..=CLASSES) {
                CLASSES => ClassLabel::Background,
                c => ClassLabel::Class(c),
            };
            (BoxFeature::from_raw(normal_vec(rng, DIM, 1.0)), label)
        })
        .collect()
}

fn worst_over(instances: usize, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(one(&mut rng)?);
    }
    Ok(worst)
}

fn check_probit(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = classifier_batch(rng);
    let mu = normal_matrix(rng, CLASSES, DIM, 0.0, 0.5);
    let rho = normal_matrix(rng, CLASSES, DIM, -1.0, 0.5);
    let kl = rng.random_range(0.0..0.2);
    let focal = FocalParams::default();
    let g = grad_loss_classifier(&batch, &ClassWeightPosterior::new(mu.clone(), rho.clone())?, kl, focal)?;
    let shapes = [mu.shape(), rho.shape()];
    let numeric = central_differences(&flat(&[&mu, &rho]), FD_STEP, |x| {
        let m = split(x, &shapes);
        let post = ClassWeightPosterior::new(m[0].clone(), m[1].clone()).expect("shapes agree");
        loss_classifier(&batch, &post, kl, focal).expect("valid batch")
    });
    Ok(max_relative_error(&flat(&[&g.mu, &g.rho]), &numeric))
}

fn check_mc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = classifier_batch(rng);
    let mu = normal_matrix(rng, CLASSES, DIM, 0.0, 0.5);
    let rho = normal_matrix(rng, CLASSES, DIM, -1.0, 0.5);
    let kl = rng.random_range(0.0..0.2);
    let focal = FocalParams::default();
    let noise = McNoise::draw(PROPOSALS, CLASSES, 8, rng.random());
    let g = grad_loss_classifier_mc(&batch, &ClassWeightPosterior::new(mu.clone(), rho.clone())?, kl, focal, &noise)?;
    let shapes = [mu.shape(), rho.shape()];
    let numeric = central_differences(&flat(&[&mu, &rho]), FD_STEP, |x| {
        let m = split(x, &shapes);
        let post = ClassWeightPosterior::new(m[0].clone(), m[1].clone()).expect("shapes agree");
        grad_loss_classifier_mc(&batch, &post, kl, focal, &noise).expect("valid batch").loss
    });
    Ok(max_relative_error(&flat(&[&g.mu, &g.rho]), &numeric))
}

fn check_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = classifier_batch(rng);
    let w = normal_matrix(rng, CLASSES, DIM, 0.0, 0.5);
    let focal = FocalParams::default();
    let g = grad_loss_point(&batch, &PointClassifier::new(w.clone()), focal)?;
    let numeric = central_differences(w.as_slice(), FD_STEP, |x| {
        let mut total = 0.0;
        for (f, y) in &batch {
            for c in 0..CLASSES {
                let p = sigmoid(dot(f.as_slice(), &x[c * DIM..(c + 1) * DIM]));
                total += focal_loss(p, *y == ClassLabel::Class(c), focal);
            }
        }
        total / (batch.len() * CLASSES) as f64
    });
    Ok(max_relative_error(g.weights.as_slice(), &numeric))
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = classifier_batch(rng);
    let w = normal_matrix(rng, CLASSES + 1, DIM, 0.0, 0.5);
    let g = grad_softmax_ce(&batch, &SoftmaxClassifier { weights: w.clone() })?;
    let numeric = central_differences(w.as_slice(), FD_STEP, |x| {
        let head = SoftmaxClassifier {
            weights: Matrix::from_vec(CLASSES + 1, DIM, x.to_vec()).expect("shape"),
        };
        let total: f64 = batch
            .iter()
            .map(|(f, y)| softmax_ce_baseline(f, &head, *y).expect("valid target").1)
            .sum();
        total / batch.len() as f64
    });
    Ok(max_relative_error(g.weights.as_slice(), &numeric))
}

fn check_softplus(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-8.0..8.0)).collect();
    let analytic: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
    let numeric: Vec<f64> = x
        .iter()
        .map(|&v| central_differences(&[v], FD_STEP, |p| softplus(p[0]))[0])
        .collect();
    Ok(max_relative_error(&analytic, &numeric))
}

const BOX_DIM: usize = 5;
const BOX_HIDDEN: usize = 3;

fn check_box(rng: &mut ChaCha8Rng, mode: BoxLossMode) -> Result<f64> {
    let params = BoxHeadParams {
        predictor: normal_matrix(rng, CLASSES * 8, BOX_DIM, 0.0, 0.3),
        refiner_in: normal_matrix(rng, BOX_HIDDEN, BOX_DIM + 4, 0.0, 0.5),
        refiner_out: normal_matrix(rng, CLASSES * 4, BOX_HIDDEN + 1, 0.0, 0.5),
    };
    let batch: Vec<BoxExample<f64>> = (0..4)
        .map(|_| BoxExample {
            class: rng.random_range(0..CLASSES),
            proposal_feature: normal_vec(rng, BOX_DIM, 1.0),
            target_initial: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            refine_feature: normal_vec(rng, BOX_DIM, 1.0),
            target_refined: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
        })
        .collect();
    let g = grad_box_losses(&batch, &params, mode, false)?;
    let shapes = [params.predictor.shape(), params.refiner_in.shape(), params.refiner_out.shape()];
    let numeric = central_differences(
        &flat(&[&params.predictor, &params.refiner_in, &params.refiner_out]),
        FD_STEP,
        |x| {
            let mut m = split(x, &shapes).into_iter();
            let p = BoxHeadParams {
                predictor: m.next().expect("predictor"),
                refiner_in: m.next().expect("refiner_in"),
                refiner_out: m.next().expect("refiner_out"),
            };
            let total: f64 = batch
                .iter()
                .map(|ex| box_example_loss(ex, &p, mode).expect("valid example"))
                .sum();
            total / batch.len() as f64
        },
    );
    Ok(max_relative_error(
        &flat(&[&g.predictor, &g.refiner_in, &g.refiner_out]),
        &numeric,
    ))
}

fn check_mask(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (size, dim) = (4, 3);
    let weights = normal_matrix(rng, CLASSES, dim, 0.0, 0.5);
    let batch: Vec<MaskExample<f64>> = (0..3)
        .map(|_| {
            let cells = CellFeatures::new(size, dim, normal_vec(rng, size * size * dim, 1.0)).expect("cell shape");
            let target = MaskGrid::new(size, (0..size * size).map(|_| rng.random_bool(0.5)).collect()).expect("grid");
            MaskExample {
                class: rng.random_range(0..CLASSES),
                cells,
                target,
            }
        })
        .collect();
    let (_, grad) = grad_mask_bce(&batch, &MaskHeadParams { weights: weights.clone() })?;
    let numeric = central_differences(weights.as_slice(), FD_STEP, |x| {
        let p = MaskHeadParams {
            weights: Matrix::from_vec(CLASSES, dim, x.to_vec()).expect("shape"),
        };
        let total: f64 = batch
            .iter()
            .map(|ex| {
                let probs = mask_logits(&ex.cells, ex.class, &p).expect("valid class").probabilities();
                mask_bce_loss(&probs, &ex.target).expect("same grid")
            })
            .sum();
        total / batch.len() as f64
    });
    Ok(max_relative_error(grad.as_slice(), &numeric))
}

/// Every analytic gradient against central differences on `instances` random
/// small problems each.
pub fn gradient_checks(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    type Check = fn(&mut ChaCha8Rng) -> Result<f64>;
    let checks: [(&str, Check); 9] = [
        ("classifier_probit", check_probit),
        ("classifier_mc", check_mc),
        ("classifier_point", check_point),
        ("classifier_softmax", check_softmax),
        ("softplus", check_softplus),
        ("box_plain", |r| check_box(r, BoxLossMode::Plain)),
        ("box_uncertainty", |r| check_box(r, BoxLossMode::Uncertainty)),
        ("box_gaussian", |r| check_box(r, BoxLossMode::Gaussian)),
        ("box_cascade", |r| check_box(r, BoxLossMode::Cascade)),
    ];
    let mut out: Vec<GradCheck> = checks
        .iter()
        .enumerate()
        .map(|(i, &(name, f))| {
            Ok(GradCheck {
                name: name.into(),
                instances,
                worst_rel: worst_over(instances, seed.wrapping_add(i as u64), f)?,
            })
        })
        .collect::<Result<_>>()?;
    out.push(GradCheck {
        name: "mask_bce".into(),
        instances,
        worst_rel: worst_over(instances, seed.wrapping_add(99), check_mask)?,
    });
    Ok(out)
}

/// Golden-section minimizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_min(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmGm {
    pub residuals: usize,
    /// Largest `|u* − √|r||`.
    pub worst_u: f64,
    /// Largest `|L(u*) − |r||`.
    pub worst_loss: f64,
}

impl AmGm {
    pub fn passed(&self) -> bool {
        self.worst_u <= AMGM_U_TOL && self.worst_loss <= AMGM_LOSS_TOL
    }
}

/// Minimizes `½(r²/u² + u²)` over `u` numerically for random residuals.
pub fn am_gm_check(residuals: usize, seed: u64) -> AmGm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_u, mut worst_loss) = (0.0f64, 0.0f64);
    for _ in 0..residuals {
        let r: f64 = rng.random_range(-3.0..3.0);
        let loss = |u: f64| 0.5 * (r * r / (u * u) + u * u);
        let u = golden_min(1e-9, 4.0, 1e-12, loss);
        worst_u = worst_u.max((u - r.abs().sqrt()).abs());
        worst_loss = worst_loss.max((loss(u) - r.abs()).abs());
    }
    AmGm {
        residuals,
        worst_u,
        worst_loss,
    }
}

fn pixel_mask(size: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<bool> {
    (0..size * size)
        .map(|i| inside((i % size) as f64 / size as f64 + 0.5 / size as f64, (i / size) as f64 / size as f64 + 0.5 / size as f64))
        .collect()
}

fn in_box(b: &SideBox<f64>, x: f64, y: f64) -> bool {
    b.l <= x && x < b.r && b.t <= y && y < b.b
}

fn reference_overlap(d: &Detection, o: &SceneObject, mode: ApMode, raster: usize) -> f64 {
    match mode {
        ApMode::Box => {
            let (a, b) = (&d.bx, &o.bbox);
            let w = (a.r.min(b.r) - a.l.max(b.l)).max(0.0);
            let h = (a.b.min(b.b) - a.t.max(b.t)).max(0.0);
            let inter = w * h;
            if inter == 0.0 {
                return 0.0;
            }
            let union = (a.r - a.l) * (a.b - a.t) + (b.r - b.l) * (b.b - b.t) - inter;
            (inter / union).min(1.0)
        }
        ApMode::Mask => {
            let gt = pixel_mask(raster, |x, y| in_box(&o.bbox, x, y) && o.mask.contains(x, y));
            let bx = d.bx;
            let det = pixel_mask(raster, |x, y| {
                in_box(&bx, x, y)
                    && d.mask.as_ref().is_none_or(|m| {
                        let g = m.size();
                        let col = (((x - bx.l) / bx.width() * g as f64) as usize).min(g - 1);
                        let row = (((y - bx.t) / bx.height() * g as f64) as usize).min(g - 1);
                        m.get(row, col)
                    })
            });
            let inter = gt.iter().zip(&det).filter(|(a, b)| **a && **b).count();
            let union = gt.iter().zip(&det).filter(|(a, b)| **a || **b).count();
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        }
    }
}

/// Straightforward COCO-style AP of one class: ranks every detection, matches
/// greedily at each threshold and integrates the interpolated precision.
pub fn reference_class_ap(scenes: &[EvalScene], class: usize, mode: ApMode, raster: usize) -> Option<f64> {
    let n_gt = scenes
        .iter()
        .flat_map(|s| s.objects.iter())
        .filter(|o| o.class == class)
        .count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.detections.iter().filter(|d| d.class == class).map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut total = 0.0;
    for step in 0..10 {
        let threshold = 0.5 + 0.05 * step as f64;
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.objects.len()]).collect();
        let mut hits = Vec::new();
        for &(img, d) in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (j, o) in scenes[img].objects.iter().enumerate() {
                if o.class != class || used[img][j] {
                    continue;
                }
                let v = reference_overlap(d, o, mode, raster);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            hits.push(best.is_some());
        }
        let mut tp = 0;
        let points: Vec<(f64, f64)> = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                tp += usize::from(h);
                (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (i, &(recall, _)) in points.iter().enumerate() {
            if hits[i] {
                let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
                ap += (recall - prev_recall) * envelope;
                prev_recall = recall;
            }
        }
        total += ap;
    }
    Some(total / 10.0)
}

/// Detections and ground truth with distinct scores, some near-duplicates and
/// some misses.
pub fn random_eval_scene(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<SceneObject>, Vec<Detection>) {
    let random_box = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
        let (l, t) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
        SideBox::new(l, t, l + w, t + h).expect("positive box")
    };
    let objects: Vec<SceneObject> = (0..rng.random_range(1..=4))
        .map(|_| {
            let bbox = random_box(rng);
            SceneObject {
                class: rng.random_range(0..classes),
                bbox,
                visible: bbox,
                occluded_side: None,
                mask: Ellipse::inscribed(&bbox),
            }
        })
        .collect();
    let detections = (0..rng.random_range(0..=6))
        .map(|_| {
            let bx = if rng.random_bool(0.7) {
                let o = &objects[rng.random_range(0..objects.len())];
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.03..0.03);
                let b = o.bbox;
                SideBox::new(b.l + j(rng), b.t + j(rng), b.r + j(rng), b.b + j(rng)).expect("jittered box")
            } else {
                random_box(rng)
            };
            let mask = rng
                .random_bool(0.7)
                .then(|| MaskGrid::new(4, (0..16).map(|_| rng.random_bool(0.8)).collect()).expect("grid"));
            Detection {
                class: rng.random_range(0..classes),
                score: rng.random(),
                bx,
                mask,
            }
        })
        .collect();
    (objects, detections)
}

/// Largest gap between [`evaluate_ap`] and [`reference_class_ap`] over `scenes`
/// random scenes, evaluated jointly and one at a time, in both modes.
pub fn ap_equivalence(scenes: usize, seed: u64) -> f64 {
    let classes = 3;
    let raster = 48;
    let groups = ClassGroups {
        base: vec![0, 1],
        new: vec![2],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<(Vec<SceneObject>, Vec<Detection>)> =
        (0..scenes).map(|_| random_eval_scene(&mut rng, classes)).collect();
    let views: Vec<EvalScene> = data
        .iter()
        .map(|(o, d)| EvalScene {
            objects: o,
            detections: d,
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut compare = |set: &[EvalScene]| {
        for mode in [ApMode::Box, ApMode::Mask] {
            let got = evaluate_ap(set, &groups, mode, raster);
            for c in 0..classes {
                let diff = match (got.per_class.get(&c), reference_class_ap(set, c, mode, raster)) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                worst = worst.max(diff);
            }
        }
    };
    compare(&views);
    for v in &views {
        compare(std::slice::from_ref(v));
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
    pub probit_grid: Vec<ProbitGridRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

fn outcome(name: &str, value: f64, tolerance: String, passed: bool) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        value,
        tolerance,
        passed,
    }
}

/// Probit-vs-quadrature sweep, Monte Carlo consistency, gradient checks,
/// the per-side minimum of the uncertainty loss and evaluator equivalence.
pub fn run_checks(seed: u64) -> Result<CheckReport> {
    let grid = probit_grid(10_000, seed)?;
    let worst = grid.iter().map(|r| r.abs_err).fold(0.0, f64::max);
    let mut outcomes = vec![outcome("probit_vs_quadrature", worst, format!("<= {PROBIT_TOL}"), worst <= PROBIT_TOL)];
    let mc = mc_consistency(seed)?;
    outcomes.push(outcome("mc_vs_quadrature", mc.max_err, format!("<= {MC_TOL}"), mc.max_err <= MC_TOL));
    outcomes.push(outcome(
        "mc_std_ratio",
        mc.ratio,
        "in [5, 20]".into(),
        (5.0..=20.0).contains(&mc.ratio),
    ));
    for g in gradient_checks(10, seed)? {
        outcomes.push(outcome(&format!("grad_{}", g.name), g.worst_rel, format!("<= {GRAD_TOL}"), g.passed()));
    }
    let am = am_gm_check(100, seed);
    outcomes.push(outcome("amgm_u", am.worst_u, format!("<= {AMGM_U_TOL}"), am.worst_u <= AMGM_U_TOL));
    outcomes.push(outcome(
        "amgm_loss",
        am.worst_loss,
        format!("<= {AMGM_LOSS_TOL}"),
        am.worst_loss <= AMGM_LOSS_TOL,
    ));
    let ap = ap_equivalence(50, seed);
    outcomes.push(outcome("ap_vs_reference", ap, format!("<= {AP_TOL}"), ap <= AP_TOL));
    Ok(CheckReport {
        outcomes,
        probit_grid: grid,
    })
}
