use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ClassEntry, ClassKind, ClassifierState};
use super::config::ExperimentConfig;
use super::model::decoded_box;
use super::variant::{ClassifierMode, Variant};
use crate::boxes::{grad_box_losses, predict_box, BoxExample, BoxHeadParams, BoxLossMode};
use crate::classifier::{
    grad_loss_classifier, grad_loss_classifier_mc, grad_loss_point, grad_softmax_ce, init_point_weights, BoxFeature,
    ClassLabel, ClassWeightPosterior, FocalParams, McNoise, PointClassifier, SoftmaxClassifier,
};
use crate::error::{ensure_dim, Error, Result};
use crate::geometry::{encode_offsets, SideBox};
use crate::linalg::Matrix;
use crate::mask::{grad_mask_bce, MaskExample, MaskHeadParams};
use crate::scalar::{softplus_inv, Scalar};
use crate::world::seed::derive;
use crate::world::{generate_proposals, mask_target, match_proposals, Dataset, FeatureExtractor, Scene};

/// `p − lr · g`.
pub fn sgd_step<T: Scalar>(params: &Matrix<T>, grads: &Matrix<T>, lr: T) -> Result<Matrix<T>> {
    let mut out = params.clone();
    sgd_update(&mut out, grads, lr)?;
    Ok(out)
}

/// In-place form of [`sgd_step`].
pub fn sgd_update<T: Scalar>(params: &mut Matrix<T>, grads: &Matrix<T>, lr: T) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::ShapeMismatch {
            name: "gradient".into(),
            expected: params.shape().to_vec(),
            got: grads.shape().to_vec(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    for (p, &g) in params.as_mut_slice().iter_mut().zip(grads.as_slice()) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// `grads` rescaled to L2 norm at most `max_norm`; `max_norm = 0` disables.
pub fn clip_norm(grads: &Matrix<f64>, max_norm: f64) -> Matrix<f64> {
    let norm = grads.as_slice().iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.map(|g| g * max_norm / norm)
    } else {
        grads.clone()
    }
}

/// Updates only rows `rows` of `params`.
fn sgd_update_rows(params: &mut Matrix<f64>, grads: &Matrix<f64>, lr: f64, rows: std::ops::Range<usize>) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    for r in rows {
        for (p, &g) in params.row_mut(r).iter_mut().zip(grads.row(r)) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// A box-training proposal with what is needed to re-pool it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSample {
    pub scene: usize,
    pub proposal: SideBox<f64>,
    pub gt: SideBox<f64>,
    pub example: BoxExample<f64>,
}

/// Training examples drawn from one set of scenes; class indices are head rows.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub classification: Vec<(BoxFeature<f64>, ClassLabel)>,
    pub boxes: Vec<BoxSample>,
    pub masks: Vec<MaskExample<f64>>,
}

pub fn build_training_set(
    scenes: &[Scene],
    trunk: &FeatureExtractor,
    cfg: &ExperimentConfig,
    row_of: impl Fn(usize) -> Option<usize>,
) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    let mut mask_candidates = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let matched = match_proposals(generate_proposals(scene, trunk)?, scene, cfg.eval.match_iou);
        for m in matched {
            let label = match m.label {
                ClassLabel::Class(c) => match row_of(c) {
                    Some(r) => ClassLabel::Class(r),
                    None => return Err(Error::Dataset(format!("class {c} is not trainable here"))),
                },
                ClassLabel::Background => ClassLabel::Background,
            };
            if let (ClassLabel::Class(row), Some(gi)) = (label, m.gt) {
                let gt = &scene.objects[gi];
                if m.iou >= cfg.eval.box_iou {
                    let f = m.proposal.feature.as_slice().to_vec();
                    let target = encode_offsets(&m.proposal.bx, &gt.bbox)?;
                    set.boxes.push(BoxSample {
                        scene: si,
                        proposal: m.proposal.bx,
                        gt: gt.bbox,
                        example: BoxExample {
                            class: row,
                            proposal_feature: f.clone(),
                            target_initial: target,
                            refine_feature: f,
                            target_refined: target,
                        },
                    });
                }
                mask_candidates.push((si, gi, row, m.proposal.bx));
            }
            set.classification.push((m.proposal.feature, label));
        }
    }
    let cap = cfg.train.max_mask_examples.max(1);
    let stride = mask_candidates.len().div_ceil(cap).max(1);
    for &(si, gi, row, bx) in mask_candidates.iter().step_by(stride) {
        let scene = &scenes[si];
        set.masks.push(MaskExample {
            class: row,
            cells: trunk.cell_features(scene, &bx)?,
            target: mask_target(&scene.objects[gi], &bx, trunk.config().mask_grid),
        });
    }
    Ok(set)
}

/// Re-pools each sample at the box its current initial offsets decode to.
pub fn refresh_two_stage(
    samples: &mut [BoxSample],
    scenes: &[Scene],
    trunk: &FeatureExtractor,
    params: &BoxHeadParams<f64>,
) -> Result<()> {
    let min = trunk.config().min_proposal_size;
    for s in samples {
        let (m, _) = predict_box(&s.example.proposal_feature, s.example.class, params)?;
        let initial = decoded_box(&s.proposal, &m, min);
        s.example.refine_feature = trunk.extract(&scenes[s.scene], &initial)?.into_inner();
        s.example.target_refined = encode_offsets(&initial, &s.gt)?;
    }
    Ok(())
}

/// Loss per iteration of each training phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub joint: Vec<f64>,
    pub boxes: Vec<f64>,
}

fn ensure_finite(loss: f64, what: &str, iter: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss at iteration {iter}")))
    }
}

fn sample<'a, T: Clone>(pool: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n.min(pool.len().max(1)))
        .filter_map(|_| pool.get(rng.random_range(0..pool.len().max(1))).cloned())
        .collect()
}

fn focal(cfg: &ExperimentConfig) -> FocalParams<f64> {
    FocalParams {
        gamma: cfg.loss.focal_gamma,
        alpha: cfg.loss.focal_alpha,
    }
}

/// Two-phase base training. The joint phase trains the point classifier (or the
/// softmax head), the refiner on proposal features and the mask head; the box
/// phase trains only the box head under the variant's box loss.
pub fn pretrain_base(
    base: &Dataset,
    trunk: &FeatureExtractor,
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    let w = &cfg.world;
    for c in w.base_classes() {
        if base.instance_count(c) == 0 {
            return Err(Error::Dataset(format!("base class {c} has no training instances")));
        }
    }
    if let Some(o) = base.scenes.iter().flat_map(|s| &s.objects).find(|o| !w.base_classes().contains(&o.class)) {
        return Err(Error::Dataset(format!("base set contains non-base class {}", o.class)));
    }
    let nb = w.n_base;
    let dim = trunk.dim();
    ensure_dim(w.feature_dim(), dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xBA5E_0001]));
    let softmax = variant.classifier() == ClassifierMode::Softmax;
    let mut cls = init_point_weights::<f64>(if softmax { nb + 1 } else { nb }, dim, &mut rng);
    let mut box_head = BoxHeadParams::<f64>::init(nb, dim, cfg.model.hidden, &mut rng);
    let mut mask_head = MaskHeadParams::<f64>::zeros(nb, w.mask_dim());
    let mut set = build_training_set(&base.scenes, trunk, cfg, |c| (c < nb).then_some(c))?;
    let (t, fp, mode) = (&cfg.train, focal(cfg), variant.box_mode());
    let mut log = TrainLog::default();

    for it in 0..t.pretrain_iters {
        let lr = t.rate(t.lr_pretrain, it, t.pretrain_iters);
        let batch = sample(&set.classification, t.batch_size, &mut rng);
        let g = if softmax {
            grad_softmax_ce(&batch, &SoftmaxClassifier { weights: cls.clone() })?
        } else {
            grad_loss_point(&batch, &PointClassifier::new(cls.clone()), fp)?
        };
        sgd_update(&mut cls, &g.weights, lr)?;
        let mut loss = g.loss;
        if !set.boxes.is_empty() {
            let ex: Vec<BoxExample<f64>> =
                sample(&set.boxes, t.box_batch_size, &mut rng).into_iter().map(|s| s.example).collect();
            let bg = grad_box_losses(&ex, &box_head, BoxLossMode::Plain, t.stop_grad_u)?;
            let blr = lr * t.box_lr_factor;
            sgd_update(&mut box_head.refiner_in, &clip_norm(&bg.refiner_in, t.box_grad_clip), blr)?;
            sgd_update(&mut box_head.refiner_out, &clip_norm(&bg.refiner_out, t.box_grad_clip), blr)?;
            loss += bg.loss;
        }
        if !set.masks.is_empty() {
            let mb = sample(&set.masks, t.mask_batch_size, &mut rng);
            let (ml, mg) = grad_mask_bce(&mb, &mask_head)?;
            sgd_update(&mut mask_head.weights, &mg, lr)?;
            loss += ml;
        }
        ensure_finite(loss, "pretraining", it)?;
        log.joint.push(loss);
    }

    if !set.boxes.is_empty() {
        for it in 0..t.box_iters {
            if mode.two_stage() && it % t.refresh_every.max(1) == 0 {
                refresh_two_stage(&mut set.boxes, &base.scenes, trunk, &box_head)?;
            }
            let lr = t.rate(t.lr_pretrain, it, t.box_iters) * t.box_lr_factor;
            let ex: Vec<BoxExample<f64>> =
                sample(&set.boxes, t.box_batch_size, &mut rng).into_iter().map(|s| s.example).collect();
            let bg = grad_box_losses(&ex, &box_head, mode, t.stop_grad_u)?;
            ensure_finite(bg.loss, "box", it)?;
            sgd_update(&mut box_head.predictor, &clip_norm(&bg.predictor, t.box_grad_clip), lr)?;
            sgd_update(&mut box_head.refiner_in, &clip_norm(&bg.refiner_in, t.box_grad_clip), lr)?;
            sgd_update(&mut box_head.refiner_out, &clip_norm(&bg.refiner_out, t.box_grad_clip), lr)?;
            log.boxes.push(bg.loss);
        }
    }

    let ckpt = Checkpoint {
        registry: w.base_classes().map(|id| ClassEntry { id, kind: ClassKind::Base }).collect(),
        variant,
        seed,
        classifier: if softmax {
            ClassifierState::Softmax(cls)
        } else {
            ClassifierState::Point(cls)
        },
        box_head,
        mask_head,
        trunk: trunk.clone(),
        config_fingerprint: cfg.pretrain_fingerprint(variant, seed),
    };
    ckpt.validate()?;
    Ok((ckpt, log))
}

fn mean_rows(m: &Matrix<f64>, groups: usize, per: usize) -> Matrix<f64> {
    // mean over the `groups` blocks of `per` consecutive rows
    let mut out = Matrix::zeros(per, m.cols());
    for g in 0..groups {
        for k in 0..per {
            for (o, &v) in out.row_mut(k).iter_mut().zip(m.row(g * per + k)) {
                *o += v / groups as f64;
            }
        }
    }
    out
}

fn tile(block: &Matrix<f64>, times: usize) -> Matrix<f64> {
    (0..times).fold(Matrix::zeros(0, block.cols()), |acc, _| acc.vstack(block).expect("same width"))
}

/// New-class box and mask rows start at the mean of the base rows; they share
/// the base head's first refiner layer.
pub fn init_new_heads(base: &Checkpoint, n_new: usize) -> (BoxHeadParams<f64>, MaskHeadParams<f64>) {
    let nb = base.box_head.classes();
    let b = &base.box_head;
    let boxes = BoxHeadParams {
        predictor: tile(&mean_rows(&b.predictor, nb, 8), n_new),
        refiner_in: b.refiner_in.clone(),
        refiner_out: tile(&mean_rows(&b.refiner_out, nb, 4), n_new),
    };
    let masks = MaskHeadParams {
        weights: tile(&mean_rows(&base.mask_head.weights, nb, 1), n_new),
    };
    (boxes, masks)
}

/// Fine-tunes new-class rows on the shot set; base parameters are only read.
pub fn finetune_new(
    base: &Checkpoint,
    shots: &Dataset,
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    let w = &cfg.world;
    if shots.scenes.is_empty() || shots.scenes.iter().all(|s| s.objects.is_empty()) {
        return Err(Error::Dataset("shot set is empty".into()));
    }
    if let Some(o) = shots.scenes.iter().flat_map(|s| &s.objects).find(|o| !w.is_new(o.class)) {
        return Err(Error::Dataset(format!("shot set contains non-new class {}", o.class)));
    }
    if base.variant.pretrain_family() != variant.pretrain_family() {
        return Err(Error::Checkpoint(format!(
            "base model was trained for {}, which does not share heads with {variant}",
            base.variant
        )));
    }
    let (nb, nn) = (w.n_base, w.n_new);
    let trunk = &base.trunk;
    let dim = trunk.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xF1E7, w.shots as u64]));
    let set = build_training_set(&shots.scenes, trunk, cfg, |c| w.is_new(c).then(|| c - nb))?;
    let mut boxes_set = set.boxes;
    let iters = cfg.train.finetune_schedule(w.shots);
    let lr = cfg.train.finetune_rate();
    let (fp, mode) = (focal(cfg), variant.box_mode());
    let kl_weight = cfg.loss.kl_weight.resolve(set.classification.len());
    let mut log = TrainLog::default();

    let new_mu = || {
        if cfg.model.zero_new_mu {
            Matrix::zeros(nn, dim)
        } else {
            init_point_weights(nn, dim, &mut ChaCha8Rng::seed_from_u64(derive(seed, &[0x3E3E])))
        }
    };
    let (mut box_head, mut mask_head) = init_new_heads(base, nn);
    let mut classifier = match variant.classifier() {
        ClassifierMode::Sigmoid => ClassifierState::Point(new_mu()),
        ClassifierMode::Probit | ClassifierMode::MonteCarlo => {
            {
            let mu = new_mu();
            let rho = Matrix::filled(mu.rows(), mu.cols(), softplus_inv(cfg.model.init_variance));
            ClassifierState::Posterior(ClassWeightPosterior::new(mu, rho)?)
        }
        }
        ClassifierMode::Softmax => ClassifierState::Softmax(new_mu()),
    };
    // softmax fine-tuning runs over the full head with base and background rows frozen
    let softmax_full = match (&classifier, &base.classifier) {
        (ClassifierState::Softmax(n), ClassifierState::Softmax(b)) => {
            let bg = b.rows() - 1;
            Some(b.row_range(0, bg).vstack(n)?.vstack(&b.row_range(bg, bg + 1))?)
        }
        (ClassifierState::Softmax(_), _) => {
            return Err(Error::Checkpoint("softmax fine-tuning needs a softmax base model".into()))
        }
        _ => None,
    };
    let mut softmax_full = softmax_full;
    let softmax_batch: Vec<(BoxFeature<f64>, ClassLabel)> = set
        .classification
        .iter()
        .map(|(f, y)| {
            let full = match y {
                ClassLabel::Class(r) => ClassLabel::Class(nb + r),
                ClassLabel::Background => ClassLabel::Background,
            };
            (f.clone(), full)
        })
        .collect();

    for it in 0..iters {
        let mut loss = match &mut classifier {
            ClassifierState::Point(wn) => {
                let g = grad_loss_point(&set.classification, &PointClassifier::new(wn.clone()), fp)?;
                sgd_update(wn, &g.weights, lr)?;
                g.loss
            }
            ClassifierState::Posterior(post) => {
                let g = if variant.classifier() == ClassifierMode::MonteCarlo {
                    let noise = McNoise::draw(
                        set.classification.len(),
                        nn,
                        cfg.model.mc_train_samples,
                        rng.random::<u64>(),
                    );
                    grad_loss_classifier_mc(&set.classification, post, kl_weight, fp, &noise)?
                } else {
                    grad_loss_classifier(&set.classification, post, kl_weight, fp)?
                };
                sgd_update(post.mu_mut(), &g.mu, lr)?;
                sgd_update(post.rho_mut(), &g.rho, lr)?;
                g.loss
            }
            ClassifierState::Softmax(_) => {
                let full = softmax_full.as_mut().expect("softmax head");
                let g = grad_softmax_ce(&softmax_batch, &SoftmaxClassifier { weights: full.clone() })?;
                sgd_update_rows(full, &g.weights, lr, nb..nb + nn)?;
                g.loss
            }
        };
        if !boxes_set.is_empty() {
            if mode.two_stage() && it % cfg.train.refresh_every.max(1) == 0 {
                refresh_two_stage(&mut boxes_set, &shots.scenes, trunk, &box_head)?;
            }
            let ex: Vec<BoxExample<f64>> = boxes_set.iter().map(|s| s.example.clone()).collect();
            let bg = grad_box_losses(&ex, &box_head, mode, cfg.train.stop_grad_u)?;
            let blr = lr * cfg.train.box_lr_factor;
            let clip = cfg.train.box_grad_clip;
            sgd_update(&mut box_head.predictor, &clip_norm(&bg.predictor, clip), blr)?;
            sgd_update(&mut box_head.refiner_out, &clip_norm(&bg.refiner_out, clip), blr)?;
            loss += bg.loss;
        }
        if !set.masks.is_empty() {
            let (ml, mg) = grad_mask_bce(&set.masks, &mask_head)?;
            sgd_update(&mut mask_head.weights, &mg, lr)?;
            loss += ml;
        }
        ensure_finite(loss, "fine-tuning", it)?;
        log.joint.push(loss);
    }
    if let (ClassifierState::Softmax(n), Some(full)) = (&mut classifier, softmax_full) {
        *n = full.row_range(nb, nb + nn);
    }

    let ckpt = Checkpoint {
        registry: w.new_classes().map(|id| ClassEntry { id, kind: ClassKind::New }).collect(),
        variant,
        seed,
        classifier,
        box_head,
        mask_head,
        trunk: trunk.clone(),
        config_fingerprint: cfg.fingerprint(),
    };
    ckpt.validate()?;
    Ok((ckpt, log))
}
