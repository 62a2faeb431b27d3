use super::checkpoint::{Checkpoint, ClassEntry, ClassifierState};
use super::config::EvalConfig;
use super::variant::{ClassifierMode, Variant};
use crate::boxes::{predict_box, refine_box, BoxHeadParams, BoxLossMode, SideUncertainty};
use crate::classifier::{
    class_scores_gaussian, class_scores_mc, class_scores_point, softmax_ce_baseline, BoxFeature, ClassLabel,
    GaussianWeights, PointClassifier, SoftmaxClassifier,
};
use crate::error::{Error, Result};
use crate::geometry::{decode_offsets, SideBox};
use crate::linalg::Matrix;
use crate::mask::{binarize, mask_logits, MaskHeadParams};
use crate::world::seed::derive;
use crate::world::{cap_per_class, nms, Detection, FeatureExtractor, Proposal, Scene};

/// Box decoded from `offsets` relative to `proposal`, clipped to the canvas;
/// the proposal itself when that leaves a box smaller than `min_size`.
pub fn decoded_box(proposal: &SideBox<f64>, offsets: &[f64; 4], min_size: f64) -> SideBox<f64> {
    decode_offsets(proposal, offsets)
        .ok()
        .and_then(|b| b.clip_unit())
        .filter(|b| b.width() >= min_size && b.height() >= min_size)
        .unwrap_or(*proposal)
}

/// Classifier of a deployable model.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreHead {
    Point(PointClassifier<f64>),
    Gaussian(GaussianWeights<f64>),
    Softmax(SoftmaxClassifier<f64>),
}

/// Base and new heads joined row-wise in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub registry: Vec<ClassEntry>,
    pub mode: ClassifierMode,
    pub box_mode: BoxLossMode,
    pub head: ScoreHead,
    pub box_head: BoxHeadParams<f64>,
    pub mask_head: MaskHeadParams<f64>,
    pub trunk: FeatureExtractor,
    pub mc_samples: usize,
}

impl MergedModel {
    /// The pretrained model on its own: point sigmoid or softmax scores.
    pub fn from_base(base: &Checkpoint) -> Result<Self> {
        let (mode, head) = match &base.classifier {
            ClassifierState::Point(w) => (ClassifierMode::Sigmoid, ScoreHead::Point(PointClassifier::new(w.clone()))),
            ClassifierState::Softmax(w) => (
                ClassifierMode::Softmax,
                ScoreHead::Softmax(SoftmaxClassifier { weights: w.clone() }),
            ),
            ClassifierState::Posterior(_) => return Err(Error::Merge("a base model carries point weights".into())),
        };
        Ok(Self {
            registry: base.registry.clone(),
            mode,
            box_mode: base.variant.box_mode(),
            head,
            box_head: base.box_head.clone(),
            mask_head: base.mask_head.clone(),
            trunk: base.trunk.clone(),
            mc_samples: 1,
        })
    }

    pub fn classes(&self) -> usize {
        self.registry.len()
    }

    /// Per-row class scores. `stream` seeds Monte Carlo sampling.
    pub fn class_scores(&self, f: &BoxFeature<f64>, stream: u64) -> Result<Vec<f64>> {
        match (&self.head, self.mode) {
            (ScoreHead::Point(w), _) => class_scores_point(f, w),
            (ScoreHead::Gaussian(g), ClassifierMode::MonteCarlo) => class_scores_mc(f, g, self.mc_samples, stream),
            (ScoreHead::Gaussian(g), _) => class_scores_gaussian(f, g),
            (ScoreHead::Softmax(s), _) => {
                let (mut scores, _) = softmax_ce_baseline(f, s, ClassLabel::Background)?;
                scores.pop();
                Ok(scores)
            }
        }
    }

    /// Final box of class row `row` for a proposal.
    pub fn predict_final_box(&self, scene: &Scene, p: &Proposal, row: usize) -> Result<SideBox<f64>> {
        let min = self.trunk.config().min_proposal_size;
        let f = p.feature.as_slice();
        if !self.box_mode.two_stage() {
            let b = refine_box(f, &SideUncertainty::neutral(), row, &self.box_head)?;
            return Ok(decoded_box(&p.bx, &b, min));
        }
        let (m, u) = predict_box(f, row, &self.box_head)?;
        let initial = decoded_box(&p.bx, &m, min);
        let fm = self.trunk.extract(scene, &initial)?;
        let u = if self.box_mode.feeds_uncertainty() { u } else { SideUncertainty::neutral() };
        let b = refine_box(fm.as_slice(), &u, row, &self.box_head)?;
        Ok(decoded_box(&initial, &b, min))
    }

    /// Scores every proposal, keeps class scores above the filter, predicts
    /// boxes, runs per-class NMS and the per-class cap, then predicts masks on
    /// the surviving boxes.
    pub fn detect(&self, scene: &Scene, proposals: &[Proposal], eval: &EvalConfig) -> Result<Vec<Detection>> {
        let mut candidates = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let scores = self.class_scores(&p.feature, derive(scene.seed, &[0x3C, i as u64]))?;
            for (row, &s) in scores.iter().enumerate() {
                if s > eval.score_filter {
                    candidates.push(Detection {
                        class: self.registry[row].id,
                        score: s,
                        bx: self.predict_final_box(scene, p, row)?,
                        mask: None,
                    });
                }
            }
        }
        let kept = cap_per_class(nms(candidates, eval.nms_iou), eval.max_per_class);
        kept.into_iter()
            .map(|mut d| {
                let row = self
                    .registry
                    .iter()
                    .position(|e| e.id == d.class)
                    .expect("class from registry");
                let cells = self.trunk.cell_features(scene, &d.bx)?;
                d.mask = Some(binarize(&mask_logits(&cells, row, &self.mask_head)?.probabilities()));
                Ok(d)
            })
            .collect()
    }
}

/// Concatenates `base` and `new` row-wise: `μ = [μ_b; μ_n]`, `Σ = [0; Σ_n]`.
pub fn merge_checkpoints(base: &Checkpoint, new: &Checkpoint, mc_samples: usize) -> Result<MergedModel> {
    let base_ids = base.class_ids();
    if let Some(id) = new.class_ids().into_iter().find(|id| base_ids.contains(id)) {
        return Err(Error::Merge(format!("class {id} appears in both checkpoints")));
    }
    if base.trunk.fingerprint() != new.trunk.fingerprint() {
        return Err(Error::Merge("checkpoints were trained on different trunks".into()));
    }
    let mut merged = MergedModel::from_base(base)?;
    merged.registry.extend_from_slice(&new.registry);
    merged.mc_samples = mc_samples.max(1);
    let mode = new.variant.classifier();
    merged.mode = mode;
    merged.head = match (&merged.head, &new.classifier) {
        (ScoreHead::Point(b), ClassifierState::Point(n)) => ScoreHead::Point(PointClassifier::new(b.weights.vstack(n)?)),
        (ScoreHead::Point(b), ClassifierState::Posterior(n)) => {
            ScoreHead::Gaussian(GaussianWeights::point(&b.weights).vstack(&n.gaussian())?)
        }
        (ScoreHead::Softmax(b), ClassifierState::Softmax(n)) => {
            let bg = b.weights.rows() - 1;
            let rows = b.weights.row_range(0, bg).vstack(n)?.vstack(&b.weights.row_range(bg, bg + 1))?;
            ScoreHead::Softmax(SoftmaxClassifier { weights: rows })
        }
        _ => return Err(Error::Merge("classifier kinds of the two checkpoints do not combine".into())),
    };
    merged.box_head = base.box_head.concat(&new.box_head)?;
    merged.mask_head = MaskHeadParams {
        weights: base.mask_head.weights.vstack(&new.mask_head.weights)?,
    };
    Ok(merged)
}

/// A checkpoint with no classes, for identity merges.
pub fn empty_checkpoint(like: &Checkpoint, variant: Variant) -> Checkpoint {
    let dim = like.box_head.dim();
    let classifier = match variant.classifier() {
        ClassifierMode::Softmax => ClassifierState::Softmax(Matrix::zeros(0, dim)),
        _ => ClassifierState::Point(Matrix::zeros(0, dim)),
    };
    Checkpoint {
        registry: Vec::new(),
        variant,
        seed: like.seed,
        classifier,
        box_head: like.box_head.select_classes(&[]),
        mask_head: MaskHeadParams {
            weights: Matrix::zeros(0, like.mask_head.weights.cols()),
        },
        trunk: like.trunk.clone(),
        config_fingerprint: like.config_fingerprint.clone(),
    }
}
