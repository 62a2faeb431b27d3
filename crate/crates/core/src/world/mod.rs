//! Synthetic 2-D detection world: scenes of boxed elliptical objects, a frozen
//! random feature extractor standing in for a backbone, jittered proposals,
//! matching, NMS and COCO-style AP.

mod eval;
mod extractor;
mod nms;
mod proposals;
mod scene;
pub mod seed;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use eval::{
    ap_from_matches, class_ap, evaluate_ap, iou_thresholds, mask_iou, match_detections, rasterize_detection,
    rasterize_object, ApMode, ClassGroups, EvalScene, GroupMetrics, Raster,
};
pub use extractor::{mask_target, FeatureExtractor, RawFeature};
pub use nms::{cap_per_class, nms, Detection};
pub use proposals::{generate_proposals, match_proposals, MatchedProposal, Proposal};
pub use scene::{
    generate_dataset, generate_scene, generate_shots, generate_split, Dataset, DatasetBundle, Ellipse, Scene,
    SceneObject, Split, DATASET_FORMAT, DATASET_VERSION,
};

/// Knobs of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    #[serde(alias = "N_b")]
    pub n_base: usize,
    #[serde(alias = "N_n")]
    pub n_new: usize,
    #[serde(alias = "K")]
    pub shots: usize,
    pub base_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Largest IoU allowed between two objects of a scene.
    pub max_overlap: f64,
    /// Fraction of objects with one side hidden by an occluder.
    pub occlusion: f64,
    pub occlusion_min_cut: f64,
    pub occlusion_max_cut: f64,
    pub proposals_per_scene: usize,
    pub jitter_per_object: usize,
    /// Side noise of jittered proposals, relative to object width/height.
    pub jitter_sigma: f64,
    pub min_proposal_size: f64,
    pub prototype_dim: usize,
    pub appearance_dim: usize,
    pub geometry_dim: usize,
    /// Std of the per-instance deviation from the class prototype.
    pub instance_spread: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub feature_noise: f64,
    pub geometry_gain: f64,
    pub mask_grid: usize,
    pub mask_noise: f64,
    /// Canvas raster resolution for mask IoU.
    pub raster: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_base: 5,
            n_new: 3,
            shots: 1,
            base_scenes: 200,
            test_scenes: 200,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.15,
            max_size: 0.4,
            max_overlap: 0.1,
            occlusion: 0.3,
            occlusion_min_cut: 0.15,
            occlusion_max_cut: 0.35,
            proposals_per_scene: 32,
            jitter_per_object: 6,
            jitter_sigma: 0.12,
            min_proposal_size: 0.03,
            prototype_dim: 8,
            appearance_dim: 16,
            geometry_dim: 15,
            instance_spread: 0.15,
            contrast_min: 0.5,
            contrast_max: 2.0,
            feature_noise: 0.1,
            geometry_gain: 3.0,
            mask_grid: 14,
            mask_noise: 0.3,
            raster: 64,
        }
    }
}

impl WorldConfig {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_new
    }

    pub fn base_classes(&self) -> Range<usize> {
        0..self.n_base
    }

    pub fn new_classes(&self) -> Range<usize> {
        self.n_base..self.n_classes()
    }

    pub fn all_classes(&self) -> Range<usize> {
        0..self.n_classes()
    }

    pub fn is_new(&self, class: usize) -> bool {
        self.new_classes().contains(&class)
    }

    /// Box feature dimension, bias included.
    pub fn feature_dim(&self) -> usize {
        self.appearance_dim + self.geometry_dim + 1
    }

    /// Per-cell mask feature dimension, bias included.
    pub fn mask_dim(&self) -> usize {
        extractor::MASK_DIM
    }
}
