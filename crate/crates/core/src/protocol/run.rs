use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::model::{merge_checkpoints, MergedModel};
use super::train::{finetune_new, pretrain_base};
use super::variant::{PretrainFamily, Variant};
use crate::error::{Error, Result};
use crate::world::seed::derive;
use crate::world::{
    evaluate_ap, generate_proposals, generate_shots, generate_split, ApMode, ClassGroups, Dataset, Detection,
    EvalScene, FeatureExtractor, GroupMetrics, Proposal, Split, WorldConfig,
};

const TRUNK_TAG: u64 = 0x7A0C;

/// Everything about one seed that does not depend on K or the variant.
#[derive(Debug, Clone)]
pub struct SeedWorld {
    pub seed: u64,
    pub trunk: FeatureExtractor,
    pub base: Dataset,
    pub test: Dataset,
    pub base_only: Dataset,
    test_proposals: Vec<Vec<Proposal>>,
    base_only_proposals: Vec<Vec<Proposal>>,
}

fn proposals_of(d: &Dataset, trunk: &FeatureExtractor) -> Result<Vec<Vec<Proposal>>> {
    d.scenes.par_iter().map(|s| generate_proposals(s, trunk)).collect()
}

/// The frozen feature extractor of a seed.
pub fn seed_trunk(world: &WorldConfig, seed: u64) -> FeatureExtractor {
    FeatureExtractor::new(world, derive(seed, &[TRUNK_TAG]))
}

impl SeedWorld {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let w = &cfg.world;
        let trunk = seed_trunk(w, seed);
        let base = generate_split(Split::Base, w.base_scenes, seed, w)?;
        let test = generate_split(Split::Test, w.test_scenes, seed, w)?;
        let base_only = generate_split(Split::BaseOnlyTest, cfg.eval.base_only_scenes, seed, w)?;
        Ok(Self {
            test_proposals: proposals_of(&test, &trunk)?,
            base_only_proposals: proposals_of(&base_only, &trunk)?,
            seed,
            trunk,
            base,
            test,
            base_only,
        })
    }

    pub fn shots(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        generate_shots(cfg.world.shots, self.seed, &cfg.world)
    }

    pub fn pretrain(&self, cfg: &ExperimentConfig, family: PretrainFamily) -> Result<Checkpoint> {
        Ok(pretrain_base(&self.base, &self.trunk, cfg, representative(family), self.seed)?.0)
    }

    pub fn detect_test(&self, model: &MergedModel, cfg: &ExperimentConfig) -> Result<Vec<Vec<Detection>>> {
        detect_all(model, &self.test, &self.test_proposals, cfg)
    }

    pub fn detect_base_only(&self, model: &MergedModel, cfg: &ExperimentConfig) -> Result<Vec<Vec<Detection>>> {
        detect_all(model, &self.base_only, &self.base_only_proposals, cfg)
    }
}

fn detect_all(
    model: &MergedModel,
    data: &Dataset,
    proposals: &[Vec<Proposal>],
    cfg: &ExperimentConfig,
) -> Result<Vec<Vec<Detection>>> {
    data.scenes
        .par_iter()
        .zip(proposals)
        .map(|(s, p)| model.detect(s, p, &cfg.eval))
        .collect()
}

/// The variant whose name a shared base model is trained under.
pub fn representative(family: PretrainFamily) -> Variant {
    Variant::ALL
        .into_iter()
        .find(|v| v.pretrain_family() == family)
        .expect("every family has a variant")
}

/// Detections restricted to the classes in `ids`.
pub fn restrict(dets: &[Vec<Detection>], ids: &[usize]) -> Vec<Vec<Detection>> {
    dets.iter()
        .map(|d| d.iter().filter(|x| ids.contains(&x.class)).cloned().collect())
        .collect()
}

/// Bitwise equality of two detection lists, masks included.
pub fn detections_identical(a: &[Vec<Detection>], b: &[Vec<Detection>]) -> bool {
    let same = |x: &Detection, y: &Detection| {
        x.class == y.class
            && x.score.to_bits() == y.score.to_bits()
            && x.bx.sides().iter().zip(y.bx.sides()).all(|(p, q)| p.to_bits() == q.to_bits())
            && x.mask == y.mask
    };
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(p, q)| p.len() == q.len() && p.iter().zip(q).all(|(x, y)| same(x, y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: Variant,
    pub k: usize,
    pub seed: u64,
    pub box_ap: GroupMetrics,
    pub mask_ap: GroupMetrics,
    /// Base-class detections on base-only scenes equal the pretrained model's.
    pub non_forgetting: bool,
}

impl Metrics {
    /// `(split, metric, value)` rows; groups with no ground truth are skipped.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut out = Vec::new();
        for (metric, m) in [("box_ap", &self.box_ap), ("mask_ap", &self.mask_ap)] {
            for (split, v) in [("new", m.new), ("base", m.base), ("all", m.all)] {
                if let Some(v) = v {
                    out.push((split, metric, v));
                }
            }
        }
        out
    }
}

/// Fine-tunes, merges and evaluates one cell on a prepared seed world.
pub fn evaluate_cell(
    world: &SeedWorld,
    base: &Checkpoint,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<Metrics> {
    let shots = world.shots(cfg)?;
    let (new, _) = finetune_new(base, &shots, cfg, variant, world.seed)?;
    let merged = merge_checkpoints(base, &new, cfg.model.mc_samples)?;
    Ok(evaluate_merged(world, base, &merged, cfg, variant)?.0)
}

/// Test-set AP of `merged`, and its base-only detections compared with those
/// of `base` alone. Also returns the test detections.
pub fn evaluate_merged(
    world: &SeedWorld,
    base: &Checkpoint,
    merged: &MergedModel,
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<(Metrics, Vec<Vec<Detection>>)> {
    let dets = world.detect_test(merged, cfg)?;
    let w = &cfg.world;
    let groups = ClassGroups {
        base: w.base_classes().collect(),
        new: w.new_classes().collect(),
    };
    let scenes: Vec<EvalScene> = world
        .test
        .scenes
        .iter()
        .zip(&dets)
        .map(|(s, d)| EvalScene {
            objects: &s.objects,
            detections: d,
        })
        .collect();
    let before = world.detect_base_only(&MergedModel::from_base(base)?, cfg)?;
    let after = restrict(&world.detect_base_only(merged, cfg)?, &groups.base);
    let metrics = Metrics {
        variant,
        k: w.shots,
        seed: world.seed,
        box_ap: evaluate_ap(&scenes, &groups, ApMode::Box, w.raster),
        mask_ap: evaluate_ap(&scenes, &groups, ApMode::Mask, w.raster),
        non_forgetting: detections_identical(&before, &after),
    };
    Ok((metrics, dets))
}

/// Full lifecycle of one variant for one seed; K is `cfg.world.shots`.
pub fn run_variant(name: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Metrics> {
    let variant: Variant = name.parse()?;
    let world = SeedWorld::new(cfg, seed)?;
    let base = world.pretrain(cfg, variant.pretrain_family())?;
    evaluate_cell(&world, &base, &cfg.for_cell(variant, cfg.world.shots), variant)
}

/// Every `(variant, K, seed)` cell, sorted by variant, K, then seed. Base
/// models are trained once per `(family, seed)` and shared.
pub fn sweep(cfg: &ExperimentConfig, variants: &[Variant], shots: &[usize], seeds: &[u64]) -> Result<Vec<Metrics>> {
    if variants.is_empty() || shots.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one variant, K and seed".into()));
    }
    if shots.contains(&0) {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let worlds: Vec<SeedWorld> = seeds.iter().map(|&s| SeedWorld::new(cfg, s)).collect::<Result<_>>()?;
    let mut families: Vec<PretrainFamily> = variants.iter().map(|v| v.pretrain_family()).collect();
    families.sort();
    families.dedup();
    let jobs: Vec<(usize, PretrainFamily)> = (0..worlds.len())
        .flat_map(|w| families.iter().map(move |&f| (w, f)))
        .collect();
    let bases: BTreeMap<(usize, PretrainFamily), Checkpoint> = jobs
        .par_iter()
        .map(|&(w, f)| worlds[w].pretrain(cfg, f).map(|c| ((w, f), c)))
        .collect::<Result<_>>()?;

    let mut cells: Vec<(Variant, usize, usize)> = Vec::new();
    for &v in variants {
        for &k in shots {
            for w in 0..worlds.len() {
                cells.push((v, k, w));
            }
        }
    }
    cells.sort_by_key(|&(v, k, w)| (v, k, worlds[w].seed));
    cells.dedup();
    cells
        .par_iter()
        .map(|&(v, k, w)| evaluate_cell(&worlds[w], &bases[&(w, v.pretrain_family())], &cfg.for_cell(v, k), v))
        .collect()
}
