use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::extractor::FeatureExtractor;
use super::scene::Scene;
use super::seed::derive;
use crate::classifier::{BoxFeature, ClassLabel};
use crate::error::Result;
use crate::geometry::{iou, SideBox};

/// A candidate box with its pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bx: SideBox<f64>,
    pub feature: BoxFeature<f64>,
}

/// A proposal labeled against the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedProposal {
    pub proposal: Proposal,
    /// Max-IoU ground truth, if any overlaps at all.
    pub gt: Option<usize>,
    pub iou: f64,
    /// Class of `gt` when `iou ≥` the matching threshold.
    pub label: ClassLabel,
}

fn sane_box(l: f64, t: f64, r: f64, b: f64, min: f64) -> Option<SideBox<f64>> {
    let bx = SideBox::new(l, t, r, b).ok()?.clip_unit()?;
    (bx.width() >= min && bx.height() >= min).then_some(bx)
}

/// Jittered boxes around each object plus uniform random boxes, up to
/// `proposals_per_scene` in total. Jitter centers between the visible and the
/// full extent of the object, so occluded objects still get some well-aligned
/// proposals.
pub fn generate_proposals(scene: &Scene, extractor: &FeatureExtractor) -> Result<Vec<Proposal>> {
    let cfg = extractor.config();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(scene.seed, &[0x9209]));
    let noise = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("valid std");
    let min = cfg.min_proposal_size;
    let total = cfg.proposals_per_scene;
    let mut boxes = Vec::with_capacity(total);
    'objects: for o in &scene.objects {
        for _ in 0..cfg.jitter_per_object {
            if boxes.len() >= total {
                break 'objects;
            }
            let a: f64 = rng.random();
            let v = o.visible.sides();
            let f = o.bbox.sides();
            let c: [f64; 4] = std::array::from_fn(|k| v[k] + a * (f[k] - v[k]));
            let (w, h) = (c[2] - c[0], c[3] - c[1]);
            for _ in 0..8 {
                let cand = sane_box(
                    c[0] + w * noise.sample(&mut rng),
                    c[1] + h * noise.sample(&mut rng),
                    c[2] + w * noise.sample(&mut rng),
                    c[3] + h * noise.sample(&mut rng),
                    min,
                );
                if let Some(bx) = cand {
                    boxes.push(bx);
                    break;
                }
            }
        }
    }
    while boxes.len() < total {
        let w = rng.random_range(cfg.min_size * 0.5..=cfg.max_size * 1.2);
        let h = rng.random_range(cfg.min_size * 0.5..=cfg.max_size * 1.2);
        let l = rng.random_range(0.0..=(1.0 - w).max(0.0));
        let t = rng.random_range(0.0..=(1.0 - h).max(0.0));
        if let Some(bx) = sane_box(l, t, l + w, t + h, min) {
            boxes.push(bx);
        }
    }
    boxes
        .into_iter()
        .map(|bx| {
            Ok(Proposal {
                feature: extractor.extract(scene, &bx)?,
                bx,
            })
        })
        .collect()
}

/// Labels each proposal with its max-IoU ground truth (lowest index on ties)
/// when that IoU is at least `threshold`, else background.
pub fn match_proposals(proposals: Vec<Proposal>, scene: &Scene, threshold: f64) -> Vec<MatchedProposal> {
    proposals
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, o) in scene.objects.iter().enumerate() {
                let v = iou(&p.bx, &o.bbox);
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (gt, v) = match best {
                Some((i, v)) => (Some(i), v),
                None => (None, 0.0),
            };
            let label = match gt {
                Some(i) if v >= threshold => ClassLabel::Class(scene.objects[i].class),
                _ => ClassLabel::Background,
            };
            MatchedProposal {
                proposal: p,
                gt,
                iou: v,
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene, Ellipse, SceneObject};
    use crate::world::WorldConfig;

    fn object(class: usize, bx: SideBox<f64>) -> SceneObject {
        SceneObject {
            class,
            bbox: bx,
            visible: bx,
            occluded_side: None,
            mask: Ellipse::inscribed(&bx),
        }
    }

    fn proposal(ex: &FeatureExtractor, scene: &Scene, bx: SideBox<f64>) -> Proposal {
        Proposal {
            feature: ex.extract(scene, &bx).unwrap(),
            bx,
        }
    }

    #[test]
    fn proposal_count_and_determinism() {
        let cfg = WorldConfig::default();
        let ex = FeatureExtractor::new(&cfg, 0);
        let scene = generate_scene(0, 42, &[0, 3, 7], &cfg).unwrap();
        let a = generate_proposals(&scene, &ex).unwrap();
        assert_eq!(a.len(), cfg.proposals_per_scene);
        assert_eq!(a, generate_proposals(&scene, &ex).unwrap());
        let matched = match_proposals(a, &scene, 0.5);
        assert!(matched.iter().any(|m| m.label != ClassLabel::Background));
    }

    #[test]
    fn matching_rules() {
        let cfg = WorldConfig::default();
        let ex = FeatureExtractor::new(&cfg, 0);
        let a = SideBox::new(0.125, 0.125, 0.375, 0.375).unwrap();
        let b = SideBox::new(0.375, 0.125, 0.625, 0.375).unwrap();
        let scene = Scene {
            id: 0,
            seed: 1,
            objects: vec![object(4, a), object(2, b)],
        };
        let exact = match_proposals(vec![proposal(&ex, &scene, a)], &scene, 0.5);
        assert_eq!(exact[0].gt, Some(0));
        assert_eq!(exact[0].iou, 1.0);
        assert_eq!(exact[0].label, ClassLabel::Class(4));
        // straddles both objects equally
        let mid = SideBox::new(0.25, 0.125, 0.5, 0.375).unwrap();
        let tie = match_proposals(vec![proposal(&ex, &scene, mid)], &scene, 0.3);
        assert_eq!(tie[0].gt, Some(0));
        assert_eq!(tie[0].label, ClassLabel::Class(4));
        let empty = Scene {
            id: 1,
            seed: 2,
            objects: vec![],
        };
        let ps = generate_proposals(&empty, &ex).unwrap();
        assert!(match_proposals(ps, &empty, 0.5).iter().all(|m| m.label == ClassLabel::Background));
    }
}
