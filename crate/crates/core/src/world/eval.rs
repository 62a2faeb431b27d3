use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nms::Detection;
use super::scene::SceneObject;
use crate::geometry::{iou, SideBox};

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    Box,
    Mask,
}

/// `size × size` bitmap over the unit canvas, pixel centers sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    size: usize,
    bits: Vec<u64>,
}

impl Raster {
    fn from_fn(size: usize, within: &SideBox<f64>, f: impl Fn(f64, f64) -> bool) -> Self {
        let mut bits = vec![0u64; (size * size).div_ceil(64)];
        let px = |v: f64| ((v * size as f64 - 0.5).ceil().max(0.0) as usize).min(size);
        for row in px(within.t)..px(within.b) {
            for col in px(within.l)..px(within.r) {
                let (x, y) = ((col as f64 + 0.5) / size as f64, (row as f64 + 0.5) / size as f64);
                if f(x, y) {
                    let i = row * size + col;
                    bits[i / 64] |= 1 << (i % 64);
                }
            }
        }
        Self { size, bits }
    }

    pub fn count(&self) -> u32 {
        self.bits.iter().map(|w| w.count_ones()).sum()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        let i = row * self.size + col;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }
}

pub fn rasterize_object(o: &SceneObject, size: usize) -> Raster {
    Raster::from_fn(size, &o.bbox, |x, y| o.mask.contains(x, y))
}

/// Pastes the detection's grid mask into its box; a detection without a mask
/// fills its box.
pub fn rasterize_detection(d: &Detection, size: usize) -> Raster {
    let bx = d.bx;
    match &d.mask {
        None => Raster::from_fn(size, &bx, |x, y| bx.contains_point(x, y)),
        Some(m) => {
            let g = m.size();
            Raster::from_fn(size, &bx, |x, y| {
                if !bx.contains_point(x, y) {
                    return false;
                }
                let col = (((x - bx.l) / bx.width() * g as f64) as usize).min(g - 1);
                let row = (((y - bx.t) / bx.height() * g as f64) as usize).min(g - 1);
                m.get(row, col)
            })
        }
    }
}

pub fn mask_iou(a: &Raster, b: &Raster) -> f64 {
    let inter: u32 = a.bits.iter().zip(&b.bits).map(|(x, y)| (x & y).count_ones()).sum();
    let union = a.count() + b.count() - inter;
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

/// Greedy matching of detections (already in rank order) at one IoU threshold.
/// `ious[i][j]` is the overlap of detection `i` with ground truth `j` of its
/// image, and `image[i]` names that image. Each detection takes the unmatched
/// ground truth of highest IoU (lowest index on ties) if it reaches `threshold`.
pub fn match_detections(ious: &[Vec<f64>], image: &[usize], threshold: f64) -> Vec<bool> {
    let mut taken: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    ious.iter()
        .zip(image)
        .map(|(row, &img)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if v >= threshold && !taken.contains_key(&(img, j)) && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken.insert((img, j), ());
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of a ranked list of hits against `n_gt` positives.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..tp.len() {
        if tp[i] {
            ap += (recall[i] - prev) * precision[i];
            prev = recall[i];
        }
    }
    ap
}

/// Ground truth and detections of one image.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub objects: &'a [SceneObject],
    pub detections: &'a [Detection],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
}

/// AP averaged over the IoU grid, per class and per class group. Classes with
/// no ground truth are left out of every mean; a group with none is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_class: BTreeMap<usize, f64>,
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

fn mean_of(per_class: &BTreeMap<usize, f64>, classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|c| per_class.get(c).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// COCO-style AP for one class over all images.
pub fn class_ap(scenes: &[EvalScene], class: usize, mode: ApMode, raster: usize) -> Option<f64> {
    let n_gt: usize = scenes.iter().map(|s| s.objects.iter().filter(|o| o.class == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, detection index, ious to this image's class-`class` gts)
    let mut ranked: Vec<(f64, usize, usize, Vec<f64>)> = Vec::new();
    for (img, s) in scenes.iter().enumerate() {
        let gts: Vec<&SceneObject> = s.objects.iter().filter(|o| o.class == class).collect();
        let gt_rasters: Vec<Raster> = match mode {
            ApMode::Box => Vec::new(),
            ApMode::Mask => gts.iter().map(|o| rasterize_object(o, raster)).collect(),
        };
        for (k, d) in s.detections.iter().enumerate().filter(|(_, d)| d.class == class) {
            let ious = match mode {
                ApMode::Box => gts.iter().map(|o| iou(&d.bx, &o.bbox)).collect(),
                ApMode::Mask => {
                    let r = rasterize_detection(d, raster);
                    gt_rasters.iter().map(|g| mask_iou(&r, g)).collect()
                }
            };
            ranked.push((d.score, img, k, ious));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let image: Vec<usize> = ranked.iter().map(|r| r.1).collect();
    let ious: Vec<Vec<f64>> = ranked.into_iter().map(|r| r.3).collect();
    let thresholds = iou_thresholds();
    let total: f64 = thresholds
        .iter()
        .map(|&t| ap_from_matches(&match_detections(&ious, &image, t), n_gt))
        .sum();
    Some(total / thresholds.len() as f64)
}

pub fn evaluate_ap(scenes: &[EvalScene], groups: &ClassGroups, mode: ApMode, raster: usize) -> GroupMetrics {
    let per_class: BTreeMap<usize, f64> = groups
        .base
        .iter()
        .chain(&groups.new)
        .filter_map(|&c| class_ap(scenes, c, mode, raster).map(|ap| (c, ap)))
        .collect();
    let all: Vec<usize> = groups.base.iter().chain(&groups.new).copied().collect();
    GroupMetrics {
        base: mean_of(&per_class, &groups.base),
        new: mean_of(&per_class, &groups.new),
        all: mean_of(&per_class, &all),
        per_class,
    }
}

/// Grid-cell centers of a `g × g` grid on `bx` inside the ellipse of `o`.
#[cfg(test)]
fn grid_of(o: &SceneObject, bx: &SideBox<f64>, g: usize) -> crate::mask::BinaryMask {
    let v = (0..g * g)
        .map(|i| {
            let (x, y) = super::extractor::cell_center(bx, g, i / g, i % g);
            o.mask.contains(x, y)
        })
        .collect();
    crate::mask::MaskGrid::new(g, v).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::Ellipse;

    fn obj(class: usize, l: f64, t: f64, r: f64, b: f64) -> SceneObject {
        let bbox = SideBox::new(l, t, r, b).unwrap();
        SceneObject {
            class,
            bbox,
            visible: bbox,
            occluded_side: None,
            mask: Ellipse::inscribed(&bbox),
        }
    }

    fn det(class: usize, score: f64, bx: SideBox<f64>) -> Detection {
        Detection {
            class,
            score,
            bx,
            mask: None,
        }
    }

    fn groups() -> ClassGroups {
        ClassGroups {
            base: vec![0],
            new: vec![1],
        }
    }

    #[test]
    fn hand_traced_ap() {
        let o = obj(0, 0.1, 0.1, 0.5, 0.5);
        let objects = vec![o.clone()];
        let near = SideBox::new(0.1, 0.1, 0.5, 0.498).unwrap();
        assert!(iou(&near, &o.bbox) > 0.99);
        let dets = vec![det(0, 0.3, near)];
        let s = [EvalScene {
            objects: &objects,
            detections: &dets,
        }];
        assert_eq!(class_ap(&s, 0, ApMode::Box, 64), Some(1.0));

        let none: Vec<Detection> = vec![];
        let s = [EvalScene {
            objects: &objects,
            detections: &none,
        }];
        assert_eq!(class_ap(&s, 0, ApMode::Box, 64), Some(0.0));

        let far = SideBox::new(0.7, 0.7, 0.9, 0.9).unwrap();
        let dets = vec![det(0, 0.9, o.bbox), det(0, 0.2, far)];
        let s = [EvalScene {
            objects: &objects,
            detections: &dets,
        }];
        assert_eq!(class_ap(&s, 0, ApMode::Box, 64), Some(1.0));
        let m = evaluate_ap(&s, &groups(), ApMode::Box, 64);
        assert_eq!(m.base, Some(1.0));
        assert_eq!(m.new, None);
        assert_eq!(m.all, Some(1.0));
    }

    #[test]
    fn fp_first_halves_precision() {
        assert_eq!(ap_from_matches(&[false, true], 1), 0.5);
        assert_eq!(ap_from_matches(&[true, false, true], 2), 0.5 + 0.5 * 2.0 / 3.0);
        assert_eq!(ap_from_matches(&[], 3), 0.0);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let tp = match_detections(&[vec![0.9], vec![0.95]], &[0, 0], 0.5);
        assert_eq!(tp, vec![true, false]);
        let tp = match_detections(&[vec![0.9], vec![0.95]], &[0, 1], 0.5);
        assert_eq!(tp, vec![true, true]);
    }

    #[test]
    fn mask_mode_matches_box_mode_for_exact_masks() {
        let o = obj(1, 0.2, 0.2, 0.6, 0.7);
        let objects = vec![o.clone()];
        let mut d = det(1, 0.5, o.bbox);
        let r = rasterize_detection(&d, 64);
        assert_eq!(mask_iou(&r, &r), 1.0);
        d.mask = Some(grid_of(&o, &o.bbox, 28));
        let dets = vec![d];
        let s = [EvalScene {
            objects: &objects,
            detections: &dets,
        }];
        let ap = class_ap(&s, 1, ApMode::Mask, 64).unwrap();
        assert!(ap >= 0.8, "{ap}");
        let empty = rasterize_object(&obj(0, 0.0, 0.0, 0.001, 0.001), 64);
        assert_eq!(empty.count(), 0);
        assert_eq!(mask_iou(&empty, &empty), 0.0);
    }
}
