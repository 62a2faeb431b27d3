use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, SideBox};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bx: SideBox<f64>,
    /// Mask on the grid spanning `bx`.
    pub mask: Option<BinaryMask>,
}

/// Descending score, then lower class id, then input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[a].class.cmp(&dets[b].class))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class suppression: a detection is dropped when a kept detection
/// of the same class overlaps it with IoU above `threshold`. Output is in rank order.
pub fn nms(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(&dets) {
        let d = &dets[i];
        if kept
            .iter()
            .all(|&k| dets[k].class != d.class || iou(&dets[k].bx, &d.bx) <= threshold)
        {
            kept.push(i);
        }
    }
    let mut slots: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
    kept.into_iter().map(|i| slots[i].take().expect("each index once")).collect()
}

/// Keeps the `cap` best detections of every class, in rank order.
pub fn cap_per_class(dets: Vec<Detection>, cap: usize) -> Vec<Detection> {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    let order = ranked(&dets);
    let mut slots: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
    order
        .into_iter()
        .filter_map(|i| {
            let n = counts.entry(slots[i].as_ref().expect("present").class).or_default();
            *n += 1;
            if *n <= cap {
                slots[i].take()
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, score: f64, l: f64, t: f64, r: f64, b: f64) -> Detection {
        Detection {
            class,
            score,
            bx: SideBox::new(l, t, r, b).unwrap(),
            mask: None,
        }
    }

    #[test]
    fn hand_traced_cases() {
        // IoU of [0,0,1,1] and [0,0,1,0.6] is 0.6
        let a = det(0, 0.9, 0.0, 0.0, 1.0, 1.0);
        let b = det(0, 0.8, 0.0, 0.0, 1.0, 0.6);
        assert!((iou(&a.bx, &b.bx) - 0.6).abs() < 1e-12);
        let out = nms(vec![b.clone(), a.clone()], 0.5);
        assert_eq!(out, vec![a.clone()]);

        let other = Detection { class: 1, ..b.clone() };
        assert_eq!(nms(vec![a.clone(), other.clone()], 0.5).len(), 2);
        assert!(nms(Vec::new(), 0.5).is_empty());
    }

    #[test]
    fn ties_follow_class_then_insertion() {
        let x = det(1, 0.5, 0.0, 0.0, 0.5, 0.5);
        let y = det(0, 0.5, 0.0, 0.0, 0.5, 0.5);
        let z = det(0, 0.5, 0.0, 0.0, 0.5, 0.5);
        let out = nms(vec![x.clone(), y.clone(), z], 0.5);
        assert_eq!(out, vec![y, x]);
    }

    #[test]
    fn cap_keeps_best_per_class() {
        let dets = vec![
            det(0, 0.1, 0.0, 0.0, 0.1, 0.1),
            det(0, 0.7, 0.2, 0.2, 0.3, 0.3),
            det(1, 0.2, 0.0, 0.0, 0.1, 0.1),
            det(0, 0.4, 0.5, 0.5, 0.6, 0.6),
        ];
        let out = cap_per_class(dets, 2);
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.7, 0.4, 0.2]);
    }
}
