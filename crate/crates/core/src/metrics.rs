//! Detection metrics: average precision with greedy BEV-IoU matching,
//! mean AP over classes and mean translation error of matches.

use crate::geometry::{bev_iou, Box3D};
use crate::head::Detection;

/// Matching threshold used throughout.
pub const DEFAULT_IOU: f64 = 0.5;

/// Outcome of ranking one class's detections against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    /// `true` per detection in rank order.
    pub hits: Vec<bool>,
    pub gt_count: usize,
    /// BEV center distance of each true positive.
    pub translation_errors: Vec<f64>,
}

/// Area under the all-point interpolated precision–recall curve; `None`
/// without ground truth.
pub fn ap_from_hits(hits: &[bool], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // running max from the right gives the interpolated precision
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Greedy matching over several scenes: detections are visited by
/// descending score (ties by scene, then index) and each takes the unmatched
/// ground-truth box of its scene with the highest IoU, if that reaches `iou`.
pub fn match_class(scenes: &[(&[(f64, Box3D)], &[Box3D])], iou: f64) -> ClassMatch {
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (dets, _))| (0..dets.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|&(sa, ia), &(sb, ib)| {
        scenes[sb].0[ib]
            .0
            .total_cmp(&scenes[sa].0[ia].0)
            .then(sa.cmp(&sb))
            .then(ia.cmp(&ib))
    });
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    let mut translation_errors = Vec::new();
    for (s, i) in order {
        let det = &scenes[s].0[i].1;
        let gt = scenes[s].1;
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[s][g] {
                continue;
            }
            let v = bev_iou(det, b).unwrap_or(0.0);
            if v >= iou && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[s][g] = true;
                translation_errors.push(det.bev_distance(&gt[g]));
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    ClassMatch {
        hits,
        gt_count: scenes.iter().map(|(_, gt)| gt.len()).sum(),
        translation_errors,
    }
}

/// AP of scored boxes against ground truth in a single scene.
pub fn average_precision(detections: &[(f64, Box3D)], gt: &[Box3D], iou: f64) -> Option<f64> {
    let m = match_class(&[(detections, gt)], iou);
    ap_from_hits(&m.hits, m.gt_count)
}

/// Dataset-level summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// AP per class; `None` for classes without ground truth.
    pub class_ap: Vec<Option<f64>>,
    /// Mean over classes that have ground truth (0 if none do).
    pub map: f64,
    /// Mean BEV center distance of true positives; NaN without matches.
    pub mate: f64,
}

/// Scores per-scene detections against per-scene ground truth.
pub fn evaluate(scenes: &[(Vec<Detection>, Vec<Box3D>)], classes: usize, iou: f64) -> EvalReport {
    let mut class_ap = Vec::with_capacity(classes);
    let mut errors = Vec::new();
    for k in 0..classes {
        let per_scene: Vec<(Vec<(f64, Box3D)>, Vec<Box3D>)> = scenes
            .iter()
            .map(|(dets, gt)| {
                (
                    dets.iter()
                        .filter(|d| d.class_id == k)
                        .map(|d| (d.score, d.bbox.clone()))
                        .collect(),
                    gt.iter().filter(|b| b.class_id == k).cloned().collect(),
                )
            })
            .collect();
        let refs: Vec<(&[(f64, Box3D)], &[Box3D])> =
            per_scene.iter().map(|(d, g)| (d.as_slice(), g.as_slice())).collect();
        let m = match_class(&refs, iou);
        errors.extend_from_slice(&m.translation_errors);
        class_ap.push(ap_from_hits(&m.hits, m.gt_count));
    }
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let mate = if errors.is_empty() {
        f64::NAN
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    EvalReport { class_ap, map, mate }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, class_id: usize) -> Box3D {
        Box3D {
            center: [x, 0.0, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class_id,
            velocity: [0.0, 0.0],
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![unit(0.0, 0), unit(5.0, 0)];
        let dets = vec![(0.9, unit(0.0, 0)), (0.8, unit(5.0, 0))];
        assert_eq!(average_precision(&dets, &gt, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &gt, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &[], 0.5), None);
    }

    #[test]
    fn three_detections_two_gt_by_hand() {
        // ranks: hit, miss, hit -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        let gt = vec![unit(0.0, 0), unit(5.0, 0)];
        let dets = vec![(0.9, unit(0.0, 0)), (0.8, unit(20.0, 0)), (0.7, unit(5.0, 0))];
        let ap = average_precision(&dets, &gt, 0.5).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gt = vec![unit(0.0, 0)];
        let dets = vec![(0.9, unit(0.0, 0)), (0.8, unit(0.1, 0))];
        let m = match_class(&[(&dets, &gt)], 0.5);
        assert_eq!(m.hits, vec![true, false]);
    }

    #[test]
    fn map_skips_absent_classes_and_reports_translation() {
        let scenes = vec![(
            vec![Detection {
                bbox: unit(0.2, 0),
                class_id: 0,
                score: 0.9,
            }],
            vec![unit(0.0, 0)],
        )];
        let r = evaluate(&scenes, 2, 0.5);
        assert_eq!(r.class_ap, vec![Some(1.0), None]);
        assert_eq!(r.map, 1.0);
        assert!((r.mate - 0.2).abs() < 1e-12);
    }
}
