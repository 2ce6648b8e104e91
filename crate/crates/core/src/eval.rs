//! Average-precision evaluation: greedy score-ordered matching at BEV IoU
//! thresholds, 40-point interpolated AP, and a crowded/normal breakdown
//! using the 2 m same-class neighbor rule.

use rayon::prelude::*;

use crate::fsd1::CROWDED_DISTANCE;
use crate::geom::{bev_iou, crowded_flags, Box3D};
use crate::head::DetectionBox;

pub const AP_RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Default)]
pub struct ClassEval {
    pub ap: f64,
    pub n_gt: usize,
    pub recall: f64,
}

/// AP over a subset of ground truth (crowded or normal). Predictions
/// matched to out-of-subset boxes are ignored rather than counted as false
/// positives.
#[derive(Debug, Clone, Default)]
pub struct SubsetEval {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub recall: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_class: Vec<ClassEval>,
    pub map: f64,
    pub crowded: SubsetEval,
    pub normal: SubsetEval,
}

/// 40-point interpolation: mean over recall targets i/40 of the best
/// precision achieved at recall >= the target.
fn interpolated_ap(pr: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 1..=AP_RECALL_POINTS {
        let target = i as f64 / AP_RECALL_POINTS as f64;
        let best = pr
            .iter()
            .filter(|(recall, _)| *recall >= target - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += best;
    }
    total / AP_RECALL_POINTS as f64
}

/// Outcome of the global greedy matching for one class: prediction order
/// and, for each prediction, the matched (scene, gt) if any.
struct ClassMatches {
    /// (scene, pred index) in descending score order
    order: Vec<(usize, usize)>,
    matched_gt: Vec<Option<usize>>, // per ordered prediction, gt index in its scene
}

fn match_class(
    predictions: &[Vec<DetectionBox<f64>>],
    ground_truth: &[Vec<Box3D<f64>>],
    class: usize,
    iou_threshold: f64,
) -> ClassMatches {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (si, preds) in predictions.iter().enumerate() {
        for (pi, d) in preds.iter().enumerate() {
            if d.bbox.class_id == class {
                order.push((si, pi));
            }
        }
    }
    order.sort_by(|a, b| {
        let sa = predictions[a.0][a.1].score;
        let sb = predictions[b.0][b.1].score;
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });

    // per-scene candidate IoUs, computed in parallel; matching itself is a
    // sequential walk so results never depend on thread timing
    let ious: Vec<Vec<Vec<f64>>> = predictions
        .par_iter()
        .zip(ground_truth.par_iter())
        .map(|(preds, gts)| {
            preds
                .iter()
                .map(|d| {
                    gts.iter()
                        .map(|gt| {
                            if gt.class_id == class && d.bbox.class_id == class {
                                bev_iou(&d.bbox, gt)
                            } else {
                                -1.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut matched_gt = Vec::with_capacity(order.len());
    for &(si, pi) in &order {
        let mut best: Option<(f64, usize)> = None;
        for (gi, &iou) in ious[si][pi].iter().enumerate() {
            if taken[si][gi] || iou < iou_threshold {
                continue;
            }
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[si][gi] = true;
                matched_gt.push(Some(gi));
            }
            None => matched_gt.push(None),
        }
    }
    ClassMatches { order, matched_gt }
}

/// PR curve and AP over the subset of ground truth selected by `keep`;
/// predictions matched outside the subset are skipped entirely.
fn subset_ap(
    m: &ClassMatches,
    ground_truth_keep: &[Vec<bool>],
    class: usize,
    ground_truth: &[Vec<Box3D<f64>>],
) -> (f64, usize, usize) {
    let n_gt = ground_truth
        .iter()
        .zip(ground_truth_keep)
        .flat_map(|(g, k)| g.iter().zip(k))
        .filter(|(b, k)| b.class_id == class && **k)
        .count();
    if n_gt == 0 {
        return (0.0, 0, 0);
    }
    let mut pr = Vec::new();
    let mut tp = 0usize;
    let mut considered = 0usize;
    for (&(si, _), matched) in m.order.iter().zip(&m.matched_gt) {
        match matched {
            Some(gi) if ground_truth_keep[si][*gi] => {
                tp += 1;
                considered += 1;
            }
            Some(_) => continue, // matched outside the subset: ignored
            None => considered += 1,
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / considered as f64));
    }
    (interpolated_ap(&pr), tp, n_gt)
}

/// Evaluates detections against ground truth. `iou_thresholds` has one BEV
/// IoU threshold per class; mAP averages over classes present in the ground
/// truth.
pub fn evaluate_ap(
    predictions: &[Vec<DetectionBox<f64>>],
    ground_truth: &[Vec<Box3D<f64>>],
    iou_thresholds: &[f64],
) -> EvalResult {
    assert_eq!(
        predictions.len(),
        ground_truth.len(),
        "prediction and ground-truth scene counts differ"
    );
    let n_classes = iou_thresholds.len();
    for preds in predictions {
        for d in preds {
            assert!(d.bbox.class_id < n_classes, "prediction class out of range");
        }
    }
    for gts in ground_truth {
        for b in gts {
            assert!(b.class_id < n_classes, "ground-truth class out of range");
        }
    }

    let crowded: Vec<Vec<bool>> = ground_truth
        .iter()
        .map(|g| crowded_flags(g, CROWDED_DISTANCE))
        .collect();
    let normal: Vec<Vec<bool>> = crowded
        .iter()
        .map(|flags| flags.iter().map(|c| !c).collect())
        .collect();

    let mut per_class = Vec::with_capacity(n_classes);
    let mut crowded_eval = SubsetEval::default();
    let mut normal_eval = SubsetEval::default();
    let mut crowded_tp = 0usize;
    let mut normal_tp = 0usize;
    for class in 0..n_classes {
        let m = match_class(predictions, ground_truth, class, iou_thresholds[class]);
        let full_keep: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![true; g.len()]).collect();
        let (ap, tp, n_gt) = subset_ap(&m, &full_keep, class, ground_truth);
        per_class.push(ClassEval {
            ap,
            n_gt,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
        let (cap, ctp, cgt) = subset_ap(&m, &crowded, class, ground_truth);
        crowded_eval.per_class_ap.push(cap);
        crowded_eval.n_gt += cgt;
        crowded_tp += ctp;
        let (nap, ntp, ngt) = subset_ap(&m, &normal, class, ground_truth);
        normal_eval.per_class_ap.push(nap);
        normal_eval.n_gt += ngt;
        normal_tp += ntp;
    }

    let present: Vec<&ClassEval> = per_class.iter().filter(|c| c.n_gt > 0).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|c| c.ap).sum::<f64>() / present.len() as f64
    };
    let subset_map = |aps: &[f64], gts_by_class: &dyn Fn(usize) -> usize| {
        let present: Vec<f64> = aps
            .iter()
            .enumerate()
            .filter(|(c, _)| gts_by_class(*c) > 0)
            .map(|(_, ap)| *ap)
            .collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let crowded_gt_of = |class: usize| {
        ground_truth
            .iter()
            .zip(&crowded)
            .flat_map(|(g, k)| g.iter().zip(k))
            .filter(|(b, k)| b.class_id == class && **k)
            .count()
    };
    let normal_gt_of = |class: usize| {
        ground_truth
            .iter()
            .zip(&normal)
            .flat_map(|(g, k)| g.iter().zip(k))
            .filter(|(b, k)| b.class_id == class && **k)
            .count()
    };
    crowded_eval.map = subset_map(&crowded_eval.per_class_ap, &crowded_gt_of);
    normal_eval.map = subset_map(&normal_eval.per_class_ap, &normal_gt_of);
    crowded_eval.recall = if crowded_eval.n_gt == 0 {
        0.0
    } else {
        crowded_tp as f64 / crowded_eval.n_gt as f64
    };
    normal_eval.recall = if normal_eval.n_gt == 0 {
        0.0
    } else {
        normal_tp as f64 / normal_eval.n_gt as f64
    };

    EvalResult {
        per_class,
        map,
        crowded: crowded_eval,
        normal: normal_eval,
    }
}
