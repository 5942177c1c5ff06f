//! Detection evaluation: greedy score-ordered matching and 11-point
//! interpolated average precision.

use crate::detection::boxes::Box3D;

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Precision after each detection, in descending-score order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub n_dets: usize,
    pub n_gts: usize,
}

/// Score-sorted greedy matching (each ground truth matched at most once),
/// then precision interpolated at `n_recall_points` evenly spaced recall
/// levels and averaged.
pub fn average_precision<F>(
    dets: &[(Box3D, f64)],
    gts: &[Box3D],
    iou_fn: F,
    iou_threshold: f64,
    n_recall_points: usize,
) -> EvalReport
where
    F: Fn(&Box3D, &Box3D) -> f64,
{
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, &di) in order.iter().enumerate() {
        let mut best = None;
        let mut best_iou = iou_threshold;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = iou_fn(&dets[di].0, gt);
            if iou >= best_iou {
                best_iou = iou;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            matched[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(if gts.is_empty() {
            0.0
        } else {
            tp as f64 / gts.len() as f64
        });
    }
    let ap = if gts.is_empty() || dets.is_empty() {
        0.0
    } else {
        let mut acc = 0.0;
        for k in 0..n_recall_points {
            let r = k as f64 / (n_recall_points - 1) as f64;
            let p_max = precision
                .iter()
                .zip(&recall)
                .filter(|(_, &rec)| rec >= r - 1e-12)
                .map(|(&p, _)| p)
                .fold(0.0, f64::max);
            acc += p_max;
        }
        acc / n_recall_points as f64
    };
    EvalReport {
        precision,
        recall,
        ap,
        n_dets: dets.len(),
        n_gts: gts.len(),
    }
}
