//! Greedy non-maximum suppression on rotated BEV boxes.

use super::boxes::{bev_iou, Box3D};

/// Keeps detections in descending score order, dropping any whose rotated
/// BEV IoU with an already-kept box exceeds the threshold. Ties break by
/// original order so runs are reproducible.
pub fn nms_bev(dets: &[(Box3D, f64)], iou_threshold: f64) -> Vec<(Box3D, f64)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1
            .partial_cmp(&dets[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<(Box3D, f64)> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|(k, _)| bev_iou(&dets[i].0, k) <= iou_threshold)
        {
            kept.push(dets[i]);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_detection_kept() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.5, 0.0);
        let kept = nms_bev(&[(b, 0.9)], 0.1);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn duplicate_boxes_keep_higher_score() {
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.5, 0.0);
        let kept = nms_bev(&[(b, 0.4), (b, 0.8)], 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].1, 0.8);
    }

    #[test]
    fn matches_brute_force_reference() {
        // constructed trio: a and b overlap heavily, c is far away
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 1.0, 1.5, 0.0);
        let b = Box3D::new(0.2, 0.0, 0.0, 2.0, 1.0, 1.5, 0.1);
        let c = Box3D::new(10.0, 0.0, 0.0, 2.0, 1.0, 1.5, 0.0);
        let dets = [(a, 0.7), (b, 0.9), (c, 0.5)];
        // reference: exhaustive greedy
        let mut ref_kept: Vec<(Box3D, f64)> = Vec::new();
        let mut remaining: Vec<(Box3D, f64)> = dets.to_vec();
        while !remaining.is_empty() {
            let best = remaining
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let chosen = remaining.remove(best);
            remaining.retain(|(bx, _)| bev_iou(bx, &chosen.0) <= 0.1);
            ref_kept.push(chosen);
        }
        let kept = nms_bev(&dets, 0.1);
        assert_eq!(kept.len(), ref_kept.len());
        for (k, r) in kept.iter().zip(ref_kept.iter()) {
            assert_eq!(k.1, r.1);
        }
    }
}
