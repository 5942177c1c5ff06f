//! Anchor-to-ground-truth assignment and detection decoding.

use super::anchors::AnchorSet;
use super::boxes::{bev_iou, decode_box, encode_box, normalize_heading, Box3D, RegressionTarget};
use super::losses::sigmoid;
use super::nms::nms_bev;
use crate::backbone::HeadOutput;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    pub targets: Vec<Option<RegressionTarget>>,
    /// Heading direction label of the matched ground truth.
    pub dir_positive: Vec<Option<bool>>,
}

impl Assignment {
    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Negative).count()
    }
}

/// Labels each anchor by its best BEV IoU against the ground truths:
/// >= pos_threshold is positive, < neg_threshold is negative, the band in
/// between is ignored. With `force_best`, each ground truth additionally
/// claims its highest-IoU anchor as positive (never demoting one).
pub fn assign_targets(
    anchors: &AnchorSet,
    gt_boxes: &[Box3D],
    pos_threshold: f64,
    neg_threshold: f64,
    force_best: bool,
) -> Assignment {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    let mut targets = vec![None; n];
    let mut dir_positive = vec![None; n];
    if gt_boxes.is_empty() {
        return Assignment {
            labels,
            matched,
            targets,
            dir_positive,
        };
    }
    let mut best_anchor_per_gt: Vec<(usize, f64)> = vec![(0, -1.0); gt_boxes.len()];
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best_gt = 0;
        for (g, gt) in gt_boxes.iter().enumerate() {
            let iou = bev_iou(anchor, gt);
            if iou > best_iou {
                best_iou = iou;
                best_gt = g;
            }
            if iou > best_anchor_per_gt[g].1 {
                best_anchor_per_gt[g] = (i, iou);
            }
        }
        if best_iou >= pos_threshold {
            labels[i] = AnchorLabel::Positive;
            matched[i] = Some(best_gt);
        } else if best_iou >= neg_threshold {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    if force_best {
        for (g, &(i, iou)) in best_anchor_per_gt.iter().enumerate() {
            if iou <= 0.0 {
                continue;
            }
            if labels[i] != AnchorLabel::Positive {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(g);
            }
        }
    }
    for i in 0..n {
        if labels[i] == AnchorLabel::Positive {
            let g = matched[i].expect("positive anchor has a match");
            targets[i] = Some(encode_box(&gt_boxes[g], &anchors.boxes[i]));
            dir_positive[i] = Some(normalize_heading(gt_boxes[g].theta).1);
        }
    }
    Assignment {
        labels,
        matched,
        targets,
        dir_positive,
    }
}

/// Thresholds the sigmoid classification scores, decodes the regression
/// residuals against the anchors (direction from the heading head's
/// argmax), and applies BEV NMS.
pub fn decode_detections<T: Real>(
    head: &HeadOutput<T>,
    anchors: &AnchorSet,
    score_threshold: f64,
    nms_threshold: f64,
) -> Vec<(Box3D, f64)> {
    let (wc, lc) = anchors.grid;
    let per_cell = anchors.per_cell;
    let mut dets = Vec::new();
    for iy in 0..wc {
        for ix in 0..lc {
            for a in 0..per_cell {
                let score = sigmoid(head.cls[(a, iy, ix)]).to_f64().unwrap();
                if score < score_threshold {
                    continue;
                }
                let id = anchors.anchor_id(iy, ix, a);
                let mut r: RegressionTarget = [0.0; 7];
                for (c, rc) in r.iter_mut().enumerate() {
                    *rc = head.reg[(a * 7 + c, iy, ix)].to_f64().unwrap();
                }
                let dir_positive = head.dir[(2 * a + 1, iy, ix)] > head.dir[(2 * a, iy, ix)];
                dets.push((decode_box(&r, &anchors.boxes[id], dir_positive), score));
            }
        }
    }
    nms_bev(&dets, nms_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::anchors::AnchorConfig;
    use crate::detection::anchors::generate_anchors;

    fn small_anchor_set() -> AnchorSet {
        let cfg = AnchorConfig {
            x_range: (0.0, 8.0),
            y_range: (-4.0, 4.0),
            z_min: -3.0,
            z_center: None,
            grid: (4, 4),
            sizes: vec![[1.6, 3.9, 1.56]],
            rotations: vec![0.0, std::f64::consts::FRAC_PI_2],
        };
        generate_anchors(&cfg)
    }

    #[test]
    fn no_gts_all_negative() {
        let set = small_anchor_set();
        let a = assign_targets(&set, &[], 0.7, 0.5, true);
        assert_eq!(a.n_pos(), 0);
        assert_eq!(a.n_neg(), set.len());
    }

    #[test]
    fn exact_anchor_match_is_positive_with_zero_target() {
        let set = small_anchor_set();
        let gt = set.boxes[10];
        let a = assign_targets(&set, &[gt], 0.7, 0.5, false);
        assert_eq!(a.labels[10], AnchorLabel::Positive);
        let t = a.targets[10].unwrap();
        for v in t {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn mid_band_iou_is_ignored() {
        let set = small_anchor_set();
        // shift a copy of an anchor so IoU lands strictly between 0.5 and 0.7
        let base = set.boxes[10];
        let mut gt = base;
        gt.x += 0.45;
        let iou = bev_iou(&gt, &base);
        assert!(iou > 0.5 && iou < 0.7, "constructed IoU {iou}");
        let a = assign_targets(&set, &[gt], 0.7, 0.5, false);
        assert_eq!(a.labels[10], AnchorLabel::Ignore);
    }

    #[test]
    fn forced_positive_never_demotes() {
        let set = small_anchor_set();
        let gt = set.boxes[5];
        let a = assign_targets(&set, &[gt], 0.7, 0.5, true);
        assert!(a.n_pos() >= 1);
        assert_eq!(a.labels[5], AnchorLabel::Positive);
        // forced rule gives sparse scenes at least one positive
        let mut far = gt;
        far.x += 1.2;
        let b = assign_targets(&set, &[far], 0.7, 0.5, true);
        assert!(b.n_pos() >= 1);
    }

    #[test]
    fn counts_partition_anchor_set() {
        let set = small_anchor_set();
        let mut gt = set.boxes[3];
        gt.x += 0.3;
        let a = assign_targets(&set, &[gt], 0.7, 0.5, true);
        let n_ignore = a
            .labels
            .iter()
            .filter(|&&l| l == AnchorLabel::Ignore)
            .count();
        assert_eq!(a.n_pos() + a.n_neg() + n_ignore, set.len());
    }
}
