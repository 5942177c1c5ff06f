//! End-to-end training: network weight flattening, Adam, the per-scene loss
//! and gradient step, and a small-scene training loop.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augmentation::Scene;
use crate::backbone::{
    fusion_backward, fusion_forward_traced, pyramid_forward, pyramid_backward,
    pyramid_forward_traced, pyramid_shapes, AlignWeights, BackboneWeights, FusionWeights,
    HeadOutput,
};
use crate::config::{lr_at, RunConfig};
use crate::detection::anchors::{generate_anchors, AnchorSet};
use crate::detection::assign::{assign_targets, decode_detections, AnchorLabel, Assignment};
use crate::detection::boxes::Box3D;
use crate::detection::losses::{
    dir_loss_logits, focal_cls_loss_logits, reg_loss_grad, total_loss,
};
use crate::scalar::Real;
use crate::sparse_tensor::SparseTensor3;
use crate::voxelizer::{voxelize_bv, PointCloud};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("forward pass failed: {0}")]
    Forward(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("no scenes provided")]
    NoScenes,
}

/// All learnable parameters of the detector.
#[derive(Debug, Clone)]
pub struct NetWeights<T: Real> {
    pub backbone: BackboneWeights<T>,
    pub fusion: FusionWeights<T>,
}

impl<T: Real> NetWeights<T> {
    pub fn random(cfg: &RunConfig, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let trunk_grid = cfg.trunk_grid();
        let shapes = pyramid_shapes(trunk_grid, cfg.backbone.n_levels());
        NetWeights {
            backbone: BackboneWeights::random(&cfg.backbone, trunk_grid, scale, rng),
            fusion: FusionWeights::random(&cfg.backbone, &shapes, scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetWeights {
            backbone: self.backbone.zeros_like(),
            fusion: self.fusion.zeros_like(),
        }
    }

    /// Flattens every parameter in a fixed traversal order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit(&mut |v: &mut T| out.push(v.to_f64().unwrap()));
        out
    }

    /// Inverse of [`Self::to_flat`]; `flat` must have exactly `n_params` values.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        self.visit(&mut |v: &mut T| {
            *v = T::from_f64_lossy(*it.next().expect("flat vector too short"))
        });
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.clone().visit(&mut |_: &mut T| n += 1);
        n
    }

    fn visit<F: FnMut(&mut T)>(&mut self, f: &mut F) {
        let conv = |w: &mut crate::sparse_ops::ConvWeights<T>, f: &mut F| {
            w.w.iter_mut().for_each(|v| f(v));
            w.b.iter_mut().for_each(|v| f(v));
        };
        let conv2d = |w: &mut crate::dense2d::Conv2dWeights<T>, f: &mut F| {
            w.w.iter_mut().for_each(|v| f(v));
            w.b.iter_mut().for_each(|v| f(v));
        };
        for level in &mut self.backbone.levels {
            conv(&mut level.transition, f);
            for block in &mut level.blocks {
                conv(&mut block.conv1, f);
                conv(&mut block.conv2, f);
            }
        }
        for td in &mut self.backbone.topdown {
            conv(&mut td.up, f);
            conv(&mut td.fuse, f);
        }
        for c in &mut self.backbone.compress {
            conv(c, f);
        }
        for a in &mut self.fusion.align {
            match a {
                AlignWeights::Identity => {}
                AlignWeights::Down { w, .. } | AlignWeights::Up { w, .. } => conv2d(w, f),
            }
        }
        for t in &mut self.fusion.trunk {
            conv2d(t, f);
        }
        conv2d(&mut self.fusion.cls, f);
        conv2d(&mut self.fusion.reg, f);
        conv2d(&mut self.fusion.dir, f);
    }
}

/// Adam optimizer state over a flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn anchor_cell(anchors: &AnchorSet, a: usize) -> (usize, usize, usize) {
    let per = anchors.per_cell;
    let cell = a / per;
    let lc = anchors.grid.1;
    (a % per, cell / lc, cell % lc)
}

/// Loss of one scene plus analytic gradients for every network parameter.
pub fn scene_loss_and_grads<T: Real>(
    cfg: &RunConfig,
    anchors: &AnchorSet,
    assignment: &Assignment,
    input: &SparseTensor3<T>,
    w: &NetWeights<T>,
) -> Result<(f64, NetWeights<T>), TrainError> {
    let (maps, ptrace) = pyramid_forward_traced(input, &cfg.backbone, &w.backbone)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let (head, ftrace) = fusion_forward_traced(&maps, &w.fusion)
        .map_err(|e| TrainError::Forward(e.to_string()))?;

    // Gather logits and regression predictions per anchor role.
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    let mut pos_logits = Vec::new();
    let mut neg_logits = Vec::new();
    let mut reg_preds: Vec<[T; 7]> = Vec::new();
    let mut reg_targets: Vec<[T; 7]> = Vec::new();
    let mut dir_logits: Vec<[T; 2]> = Vec::new();
    let mut dir_labels: Vec<bool> = Vec::new();
    for a in 0..anchors.len() {
        let (slot, iy, ix) = anchor_cell(anchors, a);
        match assignment.labels[a] {
            AnchorLabel::Positive => {
                pos_idx.push(a);
                pos_logits.push(head.cls[[slot, iy, ix]]);
                let mut pred = [T::zero(); 7];
                let mut tgt = [T::zero(); 7];
                let target = assignment.targets[a].expect("positive without target");
                for k in 0..7 {
                    pred[k] = head.reg[[7 * slot + k, iy, ix]];
                    tgt[k] = T::from_f64_lossy(target[k]);
                }
                reg_preds.push(pred);
                reg_targets.push(tgt);
                dir_logits.push([head.dir[[2 * slot, iy, ix]], head.dir[[2 * slot + 1, iy, ix]]]);
                dir_labels.push(assignment.dir_positive[a].expect("positive without heading"));
            }
            AnchorLabel::Negative => {
                neg_idx.push(a);
                neg_logits.push(head.cls[[slot, iy, ix]]);
            }
            AnchorLabel::Ignore => {}
        }
    }

    let (cls_loss, g_pos, g_neg) = focal_cls_loss_logits(&pos_logits, &neg_logits, &cfg.loss);
    let (reg_loss, g_reg_rows) = reg_loss_grad(&reg_targets, &reg_preds);
    let (dir_loss, g_dir_rows) = dir_loss_logits(&dir_logits, &dir_labels);
    let loss = total_loss(cls_loss, reg_loss, dir_loss, &cfg.loss);

    // Scatter weighted per-anchor gradients back onto the head maps.
    let kappa = T::from_f64_lossy(cfg.loss.kappa);
    let lambda = T::from_f64_lossy(cfg.loss.lambda);
    let mu = T::from_f64_lossy(cfg.loss.mu);
    let mut g_cls: Array3<T> = Array3::zeros(head.cls.dim());
    let mut g_reg: Array3<T> = Array3::zeros(head.reg.dim());
    let mut g_dir: Array3<T> = Array3::zeros(head.dir.dim());
    for (p, &a) in pos_idx.iter().enumerate() {
        let (slot, iy, ix) = anchor_cell(anchors, a);
        g_cls[[slot, iy, ix]] += kappa * g_pos[p];
        for k in 0..7 {
            g_reg[[7 * slot + k, iy, ix]] += lambda * g_reg_rows[p][k];
        }
        g_dir[[2 * slot, iy, ix]] += mu * g_dir_rows[p][0];
        g_dir[[2 * slot + 1, iy, ix]] += mu * g_dir_rows[p][1];
    }
    for (q, &a) in neg_idx.iter().enumerate() {
        let (slot, iy, ix) = anchor_cell(anchors, a);
        g_cls[[slot, iy, ix]] += kappa * g_neg[q];
    }

    let (f_grads, map_grads) = fusion_backward(&maps, &w.fusion, &ftrace, &g_cls, &g_reg, &g_dir);
    let (b_grads, _input_grad) = pyramid_backward(&cfg.backbone, &w.backbone, &ptrace, &map_grads);
    Ok((
        loss.to_f64().unwrap(),
        NetWeights {
            backbone: b_grads,
            fusion: f_grads,
        },
    ))
}

/// Runs the network on one point cloud and decodes thresholded detections.
pub fn infer_scene<T: Real>(
    cfg: &RunConfig,
    w: &NetWeights<T>,
    cloud: &PointCloud,
) -> Result<Vec<(Box3D, f64)>, TrainError> {
    let head = forward_cloud(cfg, w, cloud)?;
    let anchors = generate_anchors(&cfg.anchor_config());
    Ok(decode_detections(&head, &anchors, cfg.score_threshold, cfg.nms_iou))
}

/// Voxelizes a cloud and runs the full forward pass to head maps.
pub fn forward_cloud<T: Real>(
    cfg: &RunConfig,
    w: &NetWeights<T>,
    cloud: &PointCloud,
) -> Result<HeadOutput<T>, TrainError> {
    let input: SparseTensor3<T> = voxelize_bv(cloud, &cfg.voxel, cfg.input_grid())
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let maps = pyramid_forward(&input, &cfg.backbone, &w.backbone)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    let (head, _) = fusion_forward_traced(&maps, &w.fusion)
        .map_err(|e| TrainError::Forward(e.to_string()))?;
    Ok(head)
}

pub struct TrainResult {
    pub weights: NetWeights<f64>,
    pub losses: Vec<f64>,
}

/// Trains from random initialization on the given scenes, cycling through
/// them round-robin for `cfg.train.steps` Adam steps.
pub fn train_scenes(cfg: &RunConfig, scenes: &[Scene]) -> Result<TrainResult, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors = generate_anchors(&cfg.anchor_config());
    let grid = cfg.input_grid();
    let mut inputs = Vec::with_capacity(scenes.len());
    let mut assignments = Vec::with_capacity(scenes.len());
    for s in scenes {
        let t: SparseTensor3<f64> = voxelize_bv(&s.cloud, &cfg.voxel, grid)
            .map_err(|e| TrainError::Forward(e.to_string()))?;
        inputs.push(t);
        assignments.push(assign_targets(
            &anchors,
            &s.gt_boxes,
            cfg.assign_pos_iou,
            cfg.assign_neg_iou,
            cfg.assign_force_best,
        ));
    }

    let mut weights: NetWeights<f64> = NetWeights::random(cfg, 0.05, &mut rng);
    // Start every anchor score near zero (prior ~0.018) so sparsely trained
    // anchors stay below the detection threshold instead of sitting at 0.5.
    weights.fusion.cls.b.fill(-4.0);
    let mut params = weights.to_flat();
    let mut adam = Adam::new(params.len());
    let mut losses = Vec::with_capacity(cfg.train.steps as usize);
    for step in 0..cfg.train.steps {
        let i = (step as usize) % scenes.len();
        let (loss, grads) =
            scene_loss_and_grads(cfg, &anchors, &assignments[i], &inputs[i], &weights)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        losses.push(loss);
        let flat_grads = grads.to_flat();
        adam.step(&mut params, &flat_grads, lr_at(&cfg.train, step));
        weights.assign_from_flat(&params);
    }
    Ok(TrainResult { weights, losses })
}
