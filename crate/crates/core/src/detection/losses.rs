//! Classification, box regression and heading losses, with analytic
//! gradients w.r.t. logits/regression outputs for the training loop.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight on the classification term.
    pub kappa: f64,
    /// Weight on the regression term.
    pub lambda: f64,
    /// Weight on the heading term.
    pub mu: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kappa: 1.0,
            lambda: 2.0,
            mu: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

const PROB_EPS: f64 = 1e-7;

fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::from_f64_lossy(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

/// Alpha-balanced focal classification loss on probabilities:
/// positive and negative anchors are normalized separately. An empty group
/// contributes zero.
pub fn focal_cls_loss<T: Real>(pos_probs: &[T], neg_probs: &[T], cfg: &LossConfig) -> T {
    let alpha = T::from_f64_lossy(cfg.focal_alpha);
    let gamma = T::from_f64_lossy(cfg.focal_gamma);
    let mut loss = T::zero();
    if !pos_probs.is_empty() {
        let n = T::from_f64_lossy(pos_probs.len() as f64);
        let mut acc = T::zero();
        for &p in pos_probs {
            let p = clamp_prob(p);
            acc += alpha * (T::one() - p).powf(gamma) * p.ln();
        }
        loss -= acc / n;
    }
    if !neg_probs.is_empty() {
        let n = T::from_f64_lossy(neg_probs.len() as f64);
        let mut acc = T::zero();
        for &p in neg_probs {
            let p = clamp_prob(p);
            acc += (T::one() - alpha) * p.powf(gamma) * (T::one() - p).ln();
        }
        loss -= acc / n;
    }
    loss
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Focal loss on logits, returning gradients w.r.t. each logit.
pub fn focal_cls_loss_logits<T: Real>(
    pos_logits: &[T],
    neg_logits: &[T],
    cfg: &LossConfig,
) -> (T, Vec<T>, Vec<T>) {
    let alpha = T::from_f64_lossy(cfg.focal_alpha);
    let gamma = T::from_f64_lossy(cfg.focal_gamma);
    let one = T::one();
    let mut loss = T::zero();
    let mut gpos = vec![T::zero(); pos_logits.len()];
    let mut gneg = vec![T::zero(); neg_logits.len()];
    if !pos_logits.is_empty() {
        let n = T::from_f64_lossy(pos_logits.len() as f64);
        for (i, &x) in pos_logits.iter().enumerate() {
            let p = clamp_prob(sigmoid(x));
            let q = one - p;
            loss -= alpha * q.powf(gamma) * p.ln() / n;
            // d/dx of -alpha (1-p)^g ln p, with dp/dx = p(1-p)
            let dldp = alpha * gamma * q.powf(gamma - one) * p.ln() - alpha * q.powf(gamma) / p;
            gpos[i] = dldp * p * q / n;
        }
    }
    if !neg_logits.is_empty() {
        let n = T::from_f64_lossy(neg_logits.len() as f64);
        for (j, &x) in neg_logits.iter().enumerate() {
            let p = clamp_prob(sigmoid(x));
            let q = one - p;
            loss -= (one - alpha) * p.powf(gamma) * q.ln() / n;
            let dldp =
                -(one - alpha) * gamma * p.powf(gamma - one) * q.ln() + (one - alpha) * p.powf(gamma) / q;
            gneg[j] = dldp * p * q / n;
        }
    }
    (loss, gpos, gneg)
}

fn smooth_l1<T: Real>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::from_f64_lossy(0.5) * x * x
    } else {
        ax - T::from_f64_lossy(0.5)
    }
}

fn smooth_l1_grad<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else if x > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Smooth-L1 regression loss over the positives' 7-component residuals,
/// normalized by the positive count.
pub fn reg_loss<T: Real>(targets: &[[T; 7]], predictions: &[[T; 7]]) -> T {
    assert_eq!(targets.len(), predictions.len());
    if targets.is_empty() {
        return T::zero();
    }
    let n = T::from_f64_lossy(targets.len() as f64);
    let mut acc = T::zero();
    for (t, p) in targets.iter().zip(predictions.iter()) {
        for c in 0..7 {
            acc += smooth_l1(p[c] - t[c]);
        }
    }
    acc / n
}

/// Regression loss plus gradients w.r.t. the predictions.
pub fn reg_loss_grad<T: Real>(targets: &[[T; 7]], predictions: &[[T; 7]]) -> (T, Vec<[T; 7]>) {
    let loss = reg_loss(targets, predictions);
    if targets.is_empty() {
        return (loss, Vec::new());
    }
    let n = T::from_f64_lossy(targets.len() as f64);
    let grads = targets
        .iter()
        .zip(predictions.iter())
        .map(|(t, p)| {
            let mut g = [T::zero(); 7];
            for c in 0..7 {
                g[c] = smooth_l1_grad(p[c] - t[c]) / n;
            }
            g
        })
        .collect();
    (loss, grads)
}

/// Heading loss on probabilities: positives contribute -log p, negatives
/// -log(1 - p), averaged over the positive-anchor count.
pub fn dir_loss<T: Real>(pos_probs: &[T], neg_probs: &[T], n_pos: usize) -> T {
    if n_pos == 0 {
        return T::zero();
    }
    let n = T::from_f64_lossy(n_pos as f64);
    let mut acc = T::zero();
    for &p in pos_probs {
        acc += clamp_prob(p).ln();
    }
    for &p in neg_probs {
        acc += (T::one() - clamp_prob(p)).ln();
    }
    -acc / n
}

/// Two-way softmax heading loss on logit pairs (negative, positive), with
/// gradients. `labels[i]` is true when the box heading is positive.
pub fn dir_loss_logits<T: Real>(logits: &[[T; 2]], labels: &[bool]) -> (T, Vec<[T; 2]>) {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return (T::zero(), Vec::new());
    }
    let n = T::from_f64_lossy(logits.len() as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (pair, &label) in logits.iter().zip(labels.iter()) {
        let m = pair[0].max(pair[1]);
        let e0 = (pair[0] - m).exp();
        let e1 = (pair[1] - m).exp();
        let z = e0 + e1;
        let p = [e0 / z, e1 / z];
        let y = usize::from(label);
        loss -= clamp_prob(p[y]).ln() / n;
        let mut g = [p[0] / n, p[1] / n];
        g[y] -= T::one() / n;
        grads.push(g);
    }
    (loss, grads)
}

/// Weighted total: kappa*cls + lambda*reg + mu*ori.
pub fn total_loss<T: Real>(cls: T, reg: T, ori: T, cfg: &LossConfig) -> T {
    T::from_f64_lossy(cfg.kappa) * cls
        + T::from_f64_lossy(cfg.lambda) * reg
        + T::from_f64_lossy(cfg.mu) * ori
}
