//! Training-time scene augmentation: object insertion from a cropped-box
//! database, independent per-box motion with collision rejection, then
//! global rotation and scaling. Points and boxes transform jointly; every
//! step draws from an explicit seeded random source.

use rand::Rng;

use crate::detection::boxes::{bev_intersection_area, wrap_angle, Box3D};
use crate::voxelizer::PointCloud;

#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt_boxes: Vec<Box3D>,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct GtEntry {
    pub gt: Box3D,
    /// Points that lie inside the box in its source scene.
    pub points: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Default)]
pub struct GtDatabase {
    pub entries: Vec<GtEntry>,
}

#[derive(Debug, Clone)]
pub struct AugConfig {
    /// Database entries offered for insertion per scene.
    pub n_insert: usize,
    /// Global rotation drawn from U[-rotate_limit, rotate_limit].
    pub rotate_limit: f64,
    pub scale_range: (f64, f64),
    /// Per-box rotation drawn from U[-motion_angle, motion_angle].
    pub motion_angle: f64,
    /// Std of the per-box Gaussian translation, per axis.
    pub translation_std: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            n_insert: 2,
            rotate_limit: std::f64::consts::FRAC_PI_4,
            scale_range: (0.95, 1.05),
            motion_angle: std::f64::consts::FRAC_PI_2,
            translation_std: 1.0,
        }
    }
}

fn rotate_xy(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

fn collides(b: &Box3D, others: &[Box3D], skip: Option<usize>) -> bool {
    others.iter().enumerate().any(|(i, o)| {
        Some(i) != skip && bev_intersection_area(b, o) > 0.0
    })
}

/// Rotates all points and boxes about the scene Z axis at the origin.
pub fn global_rotate(s: &Scene, theta: f64) -> Scene {
    let mut out = s.clone();
    for p in &mut out.cloud.points {
        let (x, y) = rotate_xy(p[0], p[1], theta);
        p[0] = x;
        p[1] = y;
    }
    for b in &mut out.gt_boxes {
        let (x, y) = rotate_xy(b.x, b.y, theta);
        b.x = x;
        b.y = y;
        b.theta = wrap_angle(b.theta + theta);
    }
    out
}

/// Scales point coordinates, box centers, and box dimensions uniformly.
pub fn global_scale(s: &Scene, factor: f64) -> Scene {
    let mut out = s.clone();
    for p in &mut out.cloud.points {
        for v in p.iter_mut().take(3) {
            *v *= factor;
        }
    }
    for b in &mut out.gt_boxes {
        b.x *= factor;
        b.y *= factor;
        b.z *= factor;
        b.l *= factor;
        b.w *= factor;
        b.h *= factor;
    }
    out
}

/// One candidate pose: the box rotated by `delta` about its own axis and
/// translated by `t`.
fn moved_box(b: &Box3D, delta: f64, t: [f64; 3]) -> Box3D {
    Box3D {
        x: b.x + t[0],
        y: b.y + t[1],
        z: b.z + t[2],
        theta: wrap_angle(b.theta + delta),
        ..*b
    }
}

/// Applies explicit per-box draws: box i gets rotation `draws[i].0` and
/// translation `draws[i].1`, moving its interior points rigidly. A move
/// whose BEV footprint would intersect any other box is rejected and the
/// box keeps its original pose.
pub fn per_box_motion_with(s: &Scene, draws: &[(f64, [f64; 3])]) -> Scene {
    assert_eq!(draws.len(), s.gt_boxes.len());
    let mut out = s.clone();
    for (i, (delta, t)) in draws.iter().enumerate() {
        let original = out.gt_boxes[i];
        let candidate = moved_box(&original, *delta, *t);
        if collides(&candidate, &out.gt_boxes, Some(i)) {
            continue;
        }
        for p in &mut out.cloud.points {
            if original.contains_point([p[0], p[1], p[2]], 1e-9) {
                let (rx, ry) = rotate_xy(p[0] - original.x, p[1] - original.y, *delta);
                p[0] = original.x + rx + t[0];
                p[1] = original.y + ry + t[1];
                p[2] += t[2];
            }
        }
        out.gt_boxes[i] = candidate;
    }
    out
}

/// Samples each box's rotation from U[-motion_angle, motion_angle] and its
/// translation from an axis-wise Gaussian, then applies the motion.
pub fn per_box_motion<R: Rng>(s: &Scene, cfg: &AugConfig, rng: &mut R) -> Scene {
    let normal = |rng: &mut R| {
        // Box-Muller keeps us to the uniform primitives of the seeded stream
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let draws: Vec<(f64, [f64; 3])> = (0..s.gt_boxes.len())
        .map(|_| {
            let delta = rng.gen_range(-cfg.motion_angle..=cfg.motion_angle);
            let t = [
                normal(rng) * cfg.translation_std,
                normal(rng) * cfg.translation_std,
                normal(rng) * cfg.translation_std,
            ];
            (delta, t)
        })
        .collect();
    per_box_motion_with(s, &draws)
}

fn bev_contains(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let dx = x - b.x;
    let dy = y - b.y;
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
}

/// Offers up to `n_insert` database entries (sampled without replacement)
/// to the scene. An entry is inserted only if its BEV footprint is disjoint
/// from every current box; insertion removes scene points under the new
/// footprint before appending the entry's own points.
pub fn gt_increment<R: Rng>(s: &Scene, db: &GtDatabase, n_insert: usize, rng: &mut R) -> Scene {
    let mut out = s.clone();
    if db.entries.is_empty() || n_insert == 0 {
        return out;
    }
    let n = n_insert.min(db.entries.len());
    let picks = rand::seq::index::sample(rng, db.entries.len(), n);
    for k in picks.iter() {
        let entry = &db.entries[k];
        if collides(&entry.gt, &out.gt_boxes, None) {
            continue;
        }
        out.cloud
            .points
            .retain(|p| !bev_contains(&entry.gt, p[0], p[1]));
        out.cloud.points.extend_from_slice(&entry.points);
        out.gt_boxes.push(entry.gt);
    }
    out
}

/// Crops every scene's points into per-box database entries.
pub fn build_gt_database(scenes: &[Scene]) -> GtDatabase {
    let mut entries = Vec::new();
    for s in scenes {
        for b in &s.gt_boxes {
            let points: Vec<[f64; 4]> = s
                .cloud
                .points
                .iter()
                .filter(|p| b.contains_point([p[0], p[1], p[2]], 1e-9))
                .copied()
                .collect();
            entries.push(GtEntry { gt: *b, points });
        }
    }
    GtDatabase { entries }
}

/// The full pipeline in order: insertion, per-box motion, global rotation,
/// global scaling.
pub fn augment_scene<R: Rng>(s: &Scene, db: &GtDatabase, cfg: &AugConfig, rng: &mut R) -> Scene {
    let s = gt_increment(s, db, cfg.n_insert, rng);
    let s = per_box_motion(&s, cfg, rng);
    let theta = rng.gen_range(-cfg.rotate_limit..=cfg.rotate_limit);
    let s = global_rotate(&s, theta);
    let factor = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    global_scale(&s, factor)
}
