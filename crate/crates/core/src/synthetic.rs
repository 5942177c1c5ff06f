//! Seeded synthetic scenes: boxes placed in-range without BEV overlap,
//! points sampled on box surfaces plus uniform ground clutter. The
//! desk-scale stand-in for real drive data in tests and toy training.

use rand::Rng;

use crate::augmentation::Scene;
use crate::detection::boxes::{bev_intersection_area, Box3D};
use crate::voxelizer::PointCloud;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub n_boxes: usize,
    pub points_per_box: usize,
    pub n_clutter: usize,
    pub l_range: (f64, f64),
    pub w_range: (f64, f64),
    pub h_range: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            x_range: (0.0, 12.6),
            y_range: (-6.3, 6.3),
            z_range: (-3.25, 1.25),
            n_boxes: 3,
            points_per_box: 120,
            n_clutter: 200,
            l_range: (2.8, 4.2),
            w_range: (1.4, 1.8),
            h_range: (1.3, 1.7),
        }
    }
}

fn sample_box<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Box3D {
    let l = rng.gen_range(cfg.l_range.0..cfg.l_range.1);
    let w = rng.gen_range(cfg.w_range.0..cfg.w_range.1);
    let h = rng.gen_range(cfg.h_range.0..cfg.h_range.1);
    // keep the whole footprint inside the range regardless of heading
    let margin = (l * l + w * w).sqrt() / 2.0;
    let x = rng.gen_range(cfg.x_range.0 + margin..cfg.x_range.1 - margin);
    let y = rng.gen_range(cfg.y_range.0 + margin..cfg.y_range.1 - margin);
    let z = cfg.z_range.0 + h / 2.0 + 0.05;
    let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3D::new(x, y, z, l, w, h, theta)
}

/// Uniform point on the box's side and top faces, slightly inset so
/// membership holds strictly after exact rigid transforms.
fn surface_point<R: Rng>(b: &Box3D, rng: &mut R) -> [f64; 4] {
    const INSET: f64 = 0.995;
    let hl = b.l / 2.0 * INSET;
    let hw = b.w / 2.0 * INSET;
    let hh = b.h / 2.0 * INSET;
    // weights: two l x h sides, two w x h sides, one l x w top
    let areas = [b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h, b.l * b.w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let (lx, ly, lz) = match face {
        0 => (rng.gen_range(-hl..hl), hw, rng.gen_range(-hh..hh)),
        1 => (rng.gen_range(-hl..hl), -hw, rng.gen_range(-hh..hh)),
        2 => (hl, rng.gen_range(-hw..hw), rng.gen_range(-hh..hh)),
        3 => (-hl, rng.gen_range(-hw..hw), rng.gen_range(-hh..hh)),
        _ => (rng.gen_range(-hl..hl), rng.gen_range(-hw..hw), hh),
    };
    let (s, c) = b.theta.sin_cos();
    [
        b.x + c * lx - s * ly,
        b.y + s * lx + c * ly,
        b.z + lz,
        rng.gen_range(0.0..1.0),
    ]
}

/// Generates one scene: disjoint boxes, surface points, and clutter that
/// avoids every box footprint.
pub fn generate_scene<R: Rng>(cfg: &SyntheticConfig, id: &str, rng: &mut R) -> Scene {
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < cfg.n_boxes && attempts < 1000 {
        attempts += 1;
        let b = sample_box(cfg, rng);
        if boxes.iter().all(|o| bev_intersection_area(&b, o) == 0.0) {
            boxes.push(b);
        }
    }
    let mut points = Vec::new();
    for b in &boxes {
        for _ in 0..cfg.points_per_box {
            points.push(surface_point(b, rng));
        }
    }
    let mut placed = 0;
    while placed < cfg.n_clutter {
        let p = [
            rng.gen_range(cfg.x_range.0..cfg.x_range.1),
            rng.gen_range(cfg.y_range.0..cfg.y_range.1),
            rng.gen_range(cfg.z_range.0..cfg.z_range.0 + 0.3),
            rng.gen_range(0.0..1.0),
        ];
        if boxes
            .iter()
            .all(|b| !b.contains_point([p[0], p[1], p[2]], 0.05))
        {
            points.push(p);
            placed += 1;
        }
    }
    Scene {
        cloud: PointCloud::new(points),
        gt_boxes: boxes,
        id: id.to_string(),
    }
}
