//! Anchor grid generation over the BEV plane.

use std::f64::consts::FRAC_PI_2;

use super::boxes::Box3D;

#[derive(Debug, Clone)]
pub struct AnchorConfig {
    /// World extent along X (the BEV "l" grid axis), meters.
    pub x_range: (f64, f64),
    /// World extent along Y (the BEV "w" grid axis), meters.
    pub y_range: (f64, f64),
    /// Z floor; anchor centers sit at z_min + h/2 unless overridden.
    pub z_min: f64,
    pub z_center: Option<f64>,
    /// BEV cells (w_cells along Y, l_cells along X).
    pub grid: (usize, usize),
    /// Anchor sizes (l, w, h) in meters.
    pub sizes: Vec<[f64; 3]>,
    pub rotations: Vec<f64>,
}

impl AnchorConfig {
    /// Clustered two-size car anchor set on the given grid.
    pub fn car_default(grid: (usize, usize)) -> Self {
        AnchorConfig {
            x_range: (0.0, 70.2),
            y_range: (-39.9, 39.9),
            z_min: -3.25,
            z_center: None,
            grid,
            sizes: vec![[1.581, 3.513, 1.511], [1.653, 4.234, 1.546]],
            rotations: vec![0.0, FRAC_PI_2],
        }
    }

    /// Anchors per BEV cell.
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.rotations.len()
    }
}

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<Box3D>,
    pub grid: (usize, usize),
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat anchor id for (w-cell, l-cell, per-cell slot); the same order
    /// the head maps are flattened in.
    pub fn anchor_id(&self, iy: usize, ix: usize, slot: usize) -> usize {
        (iy * self.grid.1 + ix) * self.per_cell + slot
    }
}

/// Places one anchor per (cell, size, rotation) at the cell's world center.
pub fn generate_anchors(cfg: &AnchorConfig) -> AnchorSet {
    let (wc, lc) = cfg.grid;
    let step_y = (cfg.y_range.1 - cfg.y_range.0) / wc as f64;
    let step_x = (cfg.x_range.1 - cfg.x_range.0) / lc as f64;
    let per_cell = cfg.per_cell();
    let mut boxes = Vec::with_capacity(wc * lc * per_cell);
    for iy in 0..wc {
        for ix in 0..lc {
            let cy = cfg.y_range.0 + (iy as f64 + 0.5) * step_y;
            let cx = cfg.x_range.0 + (ix as f64 + 0.5) * step_x;
            for size in &cfg.sizes {
                for &rot in &cfg.rotations {
                    let z = cfg.z_center.unwrap_or(cfg.z_min + size[2] / 2.0);
                    boxes.push(Box3D::new(cx, cy, z, size[0], size[1], size[2], rot));
                }
            }
        }
    }
    AnchorSet {
        boxes,
        grid: cfg.grid,
        per_cell,
    }
}
