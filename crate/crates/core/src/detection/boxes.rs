//! Oriented 3D boxes: BEV polygon IoU, heading normalization, and the
//! 7-component residual encoding between ground truth and anchor boxes.

use std::f64::consts::PI;

/// 7-DOF oriented box: center (x,y,z) in meters, dimensions (l,w,h) with
/// `l` along the heading direction, yaw `theta` about Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Box3D { x, y, z, l, w, h, theta }
    }

    /// BEV footprint corners, counterclockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        let mut out = [(0.0, 0.0); 4];
        for (i, (lx, ly)) in local.iter().enumerate() {
            out[i] = (self.x + c * lx - s * ly, self.y + s * lx + c * ly);
        }
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }

    /// Oriented-box membership with tolerance on each face.
    pub fn contains_point(&self, p: [f64; 3], tol: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.l / 2.0 + tol
            && ly.abs() <= self.w / 2.0 + tol
            && (p[2] - self.z).abs() <= self.h / 2.0 + tol
    }
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex polygon by the half-plane left of
/// the directed edge (a, b). Vertices within a sub-nanometer signed distance
/// of the edge count as inside, so near-coincident rectangle edges (e.g. a
/// box against its own decoded copy) do not trigger intersections with an
/// almost-parallel line, whose solution is numerically unstable.
fn clip_by_edge(poly: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt().max(f64::MIN_POSITIVE);
    let eps = -1e-9 * len;
    let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let prev = poly[(i + poly.len() - 1) % poly.len()];
        let sc = side(cur);
        let sp = side(prev);
        if sc >= eps {
            if sp < eps {
                out.push(intersect(prev, cur, a, b));
            }
            out.push(cur);
        } else if sp >= eps {
            out.push(intersect(prev, cur, a, b));
        }
    }
    out
}

fn intersect(p1: (f64, f64), p2: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let d1 = (p2.0 - p1.0, p2.1 - p1.1);
    let d2 = (b.0 - a.0, b.1 - a.1);
    let denom = d1.0 * d2.1 - d1.1 * d2.0;
    if denom.abs() < f64::MIN_POSITIVE {
        return p2;
    }
    let t = ((a.0 - p1.0) * d2.1 - (a.1 - p1.1) * d2.0) / denom;
    (p1.0 + t * d1.0, p1.1 + t * d1.1)
}

/// Intersection area of two oriented BEV rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let mut poly: Vec<(f64, f64)> = a.bev_corners().to_vec();
    let cb = b.bev_corners();
    for i in 0..4 {
        poly = clip_by_edge(&poly, cb[i], cb[(i + 1) % 4]);
        if poly.is_empty() {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Rotated-rectangle IoU in the BEV plane. Degenerate zero-area boxes give 0.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// BEV intersection area times vertical overlap, over volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_bev = bev_intersection_area(a, b);
    let (za0, za1) = a.z_interval();
    let (zb0, zb1) = b.z_interval();
    let dz = (za1.min(zb1) - za0.max(zb0)).max(0.0);
    let inter = inter_bev * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Collapses `theta` (in [-pi, pi)) onto [0, pi) and reports the discarded
/// direction bit; theta = 0 groups with the negatives.
pub fn normalize_heading(theta: f64) -> (f64, bool) {
    let mut t = theta % PI;
    if t < 0.0 {
        t += PI;
    }
    (t, theta > 0.0)
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI) % (2.0 * PI);
    if t < 0.0 {
        t += 2.0 * PI;
    }
    t - PI
}

/// 7-component regression target r* = (rx, ry, rz, rl, rw, rh, rtheta).
pub type RegressionTarget = [f64; 7];

/// Residual encoding of a ground-truth box against its anchor. The heading
/// is collapsed onto [0, pi) first; the direction bit is recovered by the
/// separate heading classifier.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> RegressionTarget {
    assert!(gt.l > 0.0 && gt.w > 0.0 && gt.h > 0.0, "nonpositive gt size");
    assert!(
        anchor.l > 0.0 && anchor.w > 0.0 && anchor.h > 0.0,
        "nonpositive anchor size"
    );
    let d_a = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let (theta_gt, _) = normalize_heading(gt.theta);
    [
        (gt.x - anchor.x) / d_a,
        (gt.y - anchor.y) / d_a,
        (gt.z - anchor.z) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        theta_gt - anchor.theta,
    ]
}

/// Exact algebraic inverse of [`encode_box`]; the direction bit restores the
/// half-turn discarded by the encoding.
pub fn decode_box(r: &RegressionTarget, anchor: &Box3D, dir_positive: bool) -> Box3D {
    let d_a = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let mut theta = anchor.theta + r[6];
    // map into [0, pi)
    theta %= PI;
    if theta < 0.0 {
        theta += PI;
    }
    if !dir_positive {
        theta = wrap_angle(theta + PI);
    }
    Box3D {
        x: r[0] * d_a + anchor.x,
        y: r[1] * d_a + anchor.y,
        z: r[2] * anchor.h + anchor.z,
        l: anchor.l * r[3].exp(),
        w: anchor.w * r[4].exp(),
        h: anchor.h * r[5].exp(),
        theta,
    }
}
