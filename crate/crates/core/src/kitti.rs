//! Drive-data ingestion: velodyne binary point clouds, camera-frame label
//! files with calibration, and the plain-text detection format.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::detection::boxes::{wrap_angle, Box3D};
use crate::voxelizer::PointCloud;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("truncated point file: {len} bytes leaves a partial record at byte {offset}")]
    Truncated { len: usize, offset: usize },
    #[error("malformed label at line {line}: {reason}")]
    BadLabel { line: usize, reason: String },
    #[error("calibration key {0} missing or malformed")]
    BadCalib(&'static str),
    #[error("malformed detection at line {line}: {reason}")]
    BadDetection { line: usize, reason: String },
}

/// Little-endian 32-bit float quadruples (x, y, z, reflectance).
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud, IngestError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(IngestError::Truncated {
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % 16,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| {
            f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64
        };
        points.push([f(0), f(4), f(8), f(12)]);
    }
    Ok(PointCloud::new(points))
}

pub fn write_velodyne_bin(path: &Path, pc: &PointCloud) -> Result<(), IngestError> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rigid transform stored as rotation + translation.
#[derive(Debug, Clone)]
pub struct Calib {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Calib {
    pub fn identity() -> Self {
        Self {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.r.iter().enumerate() {
            out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + self.t[i];
        }
        out
    }

    /// Inverse of a rigid transform: (R^T, -R^T t).
    fn inverse(&self) -> Calib {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in self.r.iter().enumerate() {
            for j in 0..3 {
                r[j][i] = row[j];
            }
        }
        let mut t = [0.0; 3];
        for (i, ti) in t.iter_mut().enumerate() {
            *ti = -(r[i][0] * self.t[0] + r[i][1] * self.t[1] + r[i][2] * self.t[2]);
        }
        Calib { r, t }
    }

    fn compose(&self, inner: &Calib) -> Calib {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, inner_row) in inner.r.iter().enumerate() {
                    r[i][j] += self.r[i][k] * inner_row[j];
                }
            }
        }
        let t = self.apply(inner.t);
        Calib { r, t }
    }
}

fn parse_floats(s: &str) -> Vec<f64> {
    s.split_whitespace()
        .filter_map(|v| v.parse::<f64>().ok())
        .collect()
}

/// Reads the rectification matrix and the sensor-to-camera transform from a
/// calibration file ("R0_rect:" 9 values, "Tr_velo_to_cam:" 12 values).
pub fn read_calib(path: &Path) -> Result<(Calib, Calib), IngestError> {
    let text = fs::read_to_string(path)?;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("R0_rect:") {
            let v = parse_floats(rest);
            if v.len() != 9 {
                return Err(IngestError::BadCalib("R0_rect"));
            }
            r0 = Some(Calib {
                r: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
                t: [0.0; 3],
            });
        } else if let Some(rest) = line.strip_prefix("Tr_velo_to_cam:") {
            let v = parse_floats(rest);
            if v.len() != 12 {
                return Err(IngestError::BadCalib("Tr_velo_to_cam"));
            }
            tr = Some(Calib {
                r: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
                t: [v[3], v[7], v[11]],
            });
        }
    }
    Ok((
        r0.ok_or(IngestError::BadCalib("R0_rect"))?,
        tr.ok_or(IngestError::BadCalib("Tr_velo_to_cam"))?,
    ))
}

/// Parses "Car" labels (camera-frame h, w, l, x, y, z, ry) into sensor-frame
/// boxes with the z coordinate lifted from the bottom face to the center.
/// "DontCare" and other classes are skipped.
pub fn read_kitti_labels(label_path: &Path, calib_path: &Path) -> Result<Vec<Box3D>, IngestError> {
    let (r0, tr) = read_calib(calib_path)?;
    let cam_from_velo = r0.compose(&tr);
    let velo_from_cam = cam_from_velo.inverse();
    let text = fs::read_to_string(label_path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "Car" {
            continue;
        }
        if fields.len() < 15 {
            return Err(IngestError::BadLabel {
                line: i + 1,
                reason: format!("expected 15 fields, got {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64, IngestError> {
            fields[k].parse::<f64>().map_err(|_| IngestError::BadLabel {
                line: i + 1,
                reason: format!("field {k} is not a number"),
            })
        };
        let (h, w, l) = (num(8)?, num(9)?, num(10)?);
        let (x, y, z) = (num(11)?, num(12)?, num(13)?);
        let ry = num(14)?;
        // label origin is the bottom-face center; camera y points down
        let center_cam = [x, y - h / 2.0, z];
        let c = velo_from_cam.apply(center_cam);
        let theta = wrap_angle(-ry - std::f64::consts::FRAC_PI_2);
        boxes.push(Box3D::new(c[0], c[1], c[2], l, w, h, theta));
    }
    Ok(boxes)
}

/// One detection per line: "x y z l w h theta score", 6-decimal fixed.
pub fn write_detections(path: &Path, dets: &[(Box3D, f64)]) -> Result<(), IngestError> {
    let mut f = fs::File::create(path)?;
    for (b, score) in dets {
        writeln!(
            f,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x, b.y, b.z, b.l, b.w, b.h, b.theta, score
        )?;
    }
    Ok(())
}

/// Reads the detection text format; a missing score column defaults to 1,
/// so ground-truth files share the format.
pub fn read_detections(path: &Path) -> Result<Vec<(Box3D, f64)>, IngestError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(line);
        if v.len() != 7 && v.len() != 8 {
            return Err(IngestError::BadDetection {
                line: i + 1,
                reason: format!("expected 7 or 8 numbers, got {}", v.len()),
            });
        }
        let b = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
        out.push((b, if v.len() == 8 { v[7] } else { 1.0 }));
    }
    Ok(out)
}
