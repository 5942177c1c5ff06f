//! Flat key=value run configuration: dotted section names, unknown-key
//! rejection, and an exact parse -> serialize -> parse round trip.

use std::f64::consts::FRAC_PI_2;
use std::f64::consts::FRAC_PI_4;

use thiserror::Error;

use crate::augmentation::AugConfig;
use crate::backbone::{BackboneConfig, PyramidVariant};
use crate::detection::anchors::AnchorConfig;
use crate::detection::losses::LossConfig;
use crate::voxelizer::{grid_shape, VoxelConfig, VoxelMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub decay: f64,
    pub decay_steps: u64,
    pub steps: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            decay: 0.8,
            decay_steps: 18_570,
            steps: 400,
        }
    }
}

/// Learning rate after `step` optimizer steps.
pub fn lr_at(t: &TrainSettings, step: u64) -> f64 {
    t.lr * t.decay.powi((step / t.decay_steps) as i32)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub voxel: VoxelConfig,
    /// Stride-2 stages applied by the occupancy encoder before the trunk.
    pub bv_encoder_stages: usize,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    /// Anchor sizes (l, w, h) per slot.
    pub anchor_sizes: Vec<[f64; 3]>,
    pub anchor_rotations: Vec<f64>,
    pub assign_pos_iou: f64,
    pub assign_neg_iou: f64,
    pub assign_force_best: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub train: TrainSettings,
    pub aug: AugConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 12.6 m x 12.6 m range on a 15x63x63 occupancy
    /// grid, a two-level trunk, and one anchor size at two rotations.
    fn default() -> Self {
        Self {
            seed: 42,
            voxel: VoxelConfig {
                x_range: (0.0, 12.6),
                y_range: (-6.3, 6.3),
                z_range: (-3.25, 1.25),
                voxel: [0.2, 0.2, 0.3],
                mode: VoxelMode::Bv,
                max_points_per_voxel: 35,
                vfe_channels: (32, 128),
            },
            bv_encoder_stages: 0,
            backbone: BackboneConfig {
                variant: PyramidVariant::TopDown,
                in_channels: 1,
                channels: vec![8, 12],
                blocks_per_level: 1,
                map_channels: 8,
                fusion_channels: 16,
                anchors_per_cell: 2,
                target_level: 1,
            },
            loss: LossConfig::default(),
            anchor_sizes: vec![[1.6, 3.9, 1.56]],
            anchor_rotations: vec![0.0, FRAC_PI_2],
            assign_pos_iou: 0.7,
            assign_neg_iou: 0.5,
            assign_force_best: true,
            score_threshold: 0.3,
            nms_iou: 0.1,
            train: TrainSettings::default(),
            aug: AugConfig {
                n_insert: 2,
                rotate_limit: FRAC_PI_4,
                scale_range: (0.95, 1.05),
                motion_angle: FRAC_PI_2,
                translation_std: 1.0,
            },
        }
    }
}

impl RunConfig {
    /// Full-scale reference configuration (occupancy mode with the 3-stage
    /// encoder, four trunk levels, two clustered anchor sizes).
    pub fn full_scale() -> Self {
        let mut backbone = BackboneConfig::full_scale(64);
        backbone.in_channels = 64;
        Self {
            voxel: VoxelConfig::bv_default(),
            bv_encoder_stages: 3,
            backbone,
            anchor_sizes: vec![[1.581, 3.513, 1.511], [1.653, 4.234, 1.546]],
            ..Self::default()
        }
    }

    /// Occupancy grid padded for the full pyramid (encoder + trunk stages).
    pub fn input_grid(&self) -> (usize, usize, usize) {
        let depth = (self.bv_encoder_stages + self.backbone.n_levels() - 1) as u32;
        grid_shape(&self.voxel, depth)
    }

    /// Grid shape entering the trunk, after the encoder stages.
    pub fn trunk_grid(&self) -> (usize, usize, usize) {
        let mut g = self.input_grid();
        let step = |d: usize| (d - 3) / 2 + 1;
        for _ in 0..self.bv_encoder_stages {
            g = (step(g.0), step(g.1), step(g.2));
        }
        g
    }

    /// (w, l) grid the prediction heads output on.
    pub fn head_grid(&self) -> (usize, usize) {
        let shapes =
            crate::backbone::pyramid_shapes(self.trunk_grid(), self.backbone.n_levels());
        let t = self.backbone.target_level.min(shapes.len() - 1);
        (shapes[t].1, shapes[t].2)
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            x_range: self.voxel.x_range,
            y_range: self.voxel.y_range,
            z_min: self.voxel.z_range.0,
            z_center: None,
            grid: self.head_grid(),
            sizes: self.anchor_sizes.clone(),
            rotations: self.anchor_rotations.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("line {line}: expected 'key = value', got '{text}'")]
    BadLine { line: usize, text: String },
    #[error("key '{key}': cannot parse '{value}' as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
}

fn bad<'a>(key: &str, value: &str, wanted: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted,
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| bad(key, v, "number"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| bad(key, v, "integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| bad(key, v, "integer"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true|false")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma list")))
        .collect()
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma list")))
        .collect()
}

fn parse_triples(key: &str, v: &str) -> Result<Vec<[f64; 3]>, ConfigError> {
    v.split(';')
        .map(|t| {
            let vals = parse_list(key, t)?;
            if vals.len() != 3 {
                return Err(bad(key, v, "l,w,h;l,w,h"));
            }
            Ok([vals[0], vals[1], vals[2]])
        })
        .collect()
}

/// Parses a config text. Every key is optional; the rest come from
/// [`RunConfig::default`]. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut c = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: i + 1,
            text: line.to_string(),
        })?;
        let key = key.trim();
        let v = value.trim();
        match key {
            "seed" => c.seed = parse_u64(key, v)?,
            "voxel.mode" => {
                c.voxel.mode = match v {
                    "bv" => VoxelMode::Bv,
                    "vfe" => VoxelMode::Vfe,
                    _ => return Err(bad(key, v, "bv|vfe")),
                }
            }
            "voxel.x_min" => c.voxel.x_range.0 = parse_f64(key, v)?,
            "voxel.x_max" => c.voxel.x_range.1 = parse_f64(key, v)?,
            "voxel.y_min" => c.voxel.y_range.0 = parse_f64(key, v)?,
            "voxel.y_max" => c.voxel.y_range.1 = parse_f64(key, v)?,
            "voxel.z_min" => c.voxel.z_range.0 = parse_f64(key, v)?,
            "voxel.z_max" => c.voxel.z_range.1 = parse_f64(key, v)?,
            "voxel.size_x" => c.voxel.voxel[0] = parse_f64(key, v)?,
            "voxel.size_y" => c.voxel.voxel[1] = parse_f64(key, v)?,
            "voxel.size_z" => c.voxel.voxel[2] = parse_f64(key, v)?,
            "voxel.max_points" => c.voxel.max_points_per_voxel = parse_usize(key, v)?,
            "voxel.vfe_mid" => c.voxel.vfe_channels.0 = parse_usize(key, v)?,
            "voxel.vfe_out" => c.voxel.vfe_channels.1 = parse_usize(key, v)?,
            "voxel.encoder_stages" => c.bv_encoder_stages = parse_usize(key, v)?,
            "backbone.variant" => {
                c.backbone.variant = match v {
                    "bottom_up" => PyramidVariant::BottomUp,
                    "top_down" => PyramidVariant::TopDown,
                    _ => return Err(bad(key, v, "bottom_up|top_down")),
                }
            }
            "backbone.in_channels" => c.backbone.in_channels = parse_usize(key, v)?,
            "backbone.channels" => c.backbone.channels = parse_usize_list(key, v)?,
            "backbone.blocks_per_level" => c.backbone.blocks_per_level = parse_usize(key, v)?,
            "backbone.map_channels" => c.backbone.map_channels = parse_usize(key, v)?,
            "backbone.fusion_channels" => c.backbone.fusion_channels = parse_usize(key, v)?,
            "backbone.target_level" => c.backbone.target_level = parse_usize(key, v)?,
            "anchor.sizes" => c.anchor_sizes = parse_triples(key, v)?,
            "anchor.rotations" => c.anchor_rotations = parse_list(key, v)?,
            "assign.pos_iou" => c.assign_pos_iou = parse_f64(key, v)?,
            "assign.neg_iou" => c.assign_neg_iou = parse_f64(key, v)?,
            "assign.force_best" => c.assign_force_best = parse_bool(key, v)?,
            "detect.score_threshold" => c.score_threshold = parse_f64(key, v)?,
            "detect.nms_iou" => c.nms_iou = parse_f64(key, v)?,
            "loss.kappa" => c.loss.kappa = parse_f64(key, v)?,
            "loss.lambda" => c.loss.lambda = parse_f64(key, v)?,
            "loss.mu" => c.loss.mu = parse_f64(key, v)?,
            "loss.alpha" => c.loss.focal_alpha = parse_f64(key, v)?,
            "loss.gamma" => c.loss.focal_gamma = parse_f64(key, v)?,
            "train.lr" => c.train.lr = parse_f64(key, v)?,
            "train.decay" => c.train.decay = parse_f64(key, v)?,
            "train.decay_steps" => c.train.decay_steps = parse_u64(key, v)?,
            "train.steps" => c.train.steps = parse_u64(key, v)?,
            "aug.n_insert" => c.aug.n_insert = parse_usize(key, v)?,
            "aug.rotate_limit" => c.aug.rotate_limit = parse_f64(key, v)?,
            "aug.scale_min" => c.aug.scale_range.0 = parse_f64(key, v)?,
            "aug.scale_max" => c.aug.scale_range.1 = parse_f64(key, v)?,
            "aug.motion_angle" => c.aug.motion_angle = parse_f64(key, v)?,
            "aug.translation_std" => c.aug.translation_std = parse_f64(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        // anchors_per_cell is derived, never set directly
        c.backbone.anchors_per_cell = c.anchor_sizes.len() * c.anchor_rotations.len();
    }
    c.backbone.anchors_per_cell = c.anchor_sizes.len() * c.anchor_rotations.len();
    Ok(c)
}

/// Serializes every key; `parse_config(to_text(c))` reproduces `c`.
pub fn to_text(c: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("seed", c.seed.to_string());
    kv(
        "voxel.mode",
        match c.voxel.mode {
            VoxelMode::Bv => "bv".into(),
            VoxelMode::Vfe => "vfe".into(),
        },
    );
    kv("voxel.x_min", c.voxel.x_range.0.to_string());
    kv("voxel.x_max", c.voxel.x_range.1.to_string());
    kv("voxel.y_min", c.voxel.y_range.0.to_string());
    kv("voxel.y_max", c.voxel.y_range.1.to_string());
    kv("voxel.z_min", c.voxel.z_range.0.to_string());
    kv("voxel.z_max", c.voxel.z_range.1.to_string());
    kv("voxel.size_x", c.voxel.voxel[0].to_string());
    kv("voxel.size_y", c.voxel.voxel[1].to_string());
    kv("voxel.size_z", c.voxel.voxel[2].to_string());
    kv("voxel.max_points", c.voxel.max_points_per_voxel.to_string());
    kv("voxel.vfe_mid", c.voxel.vfe_channels.0.to_string());
    kv("voxel.vfe_out", c.voxel.vfe_channels.1.to_string());
    kv("voxel.encoder_stages", c.bv_encoder_stages.to_string());
    kv(
        "backbone.variant",
        match c.backbone.variant {
            PyramidVariant::BottomUp => "bottom_up".into(),
            PyramidVariant::TopDown => "top_down".into(),
        },
    );
    kv("backbone.in_channels", c.backbone.in_channels.to_string());
    kv(
        "backbone.channels",
        c.backbone
            .channels
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "backbone.blocks_per_level",
        c.backbone.blocks_per_level.to_string(),
    );
    kv("backbone.map_channels", c.backbone.map_channels.to_string());
    kv(
        "backbone.fusion_channels",
        c.backbone.fusion_channels.to_string(),
    );
    kv("backbone.target_level", c.backbone.target_level.to_string());
    kv(
        "anchor.sizes",
        c.anchor_sizes
            .iter()
            .map(|t| format!("{},{},{}", t[0], t[1], t[2]))
            .collect::<Vec<_>>()
            .join(";"),
    );
    kv(
        "anchor.rotations",
        c.anchor_rotations
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("assign.pos_iou", c.assign_pos_iou.to_string());
    kv("assign.neg_iou", c.assign_neg_iou.to_string());
    kv("assign.force_best", c.assign_force_best.to_string());
    kv("detect.score_threshold", c.score_threshold.to_string());
    kv("detect.nms_iou", c.nms_iou.to_string());
    kv("loss.kappa", c.loss.kappa.to_string());
    kv("loss.lambda", c.loss.lambda.to_string());
    kv("loss.mu", c.loss.mu.to_string());
    kv("loss.alpha", c.loss.focal_alpha.to_string());
    kv("loss.gamma", c.loss.focal_gamma.to_string());
    kv("train.lr", c.train.lr.to_string());
    kv("train.decay", c.train.decay.to_string());
    kv("train.decay_steps", c.train.decay_steps.to_string());
    kv("train.steps", c.train.steps.to_string());
    kv("aug.n_insert", c.aug.n_insert.to_string());
    kv("aug.rotate_limit", c.aug.rotate_limit.to_string());
    kv("aug.scale_min", c.aug.scale_range.0.to_string());
    kv("aug.scale_max", c.aug.scale_range.1.to_string());
    kv("aug.motion_angle", c.aug.motion_angle.to_string());
    kv("aug.translation_std", c.aug.translation_std.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_exactly() {
        let c = RunConfig::default();
        let text = to_text(&c);
        let back = parse_config(&text).unwrap();
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn full_scale_round_trips_and_matches_reference_grids() {
        let c = RunConfig::full_scale();
        let back = parse_config(&to_text(&c)).unwrap();
        assert_eq!(to_text(&back), to_text(&c));
        assert_eq!(c.input_grid(), (127, 3199, 2815));
        assert_eq!(c.trunk_grid(), (15, 399, 351));
        assert_eq!(c.head_grid(), (199, 175));
        assert_eq!(c.anchor_config().per_cell(), 4);
        assert_eq!(199 * 175 * 4, 139_300);
    }

    #[test]
    fn unknown_key_is_rejected() {
        match parse_config("voxel.sizex = 0.1\n") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "voxel.sizex"),
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn bad_line_and_bad_value_report_positions() {
        match parse_config("# comment\nnonsense\n") {
            Err(ConfigError::BadLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_config("seed = banana\n") {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_anchor_count_derives() {
        let text = "seed = 7\nanchor.sizes = 1.6,3.9,1.56;1.7,4.1,1.5\nanchor.rotations = 0,1.5707963267948966\nbackbone.channels = 4,6,8\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.anchor_sizes.len(), 2);
        assert_eq!(c.backbone.anchors_per_cell, 4);
        assert_eq!(c.backbone.n_levels(), 3);
    }

    #[test]
    fn toy_grids_are_desk_scale() {
        let c = RunConfig::default();
        assert_eq!(c.input_grid(), (15, 63, 63));
        assert_eq!(c.trunk_grid(), (15, 63, 63));
        assert_eq!(c.head_grid(), (31, 31));
    }

    #[test]
    fn lr_schedule_spot_values() {
        let t = TrainSettings::default();
        assert!((lr_at(&t, 0) - 0.0002).abs() < 1e-15);
        assert!((lr_at(&t, 18_570) - 0.00016).abs() < 1e-15);
        assert!((lr_at(&t, 37_140) - 0.000128).abs() < 1e-15);
        assert!((lr_at(&t, 18_569) - 0.0002).abs() < 1e-15);
    }
}
