//! Command-line entry point: voxelization, inference, small-scale training,
//! evaluation, benchmarking, numeric self-checks, and BEV plot export.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxdet::detection::boxes::{decode_box, encode_box, iou_3d, Box3D};
use voxdet::detection::losses::{focal_cls_loss_logits, reg_loss_grad, LossConfig};
use voxdet::augmentation::Scene;
use voxdet::config::{parse_config, RunConfig};
use voxdet::eval::average_precision;
use voxdet::kitti::{read_detections, read_velodyne_bin, write_detections};
use voxdet::rulebook::{build_rulebook, ConvGeometry, ConvMode};
use voxdet::sparse_ops::{
    dense_conv3d_oracle, forward_with_rulebook, sparse_conv_backward,
    sparse_conv_forward_traced, ActivationKind, ConvWeights,
};
use voxdet::sparse_tensor::{Coord3, SparseTensor3};
use voxdet::train::{infer_scene, train_scenes, NetWeights};
use voxdet::voxelizer::{voxelize_bv, voxelize_vfe, VfeWeights, VoxelMode};
use voxdet::weights_io::{load_params, save_params};

#[derive(Parser)]
#[command(name = "voxdet", about = "Sparse-convolution LiDAR 3D detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelize one point-cloud .bin file and dump the sparse sites as text.
    Voxelize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector over every .bin in a directory.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of small scenes (.bin cloud + .txt boxes).
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection files against ground-truth files of the same name.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
    },
    /// Time rulebook build, GEMM, and full forward at several densities.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.01,0.05,0.1")]
        densities: String,
    },
    /// Run the seeded numeric verification suites.
    Selfcheck,
    /// Render a point cloud and detections as a BEV text grid.
    PlotExport {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    /// Unusable configuration: exit code 2.
    Config(String),
    /// Any other failure: exit code 1.
    Run(String),
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Run(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Ok(s) = std::env::var("VOXDET_SEED") {
        cfg.seed = s
            .parse()
            .map_err(|_| CliError::Config(format!("VOXDET_SEED is not an integer: '{s}'")))?;
    }
    Ok(cfg)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Run(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn cmd_voxelize(config: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let cloud = read_velodyne_bin(input)?;
    let grid = cfg.input_grid();
    let tensor: SparseTensor3<f64> = match cfg.voxel.mode {
        VoxelMode::Bv => voxelize_bv(&cloud, &cfg.voxel, grid)?,
        VoxelMode::Vfe => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let w: VfeWeights<f64> = VfeWeights::random(
                cfg.voxel.vfe_channels.0,
                cfg.voxel.vfe_channels.1,
                0.1,
                &mut rng,
            );
            voxelize_vfe(&cloud, &cfg.voxel, &w, grid, &mut rng)?
        }
    };
    let mut s = String::new();
    let (h, w, l) = tensor.shape();
    writeln!(s, "# grid {h} {w} {l}").unwrap();
    writeln!(s, "# channels {}", tensor.channels()).unwrap();
    writeln!(s, "# active {}", tensor.coords().len()).unwrap();
    for (i, c) in tensor.coords().iter().enumerate() {
        write!(s, "{} {} {}", c.x, c.y, c.z).unwrap();
        for f in tensor.features().row(i) {
            write!(s, " {f:.9}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(out, s)?;
    println!(
        "voxelized {} points into {} active sites on {h}x{w}x{l}",
        cloud.len(),
        tensor.coords().len()
    );
    Ok(())
}

fn load_weights(cfg: &RunConfig, path: &Path) -> Result<NetWeights<f64>, CliError> {
    let flat = load_params(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Template for shapes only; every value is overwritten from the file.
    let mut w: NetWeights<f64> = NetWeights::random(cfg, 1.0, &mut rng);
    if flat.len() != w.n_params() {
        return Err(CliError::Run(format!(
            "weight file has {} params, config needs {}",
            flat.len(),
            w.n_params()
        )));
    }
    w.assign_from_flat(&flat);
    Ok(w)
}

fn cmd_infer(config: &Path, weights: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let w = load_weights(&cfg, weights)?;
    std::fs::create_dir_all(out)?;
    let files = sorted_files(input, "bin")?;
    if files.is_empty() {
        return Err(CliError::Run(format!("no .bin files in {}", input.display())));
    }
    for f in &files {
        let cloud = read_velodyne_bin(f)?;
        let dets = infer_scene(&cfg, &w, &cloud)?;
        let out_file = out.join(format!("{}.txt", stem(f)));
        write_detections(&out_file, &dets)?;
        println!("{}: {} detections", stem(f), dets.len());
    }
    Ok(())
}

fn cmd_train_toy(config: &Path, scenes_dir: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let files = sorted_files(scenes_dir, "bin")?;
    if files.is_empty() {
        return Err(CliError::Run(format!("no .bin scenes in {}", scenes_dir.display())));
    }
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        let cloud = read_velodyne_bin(f)?;
        let label_file = f.with_extension("txt");
        let gt_boxes = read_detections(&label_file)?
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        scenes.push(Scene {
            cloud,
            gt_boxes,
            id: stem(f),
        });
    }
    let result = train_scenes(&cfg, &scenes)?;
    for (step, loss) in result.losses.iter().enumerate() {
        println!("step {step} loss {loss:.9}");
    }
    save_params(out, &result.weights.to_flat())?;
    println!(
        "trained {} steps on {} scenes; saved {} params to {}",
        result.losses.len(),
        scenes.len(),
        result.weights.n_params(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(dets_dir: &Path, gts_dir: &Path, iou: f64) -> Result<(), CliError> {
    let files = sorted_files(dets_dir, "txt")?;
    if files.is_empty() {
        return Err(CliError::Run(format!("no .txt files in {}", dets_dir.display())));
    }
    // Pool scenes into one ranking; a large per-scene x offset keeps boxes
    // from different scenes at IoU 0 so matching stays scene-local.
    let mut all_dets: Vec<(Box3D, f64)> = Vec::new();
    let mut all_gts: Vec<Box3D> = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let shift = 1.0e6 * i as f64;
        for (mut b, score) in read_detections(f)? {
            b.x += shift;
            all_dets.push((b, score));
        }
        let gt_file = gts_dir.join(f.file_name().unwrap());
        for (mut b, _) in read_detections(&gt_file)? {
            b.x += shift;
            all_gts.push(b);
        }
    }
    let report = average_precision(&all_dets, &all_gts, iou_3d, iou, 11);
    println!(
        "scenes {} detections {} ground_truths {}",
        files.len(),
        report.n_dets,
        report.n_gts
    );
    println!("ap_3d@{iou} {:.6}", report.ap);
    Ok(())
}

/// Random occupancy tensor: `density` fraction of the grid active.
fn random_tensor(
    grid: (usize, usize, usize),
    channels: usize,
    density: f64,
    rng: &mut ChaCha8Rng,
) -> SparseTensor3<f64> {
    let volume = grid.0 * grid.1 * grid.2;
    let n = ((volume as f64) * density).round() as usize;
    let picks = rand::seq::index::sample(rng, volume, n.min(volume));
    let mut sites = Vec::with_capacity(picks.len());
    for flat in picks.iter() {
        let x = flat / (grid.1 * grid.2);
        let y = (flat / grid.2) % grid.1;
        let z = flat % grid.2;
        let feats: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        sites.push((Coord3::new(x as i32, y as i32, z as i32), feats));
    }
    SparseTensor3::from_sites(grid, channels, &sites).expect("sampled sites are unique")
}

fn cmd_bench(config: &Path, densities: &str) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let densities: Vec<f64> = densities
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("bad densities list '{densities}'")))?;
    let grid = cfg.trunk_grid();
    let c = cfg.backbone.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net: NetWeights<f64> = NetWeights::random(&cfg, 0.05, &mut rng);
    let conv = ConvWeights::random(c, 27, c.max(8), 0.1, &mut rng);
    let geom = ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Standard, grid)?;
    println!("density,active_sites,rulebook_pairs,rulebook_ms,gemm_ms,total_forward_ms");
    for &d in &densities {
        let t = random_tensor(grid, c, d, &mut rng);
        let t0 = Instant::now();
        let rb = build_rulebook(&t, &geom);
        let rb_ms = t0.elapsed().as_secs_f64() * 1e3;
        let pairs: usize = rb.pairs.iter().map(|p| p.len()).sum();
        let t1 = Instant::now();
        let _ = forward_with_rulebook(&t, &rb, &conv, ActivationKind::ReLU)?;
        let gemm_ms = t1.elapsed().as_secs_f64() * 1e3;
        let t2 = Instant::now();
        let maps = voxdet::backbone::pyramid_forward(&t, &cfg.backbone, &net.backbone)?;
        let _ = voxdet::backbone::fusion_forward(&maps, &net.fusion)?;
        let total_ms = t2.elapsed().as_secs_f64() * 1e3;
        println!(
            "{d},{},{pairs},{rb_ms:.3},{gemm_ms:.3},{total_ms:.3}",
            t.coords().len()
        );
    }
    Ok(())
}

fn densify(t: &SparseTensor3<f64>) -> Array4<f64> {
    let (h, w, l) = t.shape();
    let mut arr = Array4::zeros((t.channels(), h, w, l));
    for (i, c) in t.coords().iter().enumerate() {
        for ch in 0..t.channels() {
            arr[[ch, c.x as usize, c.y as usize, c.z as usize]] = t.features()[[i, ch]];
        }
    }
    arr
}

fn check(name: &str, ok: bool, detail: String, failures: &mut usize) {
    if ok {
        println!("{name}: ok ({detail})");
    } else {
        println!("{name}: FAIL ({detail})");
        *failures += 1;
    }
}

fn selfcheck() -> Result<(), CliError> {
    let seed = std::env::var("VOXDET_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1234u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;

    // Sparse forward against the dense full-grid reference.
    let mut worst: f64 = 0.0;
    let n_oracle = 40;
    for case in 0..n_oracle {
        let grid = (
            rng.gen_range(4..=10),
            rng.gen_range(4..=10),
            rng.gen_range(4..=10),
        );
        let sub = case % 2 == 1;
        let (mode, k, s) = if sub {
            (ConvMode::Submanifold, 3, 1)
        } else {
            (ConvMode::Standard, rng.gen_range(1..=3), rng.gen_range(1..=2))
        };
        let grid = if mode == ConvMode::Standard {
            // pad so (d - k) divides s
            let fix = |d: usize| d - ((d - k) % s);
            (fix(grid.0), fix(grid.1), fix(grid.2))
        } else {
            grid
        };
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let t = random_tensor(grid, c_in, rng.gen_range(0.05..0.2), &mut rng);
        let w = ConvWeights::random(c_in, k * k * k, c_out, 0.5, &mut rng);
        let g = ConvGeometry::new((k, k, k), (s, s, s), mode, grid)?;
        let (out, _) = sparse_conv_forward_traced(&t, &g, &w, ActivationKind::ReLU)?;
        let dense = dense_conv3d_oracle(&densify(&t), &g, &w, ActivationKind::ReLU);
        for (i, c) in out.coords().iter().enumerate() {
            for ch in 0..out.channels() {
                let d = (out.features()[[i, ch]]
                    - dense[[ch, c.x as usize, c.y as usize, c.z as usize]])
                .abs();
                worst = worst.max(d);
            }
        }
    }
    check(
        "oracle-equivalence",
        worst <= 1e-9,
        format!("{n_oracle} cases, worst |delta| {worst:.2e}"),
        &mut failures,
    );

    // <conv(x), y> == <x, adjoint(y)> with identity activation, zero bias.
    let mut worst: f64 = 0.0;
    let n_adj = 25;
    for _ in 0..n_adj {
        let grid = (7, 9, 7);
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let t = random_tensor(grid, c_in, rng.gen_range(0.05..0.2), &mut rng);
        let mut w = ConvWeights::random(c_in, 27, c_out, 0.5, &mut rng);
        w.b.fill(0.0);
        let g = ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Standard, grid)?;
        let (out, trace) = sparse_conv_forward_traced(&t, &g, &w, ActivationKind::Identity)?;
        let y = Array2::from_shape_fn(out.features().dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (out.features() * &y).sum();
        let grads = sparse_conv_backward(&t, &w, ActivationKind::Identity, &trace, &y);
        let rhs: f64 = (t.features() * &grads.input).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    check(
        "adjointness",
        worst <= 1e-9,
        format!("{n_adj} cases, worst |<conv x,y> - <x,adj y>| {worst:.2e}"),
        &mut failures,
    );

    // Analytic weight gradients against central finite differences.
    let mut worst: f64 = 0.0;
    let n_fd = 10;
    for _ in 0..n_fd {
        let grid = (6, 6, 6);
        let c_in = 2;
        let t = random_tensor(grid, c_in, 0.15, &mut rng);
        let mut w = ConvWeights::random(c_in, 27, 2, 0.5, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, grid)?;
        let loss = |w: &ConvWeights<f64>| -> f64 {
            let (out, _) = sparse_conv_forward_traced(&t, &g, w, ActivationKind::ReLU).unwrap();
            out.features().iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let (out, trace) = sparse_conv_forward_traced(&t, &g, &w, ActivationKind::ReLU)?;
        let grads = sparse_conv_backward(
            &t,
            &w,
            ActivationKind::ReLU,
            &trace,
            &out.features().clone(),
        );
        for _ in 0..4 {
            let i = rng.gen_range(0..w.w.len());
            let idx = (
                i / (27 * 2),
                (i / 2) % 27,
                i % 2,
            );
            let eps = 1e-5;
            let orig = w.w[idx];
            w.w[idx] = orig + eps;
            let lp = loss(&w);
            w.w[idx] = orig - eps;
            let lm = loss(&w);
            w.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.w[idx];
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    check(
        "weight-gradients",
        worst < 1e-6,
        format!("{n_fd} cases x 4 probes, worst rel err {worst:.2e}"),
        &mut failures,
    );

    // Box encode/decode round trip.
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let mk = |rng: &mut ChaCha8Rng| {
            Box3D::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-PI..PI),
            )
        };
        let gt = mk(&mut rng);
        let anchor = mk(&mut rng);
        let r = encode_box(&gt, &anchor);
        let dir = {
            let (_, positive) = voxdet::detection::boxes::normalize_heading(gt.theta);
            positive
        };
        let back = decode_box(&r, &anchor, dir);
        worst = worst.max(1.0 - iou_3d(&gt, &back));
    }
    check(
        "encode-decode-roundtrip",
        worst <= 1e-9,
        format!("500 cases, worst 1-IoU {worst:.2e}"),
        &mut failures,
    );

    // Closed-form loss point values.
    let cfg = LossConfig::default();
    let (focal, _, _) = focal_cls_loss_logits::<f64>(&[0.0], &[], &cfg);
    let focal_expected = 0.25 * 0.25 * 2.0f64.ln();
    let (l_half, _) = reg_loss_grad::<f64>(
        &[[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
        &[[0.0; 7]],
    );
    let (l_two, _) = reg_loss_grad::<f64>(
        &[[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
        &[[0.0; 7]],
    );
    let ok = (focal - focal_expected).abs() <= 1e-9
        && (l_half - 0.125).abs() <= 1e-9
        && (l_two - 1.5).abs() <= 1e-9;
    check(
        "loss-point-values",
        ok,
        format!("focal {focal:.6}, smooth-l1 {l_half:.3}/{l_two:.3}"),
        &mut failures,
    );

    if failures > 0 {
        return Err(CliError::Run(format!("{failures} selfcheck suite(s) failed")));
    }
    println!("selfcheck: PASS");
    Ok(())
}

fn cmd_plot_export(scene: &Path, dets: &Path, out: &Path) -> Result<(), CliError> {
    let cloud = read_velodyne_bin(scene)?;
    let boxes = read_detections(dets)?;
    if cloud.points.is_empty() && boxes.is_empty() {
        return Err(CliError::Run("nothing to plot".into()));
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut grow = |x: f64, y: f64| {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    };
    for p in &cloud.points {
        grow(p[0], p[1]);
    }
    for (b, _) in &boxes {
        for c in b.bev_corners() {
            grow(c.0, c.1);
        }
    }
    let pad_x = (x_max - x_min).max(1.0) * 0.05;
    let pad_y = (y_max - y_min).max(1.0) * 0.05;
    x_min -= pad_x;
    x_max += pad_x;
    y_min -= pad_y;
    y_max += pad_y;
    const COLS: usize = 96;
    const ROWS: usize = 48;
    let mut grid = vec![vec![b' '; COLS]; ROWS];
    // x maps to columns (left to right), y to rows (top = max y).
    let cell = |x: f64, y: f64| -> (usize, usize) {
        let cx = ((x - x_min) / (x_max - x_min) * (COLS - 1) as f64).round() as usize;
        let ry = ((y_max - y) / (y_max - y_min) * (ROWS - 1) as f64).round() as usize;
        (ry.min(ROWS - 1), cx.min(COLS - 1))
    };
    for p in &cloud.points {
        let (r, c) = cell(p[0], p[1]);
        grid[r][c] = b'.';
    }
    for (b, _) in &boxes {
        let corners = b.bev_corners();
        for e in 0..4 {
            let (a, z) = (corners[e], corners[(e + 1) % 4]);
            for s in 0..=200 {
                let f = s as f64 / 200.0;
                let (r, c) = cell(a.0 + (z.0 - a.0) * f, a.1 + (z.1 - a.1) * f);
                grid[r][c] = b'#';
            }
        }
    }
    let mut s = String::new();
    writeln!(s, "# bev x [{x_min:.2}, {x_max:.2}] y [{y_min:.2}, {y_max:.2}]").unwrap();
    writeln!(s, "# {} points, {} boxes", cloud.points.len(), boxes.len()).unwrap();
    for row in &grid {
        s.push_str(std::str::from_utf8(row).unwrap());
        s.push('\n');
    }
    std::fs::write(out, s)?;
    println!("wrote {}x{} bev grid to {}", COLS, ROWS, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Voxelize { config, input, out } => cmd_voxelize(&config, &input, &out),
        Cmd::Infer {
            config,
            weights,
            input,
            out,
        } => cmd_infer(&config, &weights, &input, &out),
        Cmd::TrainToy { config, scenes, out } => cmd_train_toy(&config, &scenes, &out),
        Cmd::Eval { dets, gts, iou } => cmd_eval(&dets, &gts, iou),
        Cmd::Bench { config, densities } => cmd_bench(&config, &densities),
        Cmd::Selfcheck => selfcheck(),
        Cmd::PlotExport { scene, dets, out } => cmd_plot_export(&scene, &dets, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
