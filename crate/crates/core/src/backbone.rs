//! The detection trunk: a bottom-up sparse pyramid of submanifold residual
//! blocks with stride-2 transitions, an optional top-down fused path, a
//! height-collapse to 2D per level, and a dense 2D fusion network producing
//! classification / box-regression / heading prediction maps.
//!
//! Every forward entry point has a traced variant; the backward passes are
//! analytic and mirror the weight structures (gradients are returned in the
//! same struct types as the weights).

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::dense2d::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, Conv2dWeights, Dense2dError, Pad2d,
};
use crate::rulebook::{ConvGeometry, ConvMode};
use crate::scalar::Real;
use crate::sparse_ops::{
    compress_to_2d_traced, residual_add, sparse_conv_backward, sparse_conv_forward_traced,
    ActivationKind, ConvTrace, ConvWeights, OpError,
};
use crate::sparse_tensor::SparseTensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidVariant {
    /// Bottom-up path only.
    BottomUp,
    /// Bottom-up plus a top-down path that deconvolves each deeper level,
    /// concatenates it onto the lateral one, and fuses with one conv.
    TopDown,
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub variant: PyramidVariant,
    pub in_channels: usize,
    /// Channel width per pyramid level.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    /// Channels of each level's collapsed 2D map.
    pub map_channels: usize,
    /// Width of the dense fusion trunk convs.
    pub fusion_channels: usize,
    pub anchors_per_cell: usize,
    /// Level whose (w, l) grid the fusion network outputs on.
    pub target_level: usize,
}

impl BackboneConfig {
    /// Reference full-scale configuration.
    pub fn full_scale(in_channels: usize) -> Self {
        Self {
            variant: PyramidVariant::TopDown,
            in_channels,
            channels: vec![64, 80, 96, 128],
            blocks_per_level: 2,
            map_channels: 128,
            fusion_channels: 128,
            anchors_per_cell: 4,
            target_level: 1,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.channels.len()
    }
}

/// Per-level grid shapes: the input shape, then (d-3)/2+1 per transition.
pub fn pyramid_shapes(in_shape: (usize, usize, usize), n_levels: usize) -> Vec<(usize, usize, usize)> {
    let step = |d: usize| (d - 3) / 2 + 1;
    let mut shapes = vec![in_shape];
    for _ in 1..n_levels {
        let p = *shapes.last().unwrap();
        shapes.push((step(p.0), step(p.1), step(p.2)));
    }
    shapes
}

#[derive(Debug, Clone)]
pub struct ResBlockWeights<T: Real> {
    pub conv1: ConvWeights<T>,
    pub conv2: ConvWeights<T>,
}

#[derive(Debug, Clone)]
pub struct LevelWeights<T: Real> {
    /// Level 0: submanifold k=3 entry conv; deeper levels: standard k=3 s=2.
    pub transition: ConvWeights<T>,
    pub blocks: Vec<ResBlockWeights<T>>,
}

#[derive(Debug, Clone)]
pub struct TopDownWeights<T: Real> {
    /// Transposed k=3 s=2 conv from level j+1 channels down to level j's.
    pub up: ConvWeights<T>,
    /// Submanifold k=3 conv from the concatenated 2c_j back to c_j.
    pub fuse: ConvWeights<T>,
}

#[derive(Debug, Clone)]
pub struct BackboneWeights<T: Real> {
    pub levels: Vec<LevelWeights<T>>,
    /// One junction per adjacent level pair, indexed by the lower level.
    pub topdown: Vec<TopDownWeights<T>>,
    /// Per-level (h_i,1,1) height-collapse convs to `map_channels`.
    pub compress: Vec<ConvWeights<T>>,
}

fn conv_zeros_like<T: Real>(w: &ConvWeights<T>) -> ConvWeights<T> {
    ConvWeights::zeros(w.c_in(), w.kernel_volume(), w.c_out())
}

fn conv2d_zeros_like<T: Real>(w: &Conv2dWeights<T>) -> Conv2dWeights<T> {
    let (d0, d1, kh, kw) = w.w.dim();
    Conv2dWeights::zeros(d0, d1, kh, kw).with_bias_len(w.b.len())
}

impl<T: Real> BackboneWeights<T> {
    pub fn random<R: Rng>(
        cfg: &BackboneConfig,
        in_shape: (usize, usize, usize),
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let n = cfg.n_levels();
        let shapes = pyramid_shapes(in_shape, n);
        let mut levels = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { cfg.in_channels } else { cfg.channels[i - 1] };
            let c = cfg.channels[i];
            let transition = ConvWeights::random(c_in, 27, c, scale, rng);
            let blocks = (0..cfg.blocks_per_level)
                .map(|_| ResBlockWeights {
                    conv1: ConvWeights::random(c, 27, c, scale, rng),
                    conv2: ConvWeights::random(c, 27, c, scale, rng),
                })
                .collect();
            levels.push(LevelWeights { transition, blocks });
        }
        let topdown = match cfg.variant {
            PyramidVariant::BottomUp => Vec::new(),
            PyramidVariant::TopDown => (0..n.saturating_sub(1))
                .map(|j| TopDownWeights {
                    up: ConvWeights::random(cfg.channels[j + 1], 27, cfg.channels[j], scale, rng),
                    fuse: ConvWeights::random(
                        2 * cfg.channels[j],
                        27,
                        cfg.channels[j],
                        scale,
                        rng,
                    ),
                })
                .collect(),
        };
        let compress = (0..n)
            .map(|i| ConvWeights::random(cfg.channels[i], shapes[i].0, cfg.map_channels, scale, rng))
            .collect();
        Self {
            levels,
            topdown,
            compress,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| LevelWeights {
                    transition: conv_zeros_like(&l.transition),
                    blocks: l
                        .blocks
                        .iter()
                        .map(|b| ResBlockWeights {
                            conv1: conv_zeros_like(&b.conv1),
                            conv2: conv_zeros_like(&b.conv2),
                        })
                        .collect(),
                })
                .collect(),
            topdown: self
                .topdown
                .iter()
                .map(|t| TopDownWeights {
                    up: conv_zeros_like(&t.up),
                    fuse: conv_zeros_like(&t.fuse),
                })
                .collect(),
            compress: self.compress.iter().map(conv_zeros_like).collect(),
        }
    }
}

/// Prediction maps on the fusion grid: per cell A classification logits,
/// 7A box residuals, 2A heading-direction logits.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Real> {
    pub cls: Array3<T>,
    pub reg: Array3<T>,
    pub dir: Array3<T>,
}

pub struct BlockTrace<T: Real> {
    pub input: SparseTensor3<T>,
    pub t1: ConvTrace<T>,
    pub mid: SparseTensor3<T>,
    pub t2: ConvTrace<T>,
    /// Residual sum before the closing ReLU.
    pub sum_pre: Array2<T>,
}

pub struct TopDownTrace<T: Real> {
    /// Input to junction j's up conv (the fused level j+1 tensor).
    pub up_in: Vec<SparseTensor3<T>>,
    pub up_trace: Vec<ConvTrace<T>>,
    pub up_out: Vec<SparseTensor3<T>>,
    /// Lateral row -> up-conv output row, if that site is active there.
    pub proj: Vec<Vec<Option<usize>>>,
    pub cat: Vec<SparseTensor3<T>>,
    pub fuse_trace: Vec<ConvTrace<T>>,
}

pub struct PyramidTrace<T: Real> {
    pub level_inputs: Vec<SparseTensor3<T>>,
    pub transitions: Vec<ConvTrace<T>>,
    pub blocks: Vec<Vec<BlockTrace<T>>>,
    /// Output of each level's block stack.
    pub bottom: Vec<SparseTensor3<T>>,
    pub topdown: Option<TopDownTrace<T>>,
    /// Tensor each compress conv consumed (bottom or fused).
    pub compress_in: Vec<SparseTensor3<T>>,
    pub compress_out: Vec<SparseTensor3<T>>,
    pub compress: Vec<ConvTrace<T>>,
}

fn relu_tensor<T: Real>(t: &SparseTensor3<T>) -> SparseTensor3<T> {
    let f = t
        .features()
        .mapv(|v| if v > T::zero() { v } else { T::zero() });
    SparseTensor3::from_parts(t.shape(), t.coords().to_vec(), f).expect("index unchanged")
}

/// Re-indexes `src` onto `base`'s active set: rows follow `base`, features
/// come from `src` where present and are zero elsewhere. Also returns the
/// base-row -> src-row map for scattering gradients back.
fn project_onto<T: Real>(
    base: &SparseTensor3<T>,
    src: &SparseTensor3<T>,
) -> (SparseTensor3<T>, Vec<Option<usize>>) {
    let mut f: Array2<T> = Array2::zeros((base.active_count(), src.channels()));
    let mut proj = vec![None; base.active_count()];
    for (i, coord) in base.coords().iter().enumerate() {
        if let Some(&r) = src.index().get(coord) {
            f.row_mut(i).assign(&src.features().row(r));
            proj[i] = Some(r);
        }
    }
    let t = SparseTensor3::from_parts(base.shape(), base.coords().to_vec(), f)
        .expect("base index is valid");
    (t, proj)
}

fn run_blocks<T: Real>(
    input: SparseTensor3<T>,
    blocks: &[ResBlockWeights<T>],
) -> Result<(SparseTensor3<T>, Vec<BlockTrace<T>>), OpError> {
    let mut cur = input;
    let mut traces = Vec::with_capacity(blocks.len());
    for bw in blocks {
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, cur.shape())?;
        let (mid, t1) = sparse_conv_forward_traced(&cur, &g, &bw.conv1, ActivationKind::ReLU)?;
        let (y2, t2) = sparse_conv_forward_traced(&mid, &g, &bw.conv2, ActivationKind::Identity)?;
        let sum = residual_add(&y2, &cur)?;
        let sum_pre = sum.features().clone();
        let out = relu_tensor(&sum);
        traces.push(BlockTrace {
            input: cur,
            t1,
            mid,
            t2,
            sum_pre,
        });
        cur = out;
    }
    Ok((cur, traces))
}

/// Full traced forward pass of the sparse pyramid; returns the per-level
/// collapsed 2D maps.
pub fn pyramid_forward_traced<T: Real>(
    input: &SparseTensor3<T>,
    cfg: &BackboneConfig,
    w: &BackboneWeights<T>,
) -> Result<(Vec<Array3<T>>, PyramidTrace<T>), OpError> {
    let n = cfg.n_levels();
    let mut level_inputs = Vec::with_capacity(n);
    let mut transitions = Vec::with_capacity(n);
    let mut block_traces = Vec::with_capacity(n);
    let mut bottom: Vec<SparseTensor3<T>> = Vec::with_capacity(n);
    let mut cur = input.clone();
    for i in 0..n {
        let g = if i == 0 {
            ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, cur.shape())?
        } else {
            ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Standard, cur.shape())?
        };
        let (t, trace) =
            sparse_conv_forward_traced(&cur, &g, &w.levels[i].transition, ActivationKind::ReLU)?;
        level_inputs.push(cur);
        transitions.push(trace);
        let (out, bt) = run_blocks(t, &w.levels[i].blocks)?;
        block_traces.push(bt);
        bottom.push(out.clone());
        cur = out;
    }

    let (compress_in, topdown) = match cfg.variant {
        PyramidVariant::BottomUp => (bottom.clone(), None),
        PyramidVariant::TopDown => {
            let mut fused: Vec<Option<SparseTensor3<T>>> = vec![None; n];
            fused[n - 1] = Some(bottom[n - 1].clone());
            let mut td = TopDownTrace {
                up_in: Vec::new(),
                up_trace: Vec::new(),
                up_out: Vec::new(),
                proj: Vec::new(),
                cat: Vec::new(),
                fuse_trace: Vec::new(),
            };
            // junctions run deepest-first; traces are stored in that order
            for j in (0..n - 1).rev() {
                let upper = fused[j + 1].as_ref().unwrap().clone();
                let g_up =
                    ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Transposed, upper.shape())?;
                let (up, up_trace) = sparse_conv_forward_traced(
                    &upper,
                    &g_up,
                    &w.topdown[j].up,
                    ActivationKind::ReLU,
                )?;
                let (up_proj, proj) = project_onto(&bottom[j], &up);
                let cat = crate::sparse_ops::concat_channels(&bottom[j], &up_proj)?;
                let g_fuse =
                    ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, cat.shape())?;
                let (f, fuse_trace) = sparse_conv_forward_traced(
                    &cat,
                    &g_fuse,
                    &w.topdown[j].fuse,
                    ActivationKind::ReLU,
                )?;
                fused[j] = Some(f);
                td.up_in.push(upper);
                td.up_trace.push(up_trace);
                td.up_out.push(up);
                td.proj.push(proj);
                td.cat.push(cat);
                td.fuse_trace.push(fuse_trace);
            }
            // reverse so junction j sits at index j
            td.up_in.reverse();
            td.up_trace.reverse();
            td.up_out.reverse();
            td.proj.reverse();
            td.cat.reverse();
            td.fuse_trace.reverse();
            (
                fused.into_iter().map(|f| f.unwrap()).collect::<Vec<_>>(),
                Some(td),
            )
        }
    };

    let mut maps = Vec::with_capacity(n);
    let mut compress_out = Vec::with_capacity(n);
    let mut compress_traces = Vec::with_capacity(n);
    for i in 0..n {
        let (map, out, trace) =
            compress_to_2d_traced(&compress_in[i], &w.compress[i], ActivationKind::Identity)?;
        maps.push(map);
        compress_out.push(out);
        compress_traces.push(trace);
    }

    Ok((
        maps,
        PyramidTrace {
            level_inputs,
            transitions,
            blocks: block_traces,
            bottom,
            topdown,
            compress_in,
            compress_out,
            compress: compress_traces,
        },
    ))
}

/// Untraced forward: just the per-level 2D maps.
pub fn pyramid_forward<T: Real>(
    input: &SparseTensor3<T>,
    cfg: &BackboneConfig,
    w: &BackboneWeights<T>,
) -> Result<Vec<Array3<T>>, OpError> {
    Ok(pyramid_forward_traced(input, cfg, w)?.0)
}

fn add_conv_grads<T: Real>(into: &mut ConvWeights<T>, g: &crate::sparse_ops::ConvGrads<T>) {
    into.w += &g.w;
    into.b += &g.b;
}

/// Analytic backward through the pyramid. `map_grads` holds upstream
/// gradients on the per-level 2D maps. Returns gradients mirroring the
/// weights plus the gradient on the network input's feature rows.
pub fn pyramid_backward<T: Real>(
    cfg: &BackboneConfig,
    w: &BackboneWeights<T>,
    trace: &PyramidTrace<T>,
    map_grads: &[Array3<T>],
) -> (BackboneWeights<T>, Array2<T>) {
    let n = cfg.n_levels();
    let mut grads = w.zeros_like();

    // 2D map gradient -> compress output rows
    let mut g_compress: Vec<Array2<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let out = &trace.compress_out[i];
        let mut g = Array2::zeros((out.active_count(), cfg.map_channels));
        for (row, coord) in out.coords().iter().enumerate() {
            for c in 0..cfg.map_channels {
                g[(row, c)] = map_grads[i][(c, coord.y as usize, coord.z as usize)];
            }
        }
        g_compress.push(g);
    }

    // through the height-collapse convs onto the compress inputs
    let mut g_level: Vec<Array2<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let cg = sparse_conv_backward(
            &trace.compress_in[i],
            &w.compress[i],
            ActivationKind::Identity,
            &trace.compress[i],
            &g_compress[i],
        );
        add_conv_grads(&mut grads.compress[i], &cg);
        g_level.push(cg.input);
    }

    // top-down path: junction j consumes fused[j], feeds bottom[j] and
    // fused[j+1]; ascending order completes each level before use
    let mut g_bottom: Vec<Array2<T>> = match cfg.variant {
        PyramidVariant::BottomUp => g_level,
        PyramidVariant::TopDown => {
            let td = trace.topdown.as_ref().expect("top-down trace present");
            let mut g_fused = g_level;
            let mut g_bottom: Vec<Array2<T>> = (0..n)
                .map(|i| Array2::zeros((trace.bottom[i].active_count(), cfg.channels[i])))
                .collect();
            for j in 0..n - 1 {
                let cg = sparse_conv_backward(
                    &td.cat[j],
                    &w.topdown[j].fuse,
                    ActivationKind::ReLU,
                    &td.fuse_trace[j],
                    &g_fused[j],
                );
                add_conv_grads(&mut grads.topdown[j].fuse, &cg);
                let c_j = cfg.channels[j];
                g_bottom[j] += &cg.input.slice(s![.., ..c_j]);
                // up-branch slice scatters onto the up conv's own rows
                let mut g_up = Array2::zeros((td.up_out[j].active_count(), c_j));
                for (i, p) in td.proj[j].iter().enumerate() {
                    if let Some(r) = p {
                        let mut row = g_up.row_mut(*r);
                        row += &cg.input.slice(s![i, c_j..]);
                    }
                }
                let ug = sparse_conv_backward(
                    &td.up_in[j],
                    &w.topdown[j].up,
                    ActivationKind::ReLU,
                    &td.up_trace[j],
                    &g_up,
                );
                add_conv_grads(&mut grads.topdown[j].up, &ug);
                g_fused[j + 1] += &ug.input;
            }
            let last = g_fused.pop().unwrap();
            g_bottom[n - 1] += &last;
            g_bottom
        }
    };

    // bottom-up path in reverse
    let mut g_input = Array2::zeros((0, 0));
    for i in (0..n).rev() {
        let mut g = std::mem::replace(&mut g_bottom[i], Array2::zeros((0, 0)));
        for (idx, bt) in trace.blocks[i].iter().enumerate().rev() {
            // closing ReLU of the residual block
            let mut d_sum = g.clone();
            for (d, &p) in d_sum.iter_mut().zip(bt.sum_pre.iter()) {
                if p <= T::zero() {
                    *d = T::zero();
                }
            }
            let b = &w.levels[i].blocks[idx];
            let cg2 = sparse_conv_backward(
                &bt.mid,
                &b.conv2,
                ActivationKind::Identity,
                &bt.t2,
                &d_sum,
            );
            let cg1 =
                sparse_conv_backward(&bt.input, &b.conv1, ActivationKind::ReLU, &bt.t1, &cg2.input);
            add_conv_grads(&mut grads.levels[i].blocks[idx].conv2, &cg2);
            add_conv_grads(&mut grads.levels[i].blocks[idx].conv1, &cg1);
            // skip connection adds the masked gradient straight through
            g = cg1.input + d_sum;
        }
        let tg = sparse_conv_backward(
            &trace.level_inputs[i],
            &w.levels[i].transition,
            ActivationKind::ReLU,
            &trace.transitions[i],
            &g,
        );
        add_conv_grads(&mut grads.levels[i].transition, &tg);
        if i == 0 {
            g_input = tg.input;
        } else {
            g_bottom[i - 1] += &tg.input;
        }
    }

    (grads, g_input)
}

// ---------------------------------------------------------------------------
// Dense 2D fusion network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum AlignWeights<T: Real> {
    /// Level already sits on the target grid.
    Identity,
    /// Strided valid conv shrinking a finer level onto the target grid.
    Down { w: Conv2dWeights<T>, stride: usize },
    /// Transposed conv growing a coarser level onto the target grid.
    Up { w: Conv2dWeights<T>, stride: usize },
}

#[derive(Debug, Clone)]
pub struct FusionWeights<T: Real> {
    pub align: Vec<AlignWeights<T>>,
    /// Three k=3 same-padded convs after the channel concat.
    pub trunk: Vec<Conv2dWeights<T>>,
    pub cls: Conv2dWeights<T>,
    pub reg: Conv2dWeights<T>,
    pub dir: Conv2dWeights<T>,
}

/// Kernel sizes that land level grids exactly on the target grid.
fn align_geometry(
    level: (usize, usize),
    target: (usize, usize),
    i: usize,
    t: usize,
) -> (usize, usize, usize) {
    if i < t {
        let s = 1usize << (t - i);
        (level.0 - (target.0 - 1) * s, level.1 - (target.1 - 1) * s, s)
    } else {
        let s = 1usize << (i - t);
        (target.0 - (level.0 - 1) * s, target.1 - (level.1 - 1) * s, s)
    }
}

impl<T: Real> FusionWeights<T> {
    pub fn random<R: Rng>(
        cfg: &BackboneConfig,
        level_shapes: &[(usize, usize, usize)],
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let n = cfg.n_levels();
        let t = cfg.target_level.min(n - 1);
        let target = (level_shapes[t].1, level_shapes[t].2);
        let mc = cfg.map_channels;
        let align = (0..n)
            .map(|i| {
                if i == t {
                    return AlignWeights::Identity;
                }
                let grid = (level_shapes[i].1, level_shapes[i].2);
                let (kh, kw, s) = align_geometry(grid, target, i, t);
                if i < t {
                    AlignWeights::Down {
                        w: Conv2dWeights::random(mc, mc, kh, kw, scale, rng),
                        stride: s,
                    }
                } else {
                    AlignWeights::Up {
                        w: Conv2dWeights::random(mc, mc, kh, kw, scale, rng).with_bias_len(mc),
                        stride: s,
                    }
                }
            })
            .collect();
        let fc = cfg.fusion_channels;
        let trunk = vec![
            Conv2dWeights::random(fc, n * mc, 3, 3, scale, rng),
            Conv2dWeights::random(fc, fc, 3, 3, scale, rng),
            Conv2dWeights::random(fc, fc, 3, 3, scale, rng),
        ];
        let a = cfg.anchors_per_cell;
        Self {
            align,
            trunk,
            cls: Conv2dWeights::random(a, fc, 1, 1, scale, rng),
            reg: Conv2dWeights::random(7 * a, fc, 1, 1, scale, rng),
            dir: Conv2dWeights::random(2 * a, fc, 1, 1, scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            align: self
                .align
                .iter()
                .map(|a| match a {
                    AlignWeights::Identity => AlignWeights::Identity,
                    AlignWeights::Down { w, stride } => AlignWeights::Down {
                        w: conv2d_zeros_like(w),
                        stride: *stride,
                    },
                    AlignWeights::Up { w, stride } => AlignWeights::Up {
                        w: conv2d_zeros_like(w),
                        stride: *stride,
                    },
                })
                .collect(),
            trunk: self.trunk.iter().map(conv2d_zeros_like).collect(),
            cls: conv2d_zeros_like(&self.cls),
            reg: conv2d_zeros_like(&self.reg),
            dir: conv2d_zeros_like(&self.dir),
        }
    }
}

pub struct FusionTrace<T: Real> {
    pub aligned_pre: Vec<Option<Array3<T>>>,
    /// Input map to each trunk conv; index 0 is the channel concat.
    pub trunk_in: Vec<Array3<T>>,
    pub trunk_pre: Vec<Array3<T>>,
    pub trunk_out: Array3<T>,
}

/// Aligns every level map onto the target grid, concatenates channels, runs
/// the trunk, and evaluates the three 1x1 heads (logits, no activation).
pub fn fusion_forward_traced<T: Real>(
    maps: &[Array3<T>],
    fw: &FusionWeights<T>,
) -> Result<(HeadOutput<T>, FusionTrace<T>), Dense2dError> {
    let mut aligned = Vec::with_capacity(maps.len());
    let mut aligned_pre = Vec::with_capacity(maps.len());
    for (m, a) in maps.iter().zip(&fw.align) {
        match a {
            AlignWeights::Identity => {
                aligned.push(m.clone());
                aligned_pre.push(None);
            }
            AlignWeights::Down { w, stride } => {
                let (out, pre) = conv2d(m, w, *stride, Pad2d::Valid, ActivationKind::ReLU)?;
                aligned.push(out);
                aligned_pre.push(Some(pre));
            }
            AlignWeights::Up { w, stride } => {
                let (out, pre) = deconv2d(m, w, *stride, ActivationKind::ReLU)?;
                aligned.push(out);
                aligned_pre.push(Some(pre));
            }
        }
    }
    let views: Vec<_> = aligned.iter().map(|a| a.view()).collect();
    let cat = ndarray::concatenate(Axis(0), &views).expect("aligned maps share the target grid");
    let mut trunk_in = vec![cat];
    let mut trunk_pre = Vec::with_capacity(fw.trunk.len());
    for w in &fw.trunk {
        let (out, pre) = conv2d(
            trunk_in.last().unwrap(),
            w,
            1,
            Pad2d::Same,
            ActivationKind::ReLU,
        )?;
        trunk_pre.push(pre);
        trunk_in.push(out);
    }
    let trunk_out = trunk_in.pop().unwrap();
    let (cls, _) = conv2d(&trunk_out, &fw.cls, 1, Pad2d::Valid, ActivationKind::Identity)?;
    let (reg, _) = conv2d(&trunk_out, &fw.reg, 1, Pad2d::Valid, ActivationKind::Identity)?;
    let (dir, _) = conv2d(&trunk_out, &fw.dir, 1, Pad2d::Valid, ActivationKind::Identity)?;
    Ok((
        HeadOutput { cls, reg, dir },
        FusionTrace {
            aligned_pre,
            trunk_in,
            trunk_pre,
            trunk_out,
        },
    ))
}

pub fn fusion_forward<T: Real>(
    maps: &[Array3<T>],
    fw: &FusionWeights<T>,
) -> Result<HeadOutput<T>, Dense2dError> {
    Ok(fusion_forward_traced(maps, fw)?.0)
}

/// Backward through the fusion network. Returns gradients mirroring the
/// weights and the gradient on each input level map.
pub fn fusion_backward<T: Real>(
    maps: &[Array3<T>],
    fw: &FusionWeights<T>,
    trace: &FusionTrace<T>,
    g_cls: &Array3<T>,
    g_reg: &Array3<T>,
    g_dir: &Array3<T>,
) -> (FusionWeights<T>, Vec<Array3<T>>) {
    let mut grads = fw.zeros_like();
    let (gw_cls, gi_cls) = conv2d_backward(
        &trace.trunk_out,
        &fw.cls,
        1,
        Pad2d::Valid,
        ActivationKind::Identity,
        &trace.trunk_out,
        g_cls,
    );
    let (gw_reg, gi_reg) = conv2d_backward(
        &trace.trunk_out,
        &fw.reg,
        1,
        Pad2d::Valid,
        ActivationKind::Identity,
        &trace.trunk_out,
        g_reg,
    );
    let (gw_dir, gi_dir) = conv2d_backward(
        &trace.trunk_out,
        &fw.dir,
        1,
        Pad2d::Valid,
        ActivationKind::Identity,
        &trace.trunk_out,
        g_dir,
    );
    grads.cls = gw_cls;
    grads.reg = gw_reg;
    grads.dir = gw_dir;
    let mut g = gi_cls + &gi_reg + &gi_dir;
    for i in (0..fw.trunk.len()).rev() {
        let (gw, gi) = conv2d_backward(
            &trace.trunk_in[i],
            &fw.trunk[i],
            1,
            Pad2d::Same,
            ActivationKind::ReLU,
            &trace.trunk_pre[i],
            &g,
        );
        grads.trunk[i] = gw;
        g = gi;
    }
    // split the concat back into per-level slices
    let mc = maps[0].dim().0;
    let mut map_grads = Vec::with_capacity(maps.len());
    for (i, a) in fw.align.iter().enumerate() {
        let slice = g.slice(s![i * mc..(i + 1) * mc, .., ..]).to_owned();
        match a {
            AlignWeights::Identity => map_grads.push(slice),
            AlignWeights::Down { w, stride } => {
                let pre = trace.aligned_pre[i].as_ref().unwrap();
                let (gw, gi) = conv2d_backward(
                    &maps[i],
                    w,
                    *stride,
                    Pad2d::Valid,
                    ActivationKind::ReLU,
                    pre,
                    &slice,
                );
                if let AlignWeights::Down { w: gslot, .. } = &mut grads.align[i] {
                    *gslot = gw;
                }
                map_grads.push(gi);
            }
            AlignWeights::Up { w, stride } => {
                let pre = trace.aligned_pre[i].as_ref().unwrap();
                let (gw, gi) =
                    deconv2d_backward(&maps[i], w, *stride, ActivationKind::ReLU, pre, &slice);
                if let AlignWeights::Up { w: gslot, .. } = &mut grads.align[i] {
                    *gslot = gw;
                }
                map_grads.push(gi);
            }
        }
    }
    (grads, map_grads)
}

/// One-line-per-layer text summary of the graph for documentation.
pub fn describe(cfg: &BackboneConfig, in_shape: (usize, usize, usize)) -> String {
    let shapes = pyramid_shapes(in_shape, cfg.n_levels());
    let mut out = String::new();
    for (i, s) in shapes.iter().enumerate() {
        let kind = if i == 0 {
            "submanifold k3 s1"
        } else {
            "standard k3 s2"
        };
        out.push_str(&format!(
            "level{} transition {} -> c={} grid {}x{}x{}\n",
            i, kind, cfg.channels[i], s.0, s.1, s.2
        ));
        out.push_str(&format!(
            "level{} blocks {} x (submanifold k3 + submanifold k3 + skip)\n",
            i, cfg.blocks_per_level
        ));
        out.push_str(&format!(
            "level{} compress ({},1,1) -> {} ch 2D map {}x{}\n",
            i, s.0, cfg.map_channels, s.1, s.2
        ));
    }
    if cfg.variant == PyramidVariant::TopDown {
        for j in (0..cfg.n_levels() - 1).rev() {
            out.push_str(&format!(
                "junction{} transposed k3 s2 c{}->c{} + concat + submanifold fuse\n",
                j,
                cfg.channels[j + 1],
                cfg.channels[j]
            ));
        }
    }
    let t = cfg.target_level.min(cfg.n_levels() - 1);
    out.push_str(&format!(
        "fusion target grid {}x{}, trunk 3 x conv k3 ({} ch), heads {}A/{}A/{}A\n",
        shapes[t].1,
        shapes[t].2,
        cfg.fusion_channels,
        1,
        7,
        2
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_tensor::Coord3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(variant: PyramidVariant) -> BackboneConfig {
        BackboneConfig {
            variant,
            in_channels: 2,
            channels: vec![3, 4],
            blocks_per_level: 1,
            map_channels: 3,
            fusion_channels: 4,
            anchors_per_cell: 2,
            target_level: 1,
        }
    }

    fn toy_input(rng: &mut ChaCha8Rng) -> SparseTensor3<f64> {
        let shape = (7, 7, 7);
        let mut sites = Vec::new();
        for x in 0..7i32 {
            for y in 0..7i32 {
                for z in 0..7i32 {
                    if rng.gen_bool(0.12) {
                        sites.push((
                            Coord3::new(x, y, z),
                            vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        ));
                    }
                }
            }
        }
        SparseTensor3::from_sites(shape, 2, &sites).unwrap()
    }

    #[test]
    fn full_scale_pyramid_shapes() {
        let shapes = pyramid_shapes((15, 399, 351), 4);
        assert_eq!(
            shapes,
            vec![(15, 399, 351), (7, 199, 175), (3, 99, 87), (1, 49, 43)]
        );
        let cfg = BackboneConfig::full_scale(64);
        let t = cfg.target_level;
        assert_eq!((shapes[t].1, shapes[t].2), (199, 175));
        assert_eq!(199 * 175 * cfg.anchors_per_cell, 139_300);
    }

    #[test]
    fn desk_scale_map_dims() {
        // channels (4,4,4,4), grid 15x31x31 -> maps (31,31),(15,15),(7,7),(3,3)
        let cfg = BackboneConfig {
            variant: PyramidVariant::BottomUp,
            in_channels: 1,
            channels: vec![4, 4, 4, 4],
            blocks_per_level: 1,
            map_channels: 2,
            fusion_channels: 4,
            anchors_per_cell: 2,
            target_level: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = (15, 31, 31);
        let w = BackboneWeights::random(&cfg, shape, 0.2, &mut rng);
        let mut sites = Vec::new();
        for i in 0..25i32 {
            sites.push((Coord3::new(i % 15, (i * 5) % 31, (i * 11) % 31), vec![1.0]));
        }
        sites.sort_by_key(|(c, _)| (c.x, c.y, c.z));
        sites.dedup_by_key(|(c, _)| *c);
        let t = SparseTensor3::from_sites(shape, 1, &sites).unwrap();
        let maps = pyramid_forward(&t, &cfg, &w).unwrap();
        let dims: Vec<(usize, usize)> = maps.iter().map(|m| (m.dim().1, m.dim().2)).collect();
        assert_eq!(dims, vec![(31, 31), (15, 15), (7, 7), (3, 3)]);
    }

    #[test]
    fn empty_input_gives_zero_maps_both_variants() {
        for variant in [PyramidVariant::BottomUp, PyramidVariant::TopDown] {
            let cfg = toy_cfg(variant);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.3, &mut rng);
            let t: SparseTensor3<f64> = SparseTensor3::empty((7, 7, 7), 2);
            let maps = pyramid_forward(&t, &cfg, &w).unwrap();
            for m in maps {
                assert!(m.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn submanifold_blocks_preserve_active_sets() {
        let cfg = toy_cfg(PyramidVariant::BottomUp);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.3, &mut rng);
        let t = toy_input(&mut rng);
        let (_, trace) = pyramid_forward_traced(&t, &cfg, &w).unwrap();
        for i in 0..cfg.n_levels() {
            // block stack output shares the transition output's index
            let level_in_count = trace.blocks[i]
                .first()
                .map(|b| b.input.active_count())
                .unwrap_or(trace.bottom[i].active_count());
            assert_eq!(trace.bottom[i].active_count(), level_in_count);
        }
    }

    #[test]
    fn single_level_topdown_equals_bottom_up() {
        let mut cfg = toy_cfg(PyramidVariant::TopDown);
        cfg.channels = vec![3];
        cfg.target_level = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.3, &mut rng);
        assert!(w.topdown.is_empty());
        let t = toy_input(&mut rng);
        let a = pyramid_forward(&t, &cfg, &w).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.variant = PyramidVariant::BottomUp;
        let b = pyramid_forward(&t, &cfg_b, &w).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let cfg = toy_cfg(PyramidVariant::TopDown);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.3, &mut rng);
        let fw = FusionWeights::random(&cfg, &pyramid_shapes((7, 7, 7), 2), 0.3, &mut rng);
        let t = toy_input(&mut rng);
        let run = || {
            let maps = pyramid_forward(&t, &cfg, &w).unwrap();
            fusion_forward(&maps, &fw).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.reg, b.reg);
        assert_eq!(a.dir, b.dir);
    }

    #[test]
    fn fusion_head_grids_match_target_level() {
        let cfg = toy_cfg(PyramidVariant::TopDown);
        let shapes = pyramid_shapes((7, 7, 7), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.3, &mut rng);
        let fw = FusionWeights::random(&cfg, &shapes, 0.3, &mut rng);
        let t = toy_input(&mut rng);
        let maps = pyramid_forward(&t, &cfg, &w).unwrap();
        let head = fusion_forward(&maps, &fw).unwrap();
        let target = (shapes[1].1, shapes[1].2);
        assert_eq!((head.cls.dim().1, head.cls.dim().2), target);
        assert_eq!(head.cls.dim().0, cfg.anchors_per_cell);
        assert_eq!(head.reg.dim().0, 7 * cfg.anchors_per_cell);
        assert_eq!(head.dir.dim().0, 2 * cfg.anchors_per_cell);
    }

    #[test]
    fn zero_maps_zero_bias_give_zero_heads() {
        let cfg = toy_cfg(PyramidVariant::TopDown);
        let shapes = pyramid_shapes((7, 7, 7), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fw = FusionWeights::random(&cfg, &shapes, 0.3, &mut rng);
        // random() leaves biases zero
        let maps = vec![
            Array3::<f64>::zeros((cfg.map_channels, shapes[0].1, shapes[0].2)),
            Array3::<f64>::zeros((cfg.map_channels, shapes[1].1, shapes[1].2)),
        ];
        let head = fusion_forward(&maps, &fw).unwrap();
        assert!(head.cls.iter().all(|&v| v == 0.0));
        assert!(head.reg.iter().all(|&v| v == 0.0));
        assert!(head.dir.iter().all(|&v| v == 0.0));
    }

    /// Scalar probe L = sum of squares of every head output; analytic
    /// gradients flow through fusion and pyramid and are checked against
    /// central finite differences on sampled weights.
    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = toy_cfg(PyramidVariant::TopDown);
        let shapes = pyramid_shapes((7, 7, 7), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = BackboneWeights::random(&cfg, (7, 7, 7), 0.4, &mut rng);
        let fw = FusionWeights::random(&cfg, &shapes, 0.4, &mut rng);
        let t = toy_input(&mut rng);

        let loss = |w: &BackboneWeights<f64>, fw: &FusionWeights<f64>| -> f64 {
            let maps = pyramid_forward(&t, &cfg, w).unwrap();
            let head = fusion_forward(&maps, fw).unwrap();
            head.cls.iter().map(|v| v * v).sum::<f64>()
                + head.reg.iter().map(|v| v * v).sum::<f64>()
                + head.dir.iter().map(|v| v * v).sum::<f64>()
        };

        let (maps, ptrace) = pyramid_forward_traced(&t, &cfg, &w).unwrap();
        let (head, ftrace) = fusion_forward_traced(&maps, &fw).unwrap();
        let g_cls = head.cls.mapv(|v| 2.0 * v);
        let g_reg = head.reg.mapv(|v| 2.0 * v);
        let g_dir = head.dir.mapv(|v| 2.0 * v);
        let (fgrads, map_grads) = fusion_backward(&maps, &fw, &ftrace, &g_cls, &g_reg, &g_dir);
        let (bgrads, _) = pyramid_backward(&cfg, &w, &ptrace, &map_grads);

        let eps = 1e-5;
        let check = |got: f64, want: f64| {
            let denom = want.abs().max(got.abs()).max(1e-4);
            assert!(
                (got - want).abs() / denom < 1e-6,
                "grad mismatch: analytic {got}, fd {want}"
            );
        };

        // sparse side: transition, block, top-down, compress weights
        {
            let mut wp = w.clone();
            let idx = (0, 1, 0, 2);
            let base = wp.levels[0].transition.w[[idx.0, 13, idx.3]];
            wp.levels[0].transition.w[[idx.0, 13, idx.3]] = base + eps;
            let lp = loss(&wp, &fw);
            wp.levels[0].transition.w[[idx.0, 13, idx.3]] = base - eps;
            let lm = loss(&wp, &fw);
            check(bgrads.levels[0].transition.w[[idx.0, 13, idx.3]], (lp - lm) / (2.0 * eps));
        }
        {
            let mut wp = w.clone();
            let base = wp.levels[1].blocks[0].conv1.w[[1, 4, 2]];
            wp.levels[1].blocks[0].conv1.w[[1, 4, 2]] = base + eps;
            let lp = loss(&wp, &fw);
            wp.levels[1].blocks[0].conv1.w[[1, 4, 2]] = base - eps;
            let lm = loss(&wp, &fw);
            check(bgrads.levels[1].blocks[0].conv1.w[[1, 4, 2]], (lp - lm) / (2.0 * eps));
        }
        {
            let mut wp = w.clone();
            let base = wp.topdown[0].up.w[[2, 20, 1]];
            wp.topdown[0].up.w[[2, 20, 1]] = base + eps;
            let lp = loss(&wp, &fw);
            wp.topdown[0].up.w[[2, 20, 1]] = base - eps;
            let lm = loss(&wp, &fw);
            check(bgrads.topdown[0].up.w[[2, 20, 1]], (lp - lm) / (2.0 * eps));
        }
        {
            let mut wp = w.clone();
            let base = wp.topdown[0].fuse.b[1];
            wp.topdown[0].fuse.b[1] = base + eps;
            let lp = loss(&wp, &fw);
            wp.topdown[0].fuse.b[1] = base - eps;
            let lm = loss(&wp, &fw);
            check(bgrads.topdown[0].fuse.b[1], (lp - lm) / (2.0 * eps));
        }
        {
            let mut wp = w.clone();
            let base = wp.compress[1].w[[3, 0, 2]];
            wp.compress[1].w[[3, 0, 2]] = base + eps;
            let lp = loss(&wp, &fw);
            wp.compress[1].w[[3, 0, 2]] = base - eps;
            let lm = loss(&wp, &fw);
            check(bgrads.compress[1].w[[3, 0, 2]], (lp - lm) / (2.0 * eps));
        }
        // dense side: align, trunk, head weights
        {
            let mut fp = fw.clone();
            if let AlignWeights::Down { w: aw, .. } = &mut fp.align[0] {
                let base = aw.w[[1, 2, 1, 2]];
                aw.w[[1, 2, 1, 2]] = base + eps;
                let lp = loss(&w, &fp);
                if let AlignWeights::Down { w: aw, .. } = &mut fp.align[0] {
                    aw.w[[1, 2, 1, 2]] = base - eps;
                }
                let lm = loss(&w, &fp);
                if let AlignWeights::Down { w: gw, .. } = &fgrads.align[0] {
                    check(gw.w[[1, 2, 1, 2]], (lp - lm) / (2.0 * eps));
                }
            } else {
                panic!("level 0 should downsample");
            }
        }
        {
            let mut fp = fw.clone();
            let base = fp.trunk[1].w[[2, 3, 0, 1]];
            fp.trunk[1].w[[2, 3, 0, 1]] = base + eps;
            let lp = loss(&w, &fp);
            fp.trunk[1].w[[2, 3, 0, 1]] = base - eps;
            let lm = loss(&w, &fp);
            check(fgrads.trunk[1].w[[2, 3, 0, 1]], (lp - lm) / (2.0 * eps));
        }
        {
            let mut fp = fw.clone();
            let base = fp.reg.w[[5, 2, 0, 0]];
            fp.reg.w[[5, 2, 0, 0]] = base + eps;
            let lp = loss(&w, &fp);
            fp.reg.w[[5, 2, 0, 0]] = base - eps;
            let lm = loss(&w, &fp);
            check(fgrads.reg.w[[5, 2, 0, 0]], (lp - lm) / (2.0 * eps));
        }
        {
            let mut fp = fw.clone();
            let base = fp.cls.b[1];
            fp.cls.b[1] = base + eps;
            let lp = loss(&w, &fp);
            fp.cls.b[1] = base - eps;
            let lm = loss(&w, &fp);
            check(fgrads.cls.b[1], (lp - lm) / (2.0 * eps));
        }
    }

    #[test]
    fn describe_lists_every_level() {
        let cfg = BackboneConfig::full_scale(64);
        let text = describe(&cfg, (15, 399, 351));
        assert!(text.contains("level0"));
        assert!(text.contains("level3"));
        assert!(text.contains("junction0"));
        assert!(text.contains("199x175"));
    }
}
