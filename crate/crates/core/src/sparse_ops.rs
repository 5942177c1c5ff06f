//! Gather-GEMM-scatter sparse convolution kernels.
//!
//! The forward pass follows the output-feature-matrix generation loop: for
//! each kernel offset, gather the paired input rows into a staging matrix,
//! multiply by that offset's weight slice, and scatter-add into the output
//! rows; then add bias and apply the activation. The dense brute-force
//! oracle and the analytic backward pass live here too.
//!
//! Accumulation order is fixed (offsets row-major, pairs in rulebook order)
//! so repeated runs are bit-identical.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use thiserror::Error;

use crate::rulebook::{build_rulebook, ConvGeometry, ConvMode, GeometryError, RuleBook};
use crate::scalar::Real;
use crate::sparse_tensor::{SparseTensor3, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Identity,
}

impl ActivationKind {
    fn apply<T: Real>(&self, m: &mut Array2<T>) {
        if let ActivationKind::ReLU = self {
            m.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
    }
}

/// Weight tensor `W` of shape c_in x (kh*kw*kl) x c_out plus bias `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T: Real> {
    pub w: Array3<T>,
    pub b: Array1<T>,
}

impl<T: Real> ConvWeights<T> {
    pub fn zeros(c_in: usize, kernel_volume: usize, c_out: usize) -> Self {
        ConvWeights {
            w: Array3::zeros((c_in, kernel_volume, c_out)),
            b: Array1::zeros(c_out),
        }
    }

    pub fn constant(c_in: usize, kernel_volume: usize, c_out: usize, v: T) -> Self {
        ConvWeights {
            w: Array3::from_elem((c_in, kernel_volume, c_out), v),
            b: Array1::zeros(c_out),
        }
    }

    /// Uniform init in [-scale, scale], drawn in a fixed order.
    pub fn random<R: Rng>(
        c_in: usize,
        kernel_volume: usize,
        c_out: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = Array3::zeros((c_in, kernel_volume, c_out));
        for v in w.iter_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-scale..scale));
        }
        ConvWeights {
            w,
            b: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.w.dim().2
    }

    pub fn kernel_volume(&self) -> usize {
        self.w.dim().1
    }
}

#[derive(Debug, Error)]
pub enum OpError {
    #[error("channel mismatch: tensor has {got}, weights expect {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("weight kernel volume {got} does not match geometry volume {expected}")]
    KernelVolumeMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input height {got} does not match compression kernel {expected}")]
    HeightMismatch { got: usize, expected: usize },
}

/// Forward-pass record kept for the backward pass.
pub struct ConvTrace<T: Real> {
    pub rulebook: RuleBook,
    /// Output matrix after bias, before activation.
    pub preact: Array2<T>,
}

fn check_weights<T: Real>(
    t: &SparseTensor3<T>,
    g: &ConvGeometry,
    w: &ConvWeights<T>,
) -> Result<(), OpError> {
    if t.channels() != w.c_in() {
        return Err(OpError::ChannelMismatch {
            got: t.channels(),
            expected: w.c_in(),
        });
    }
    if w.kernel_volume() != g.kernel_volume() {
        return Err(OpError::KernelVolumeMismatch {
            got: w.kernel_volume(),
            expected: g.kernel_volume(),
        });
    }
    g.validate()?;
    Ok(())
}

/// Sparse convolution (any mode) against a prebuilt rulebook.
pub fn forward_with_rulebook<T: Real>(
    t: &SparseTensor3<T>,
    rb: &RuleBook,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<(SparseTensor3<T>, Array2<T>), OpError> {
    let c_out = w.c_out();
    let mut m_out: Array2<T> = Array2::zeros((rb.out_count(), c_out));
    let m_in = t.features();
    for (offset_id, list) in rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        // gather
        let mut staged: Array2<T> = Array2::zeros((list.len(), t.channels()));
        for (i, &(in_row, _)) in list.iter().enumerate() {
            staged.row_mut(i).assign(&m_in.row(in_row as usize));
        }
        // one GEMM per offset
        let w_slice = w.w.index_axis(Axis(1), offset_id);
        let product = staged.dot(&w_slice);
        // scatter-add in pair order
        for (i, &(_, out_row)) in list.iter().enumerate() {
            let mut row = m_out.row_mut(out_row as usize);
            row += &product.row(i);
        }
    }
    for mut row in m_out.rows_mut() {
        row += &w.b;
    }
    let preact = m_out.clone();
    act.apply(&mut m_out);
    let out = SparseTensor3::from_parts(rb.out_shape, rb.out_coords.clone(), m_out)?;
    Ok((out, preact))
}

/// Standard or submanifold sparse convolution forward pass.
pub fn sparse_conv_forward<T: Real>(
    t: &SparseTensor3<T>,
    g: &ConvGeometry,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<SparseTensor3<T>, OpError> {
    Ok(sparse_conv_forward_traced(t, g, w, act)?.0)
}

/// Forward pass that also returns the trace needed by the backward pass.
pub fn sparse_conv_forward_traced<T: Real>(
    t: &SparseTensor3<T>,
    g: &ConvGeometry,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<(SparseTensor3<T>, ConvTrace<T>), OpError> {
    check_weights(t, g, w)?;
    let rb = build_rulebook(t, g);
    let (out, preact) = forward_with_rulebook(t, &rb, w, act)?;
    Ok((out, ConvTrace { rulebook: rb, preact }))
}

/// Transposed (deconvolution) forward: the adjoint gather-GEMM-scatter.
pub fn sparse_deconv_forward<T: Real>(
    t: &SparseTensor3<T>,
    g: &ConvGeometry,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<SparseTensor3<T>, OpError> {
    debug_assert_eq!(g.mode, ConvMode::Transposed);
    sparse_conv_forward(t, g, w, act)
}

/// Gradients of a traced forward pass.
pub struct ConvGrads<T: Real> {
    pub w: Array3<T>,
    pub b: Array1<T>,
    /// Gradient w.r.t. the input feature matrix (a_in x c_in).
    pub input: Array2<T>,
}

/// Analytic backward pass. `grad_out` holds upstream gradients on the active
/// output rows (a_out x c_out). The ReLU subgradient at 0 is 0.
pub fn sparse_conv_backward<T: Real>(
    t: &SparseTensor3<T>,
    w: &ConvWeights<T>,
    act: ActivationKind,
    trace: &ConvTrace<T>,
    grad_out: &Array2<T>,
) -> ConvGrads<T> {
    let rb = &trace.rulebook;
    let mut d_pre = grad_out.clone();
    if act == ActivationKind::ReLU {
        for (d, &p) in d_pre.iter_mut().zip(trace.preact.iter()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
    }
    let mut grad_w: Array3<T> = Array3::zeros(w.w.dim());
    let grad_b: Array1<T> = d_pre.sum_axis(Axis(0));
    let mut grad_in: Array2<T> = Array2::zeros((t.active_count(), t.channels()));
    let m_in = t.features();
    for (offset_id, list) in rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let mut staged_in: Array2<T> = Array2::zeros((list.len(), t.channels()));
        let mut staged_up: Array2<T> = Array2::zeros((list.len(), grad_out.ncols()));
        for (i, &(in_row, out_row)) in list.iter().enumerate() {
            staged_in.row_mut(i).assign(&m_in.row(in_row as usize));
            staged_up.row_mut(i).assign(&d_pre.row(out_row as usize));
        }
        let gw = staged_in.t().dot(&staged_up);
        grad_w.index_axis_mut(Axis(1), offset_id).assign(&gw);
        let w_slice = w.w.index_axis(Axis(1), offset_id);
        let gi = staged_up.dot(&w_slice.t());
        for (i, &(in_row, _)) in list.iter().enumerate() {
            let mut row = grad_in.row_mut(in_row as usize);
            row += &gi.row(i);
        }
    }
    ConvGrads {
        w: grad_w,
        b: grad_b,
        input: grad_in,
    }
}

/// Naive full-grid convolution used as ground truth. Every site's stored
/// value (zero if inactive) is treated as input; bias is added everywhere
/// and the activation applied everywhere.
pub fn dense_conv3d_oracle<T: Real>(
    arr: &Array4<T>,
    g: &ConvGeometry,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Array4<T> {
    let (c_in, h_in, w_in, l_in) = arr.dim();
    assert_eq!((h_in, w_in, l_in), g.in_shape);
    assert_eq!(c_in, w.c_in());
    let (oh, ow, ol) = g.output_shape().expect("valid geometry");
    let c_out = w.c_out();
    let (kh, kw, kl) = g.kernel;
    let (sh, sw, sl) = g.stride;
    let mut out: Array4<T> = Array4::zeros((c_out, oh, ow, ol));
    for ox in 0..oh {
        for oy in 0..ow {
            for oz in 0..ol {
                for i in 0..kh {
                    for j in 0..kw {
                        for k in 0..kl {
                            // input coordinate contributing at this offset
                            let (px, py, pz) = match g.mode {
                                ConvMode::Standard => {
                                    (ox * sh + i, oy * sw + j, oz * sl + k)
                                }
                                ConvMode::Submanifold => {
                                    let px = ox as i64 + i as i64 - ((kh - 1) / 2) as i64;
                                    let py = oy as i64 + j as i64 - ((kw - 1) / 2) as i64;
                                    let pz = oz as i64 + k as i64 - ((kl - 1) / 2) as i64;
                                    if px < 0
                                        || py < 0
                                        || pz < 0
                                        || px >= h_in as i64
                                        || py >= w_in as i64
                                        || pz >= l_in as i64
                                    {
                                        continue;
                                    }
                                    (px as usize, py as usize, pz as usize)
                                }
                                ConvMode::Transposed => {
                                    // o = p*s + offset
                                    let px = ox as i64 - i as i64;
                                    let py = oy as i64 - j as i64;
                                    let pz = oz as i64 - k as i64;
                                    if px < 0
                                        || py < 0
                                        || pz < 0
                                        || px % sh as i64 != 0
                                        || py % sw as i64 != 0
                                        || pz % sl as i64 != 0
                                    {
                                        continue;
                                    }
                                    let (px, py, pz) = (
                                        (px / sh as i64) as usize,
                                        (py / sw as i64) as usize,
                                        (pz / sl as i64) as usize,
                                    );
                                    if px >= h_in || py >= w_in || pz >= l_in {
                                        continue;
                                    }
                                    (px, py, pz)
                                }
                            };
                            let off = g.offset_id((i, j, k));
                            for co in 0..c_out {
                                let mut acc = T::zero();
                                for ci in 0..c_in {
                                    acc += arr[(ci, px, py, pz)] * w.w[(ci, off, co)];
                                }
                                out[(co, ox, oy, oz)] += acc;
                            }
                        }
                    }
                }
                for co in 0..c_out {
                    out[(co, ox, oy, oz)] += w.b[co];
                    if act == ActivationKind::ReLU && out[(co, ox, oy, oz)] < T::zero() {
                        out[(co, ox, oy, oz)] = T::zero();
                    }
                }
            }
        }
    }
    out
}

/// Element-wise sum of two tensors sharing the same active-site index.
pub fn residual_add<T: Real>(
    a: &SparseTensor3<T>,
    b: &SparseTensor3<T>,
) -> Result<SparseTensor3<T>, OpError> {
    if !a.same_index(b) || a.channels() != b.channels() {
        return Err(OpError::Tensor(TensorError::IndexMismatch));
    }
    let features = a.features() + b.features();
    Ok(SparseTensor3::from_parts(a.shape(), a.coords().to_vec(), features)?)
}

/// Per-site channel concatenation of two tensors sharing the same index.
pub fn concat_channels<T: Real>(
    a: &SparseTensor3<T>,
    b: &SparseTensor3<T>,
) -> Result<SparseTensor3<T>, OpError> {
    if !a.same_index(b) {
        return Err(OpError::Tensor(TensorError::IndexMismatch));
    }
    let mut features = Array2::zeros((a.active_count(), a.channels() + b.channels()));
    features
        .slice_mut(ndarray::s![.., ..a.channels()])
        .assign(a.features());
    features
        .slice_mut(ndarray::s![.., a.channels()..])
        .assign(b.features());
    Ok(SparseTensor3::from_parts(a.shape(), a.coords().to_vec(), features)?)
}

/// Collapses the height axis with a (d,1,1)/(d,1,1) sparse conv, then
/// densifies the single remaining slice into a c_out x w x l map.
pub fn compress_to_2d<T: Real>(
    t: &SparseTensor3<T>,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<Array3<T>, OpError> {
    let (h, gw, gl) = t.shape();
    let d = t.shape().0;
    if w.kernel_volume() != d {
        return Err(OpError::HeightMismatch {
            got: w.kernel_volume(),
            expected: h,
        });
    }
    let g = ConvGeometry::new((d, 1, 1), (d, 1, 1), ConvMode::Standard, t.shape())?;
    let (out, _) = forward_with_rulebook(t, &build_rulebook(t, &g), w, act)?;
    let mut map: Array3<T> = Array3::zeros((w.c_out(), gw, gl));
    for (row, coord) in out.coords().iter().enumerate() {
        for c in 0..w.c_out() {
            map[(c, coord.y as usize, coord.z as usize)] = out.features()[(row, c)];
        }
    }
    Ok(map)
}

/// Traced variant of [`compress_to_2d`] for training.
pub fn compress_to_2d_traced<T: Real>(
    t: &SparseTensor3<T>,
    w: &ConvWeights<T>,
    act: ActivationKind,
) -> Result<(Array3<T>, SparseTensor3<T>, ConvTrace<T>), OpError> {
    let d = t.shape().0;
    if w.kernel_volume() != d {
        return Err(OpError::HeightMismatch {
            got: w.kernel_volume(),
            expected: d,
        });
    }
    let g = ConvGeometry::new((d, 1, 1), (d, 1, 1), ConvMode::Standard, t.shape())?;
    let (out, trace) = sparse_conv_forward_traced(t, &g, w, act)?;
    let (_, gw, gl) = t.shape();
    let mut map: Array3<T> = Array3::zeros((w.c_out(), gw, gl));
    for (row, coord) in out.coords().iter().enumerate() {
        for c in 0..w.c_out() {
            map[(c, coord.y as usize, coord.z as usize)] = out.features()[(row, c)];
        }
    }
    Ok((map, out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_tensor::Coord3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(
        shape: (usize, usize, usize),
        channels: usize,
        density: f64,
        rng: &mut ChaCha8Rng,
    ) -> SparseTensor3<f64> {
        let mut sites = Vec::new();
        for x in 0..shape.0 as i32 {
            for y in 0..shape.1 as i32 {
                for z in 0..shape.2 as i32 {
                    if rng.gen_bool(density) {
                        let row: Vec<f64> =
                            (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        sites.push((Coord3::new(x, y, z), row));
                    }
                }
            }
        }
        SparseTensor3::from_sites(shape, channels, &sites).unwrap()
    }

    fn assert_matches_oracle(
        t: &SparseTensor3<f64>,
        g: &ConvGeometry,
        w: &ConvWeights<f64>,
        act: ActivationKind,
        tol: f64,
    ) {
        let sparse = sparse_conv_forward(t, g, w, act).unwrap();
        let oracle = dense_conv3d_oracle(&t.to_dense(), g, w, act);
        for (row, coord) in sparse.coords().iter().enumerate() {
            for c in 0..sparse.channels() {
                let got = sparse.features()[(row, c)];
                let want = oracle[(c, coord.x as usize, coord.y as usize, coord.z as usize)];
                assert!(
                    (got - want).abs() <= tol,
                    "site {coord:?} ch {c}: sparse {got} oracle {want}"
                );
            }
        }
    }

    #[test]
    fn single_input_all_ones_kernel() {
        let t = SparseTensor3::from_sites((5, 5, 5), 1, &[(Coord3::new(2, 2, 2), vec![3.0])])
            .unwrap();
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (5, 5, 5)).unwrap();
        let w = ConvWeights::constant(1, 27, 1, 1.0);
        let out = sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU).unwrap();
        assert_eq!(out.active_count(), 27);
        assert!(out.features().iter().all(|&v: &f64| (v - 3.0).abs() < 1e-12));
        assert_matches_oracle(&t, &g, &w, ActivationKind::ReLU, 1e-12);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let t = SparseTensor3::<f64>::empty((5, 5, 5), 2);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (5, 5, 5)).unwrap();
        let w = ConvWeights::constant(2, 27, 3, 0.5);
        let out = sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU).unwrap();
        assert_eq!(out.active_count(), 0);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let t = SparseTensor3::<f64>::empty((5, 5, 5), 2);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (5, 5, 5)).unwrap();
        let w = ConvWeights::constant(3, 27, 1, 0.5);
        assert!(matches!(
            sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU),
            Err(OpError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn strided_multichannel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let t = random_tensor((9, 9, 9), 2, 0.1, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Standard, (9, 9, 9)).unwrap();
        let mut w = ConvWeights::random(2, 27, 3, 0.7, &mut rng);
        for v in w.b.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        // bias everywhere in the oracle vs only-active in sparse: compare
        // at sparse-active sites only, which is the module contract
        assert_matches_oracle(&t, &g, &w, ActivationKind::ReLU, 1e-9);
        assert_matches_oracle(&t, &g, &w, ActivationKind::Identity, 1e-9);
    }

    #[test]
    fn submanifold_matches_oracle_and_preserves_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = random_tensor((8, 8, 8), 3, 0.15, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, (8, 8, 8)).unwrap();
        let w = ConvWeights::random(3, 27, 2, 0.7, &mut rng);
        let out = sparse_conv_forward(&t, &g, &w, ActivationKind::Identity).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert_matches_oracle(&t, &g, &w, ActivationKind::Identity, 1e-9);
    }

    #[test]
    fn oracle_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor((4, 4, 4), 2, 0.3, &mut rng);
        let g = ConvGeometry::new((1, 1, 1), (1, 1, 1), ConvMode::Standard, (4, 4, 4)).unwrap();
        let mut w = ConvWeights::zeros(2, 1, 2);
        w.w[(0, 0, 0)] = 1.0;
        w.w[(1, 0, 1)] = 1.0;
        let arr = t.to_dense();
        let out = dense_conv3d_oracle(&arr, &g, &w, ActivationKind::Identity);
        assert_eq!(out, arr);
    }

    #[test]
    fn oracle_bias_only_differs_from_sparse() {
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (5, 5, 5)).unwrap();
        let mut w = ConvWeights::zeros(1, 27, 1);
        w.b[0] = 0.7;
        let zero = Array4::<f64>::zeros((1, 5, 5, 5));
        let out = dense_conv3d_oracle(&zero, &g, &w, ActivationKind::ReLU);
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        // the sparse op on an empty tensor stays empty
        let t = SparseTensor3::<f64>::empty((5, 5, 5), 1);
        let sp = sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU).unwrap();
        assert_eq!(sp.active_count(), 0);
    }

    #[test]
    fn deconv_single_input_spreads() {
        let t = SparseTensor3::from_sites((4, 4, 4), 1, &[(Coord3::new(0, 0, 0), vec![2.5])])
            .unwrap();
        let g = ConvGeometry::new((2, 2, 2), (2, 2, 2), ConvMode::Transposed, (4, 4, 4)).unwrap();
        let w = ConvWeights::constant(1, 8, 1, 1.0);
        let out = sparse_deconv_forward(&t, &g, &w, ActivationKind::Identity).unwrap();
        assert_eq!(out.active_count(), 8);
        assert!(out.features().iter().all(|&v: &f64| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn deconv_empty_input() {
        let t = SparseTensor3::<f64>::empty((4, 4, 4), 1);
        let g = ConvGeometry::new((2, 2, 2), (2, 2, 2), ConvMode::Transposed, (4, 4, 4)).unwrap();
        let w = ConvWeights::constant(1, 8, 1, 1.0);
        let out = sparse_deconv_forward(&t, &g, &w, ActivationKind::Identity).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn conv_then_deconv_support_contains_original() {
        let t = SparseTensor3::from_sites((4, 4, 4), 1, &[(Coord3::new(2, 3, 1), vec![1.0])])
            .unwrap();
        let g = ConvGeometry::new((2, 2, 2), (2, 2, 2), ConvMode::Standard, (4, 4, 4)).unwrap();
        let w = ConvWeights::constant(1, 8, 1, 1.0);
        let down = sparse_conv_forward(&t, &g, &w, ActivationKind::Identity).unwrap();
        let gt =
            ConvGeometry::new((2, 2, 2), (2, 2, 2), ConvMode::Transposed, down.shape()).unwrap();
        let up = sparse_deconv_forward(&down, &gt, &w, ActivationKind::Identity).unwrap();
        assert!(up.row_of(Coord3::new(2, 3, 1)).is_some());
    }

    #[test]
    fn adjointness_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = random_tensor((7, 7, 7), 2, 0.15, &mut rng);
            let g = ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Standard, (7, 7, 7)).unwrap();
            let w = ConvWeights::random(2, 27, 3, 0.8, &mut rng);
            let cx = sparse_conv_forward(&x, &g, &w, ActivationKind::Identity).unwrap();
            // y random on cx's index
            let mut y = cx.clone();
            for v in y.features_mut().iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            // deconv weights = per-offset transpose
            let mut wt = ConvWeights::zeros(3, 27, 2);
            for off in 0..27 {
                for ci in 0..2 {
                    for co in 0..3 {
                        wt.w[(co, off, ci)] = w.w[(ci, off, co)];
                    }
                }
            }
            let gt =
                ConvGeometry::new((3, 3, 3), (2, 2, 2), ConvMode::Transposed, cx.shape()).unwrap();
            let dy = sparse_deconv_forward(&y, &gt, &wt, ActivationKind::Identity).unwrap();
            let lhs: f64 = cx
                .coords()
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    let yr = y.row_of(*c).unwrap();
                    cx.feature_row(r).dot(&y.feature_row(yr))
                })
                .sum();
            let rhs: f64 = x
                .coords()
                .iter()
                .enumerate()
                .map(|(r, c)| match dy.row_of(*c) {
                    Some(dr) => x.feature_row(r).dot(&dy.feature_row(dr)),
                    None => 0.0,
                })
                .sum();
            assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn residual_add_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor((5, 5, 5), 2, 0.2, &mut rng);
        let doubled = residual_add(&a, &a).unwrap();
        for (x, y) in doubled.features().iter().zip(a.features().iter()) {
            assert_eq!(*x, 2.0 * *y);
        }
        let cat = concat_channels(&a, &a).unwrap();
        assert_eq!(cat.channels(), 4);
        assert_eq!(cat.features().column(0), cat.features().column(2));

        let b = random_tensor((5, 5, 5), 2, 0.2, &mut rng);
        if !a.same_index(&b) {
            assert!(residual_add(&a, &b).is_err());
            assert!(concat_channels(&a, &b).is_err());
        }
    }

    #[test]
    fn linearity_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_tensor((6, 6, 6), 2, 0.2, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, (6, 6, 6)).unwrap();
        let w = ConvWeights::random(2, 27, 2, 0.8, &mut rng);
        let mut a2 = a.clone();
        a2.features_mut().mapv_inplace(|v| 3.0 * v);
        let c1 = sparse_conv_forward(&a, &g, &w, ActivationKind::Identity).unwrap();
        let c2 = sparse_conv_forward(&a2, &g, &w, ActivationKind::Identity).unwrap();
        for (x, y) in c2.features().iter().zip(c1.features().iter()) {
            assert!((x - 3.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn compress_single_slice_identity() {
        let t = SparseTensor3::from_sites((1, 4, 4), 1, &[(Coord3::new(0, 1, 2), vec![5.0])])
            .unwrap();
        let mut w = ConvWeights::zeros(1, 1, 1);
        w.w[(0, 0, 0)] = 1.0;
        let map = compress_to_2d(&t, &w, ActivationKind::Identity).unwrap();
        assert_eq!(map[(0, 1, 2)], 5.0);
        assert_eq!(map.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn compress_sums_over_height() {
        let d = 4;
        let sites: Vec<_> = (0..d)
            .map(|x| (Coord3::new(x as i32, 2, 3), vec![1.0]))
            .collect();
        let t = SparseTensor3::from_sites((d, 5, 5), 1, &sites).unwrap();
        let w = ConvWeights::constant(1, d, 1, 1.0);
        let map = compress_to_2d(&t, &w, ActivationKind::Identity).unwrap();
        assert_eq!(map[(0, 2, 3)], d as f64);
        assert_eq!(map.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn compress_paper_height() {
        let t = SparseTensor3::from_sites((15, 6, 6), 1, &[(Coord3::new(7, 1, 1), vec![1.0])])
            .unwrap();
        let w = ConvWeights::constant(1, 15, 2, 1.0);
        let map = compress_to_2d(&t, &w, ActivationKind::Identity).unwrap();
        assert_eq!(map.dim(), (2, 6, 6));
        assert_eq!(map[(0, 1, 1)], 1.0);
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor((5, 5, 5), 2, 0.2, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (5, 5, 5)).unwrap();
        let w = ConvWeights::random(2, 27, 2, 0.8, &mut rng);
        let (out, trace) =
            sparse_conv_forward_traced(&t, &g, &w, ActivationKind::Identity).unwrap();
        let up = Array2::zeros((out.active_count(), 2));
        let grads = sparse_conv_backward(&t, &w, ActivationKind::Identity, &trace, &up);
        assert!(grads.w.iter().all(|&v| v == 0.0));
        assert!(grads.b.iter().all(|&v| v == 0.0));
        assert!(grads.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_pair_chain_rule() {
        // one active input, k=1: out = in * w + b, so with upstream u:
        // grad_w = in*u, grad_in = w*u, grad_b = u
        let t = SparseTensor3::from_sites((3, 3, 3), 1, &[(Coord3::new(1, 1, 1), vec![2.0])])
            .unwrap();
        let g = ConvGeometry::new((1, 1, 1), (1, 1, 1), ConvMode::Standard, (3, 3, 3)).unwrap();
        let mut w = ConvWeights::zeros(1, 1, 1);
        w.w[(0, 0, 0)] = 0.5;
        let (_, trace) = sparse_conv_forward_traced(&t, &g, &w, ActivationKind::Identity).unwrap();
        let up = Array2::from_elem((1, 1), 3.0);
        let grads = sparse_conv_backward(&t, &w, ActivationKind::Identity, &trace, &up);
        assert_eq!(grads.w[(0, 0, 0)], 6.0);
        assert_eq!(grads.input[(0, 0)], 1.5);
        assert_eq!(grads.b[0], 3.0);
    }

    /// Central-difference check of the full backward pass.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..5 {
            let t = random_tensor((6, 6, 6), 2, 0.15, &mut rng);
            if t.is_empty() {
                continue;
            }
            let g = if case % 2 == 0 {
                ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (6, 6, 6)).unwrap()
            } else {
                ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Submanifold, (6, 6, 6)).unwrap()
            };
            let mut w = ConvWeights::random(2, 27, 2, 0.8, &mut rng);
            for v in w.b.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            let act = if case % 2 == 0 {
                ActivationKind::ReLU
            } else {
                ActivationKind::Identity
            };
            let (out, trace) = sparse_conv_forward_traced(&t, &g, &w, act).unwrap();
            // scalar objective: weighted sum of outputs
            let mut up = Array2::zeros((out.active_count(), 2));
            for v in up.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let grads = sparse_conv_backward(&t, &w, act, &trace, &up);
            let objective = |t: &SparseTensor3<f64>, w: &ConvWeights<f64>| -> f64 {
                let o = sparse_conv_forward(t, &g, w, act).unwrap();
                o.features().iter().zip(up.iter()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            // a few random W entries
            for _ in 0..5 {
                let idx = (
                    rng.gen_range(0..2),
                    rng.gen_range(0..27),
                    rng.gen_range(0..2),
                );
                let mut wp = w.clone();
                wp.w[idx] += h;
                let mut wm = w.clone();
                wm.w[idx] -= h;
                let fd = (objective(&t, &wp) - objective(&t, &wm)) / (2.0 * h);
                let an = grads.w[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "W{idx:?}: fd {fd} analytic {an}"
                );
            }
            // input feature entries
            for _ in 0..5 {
                let idx = (rng.gen_range(0..t.active_count()), rng.gen_range(0..2));
                let mut tp = t.clone();
                tp.features_mut()[idx] += h;
                let mut tm = t.clone();
                tm.features_mut()[idx] -= h;
                let fd = (objective(&tp, &w) - objective(&tm, &w)) / (2.0 * h);
                let an = grads.input[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input{idx:?}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = random_tensor((8, 8, 8), 3, 0.2, &mut rng);
        let g = ConvGeometry::new((3, 3, 3), (1, 1, 1), ConvMode::Standard, (8, 8, 8)).unwrap();
        let w = ConvWeights::random(3, 27, 3, 0.8, &mut rng);
        let a = sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU).unwrap();
        let b = sparse_conv_forward(&t, &g, &w, ActivationKind::ReLU).unwrap();
        assert_eq!(a, b);
    }
}
