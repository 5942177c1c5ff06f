//! Rulebook and output hash table generation.
//!
//! Given the active-site table of the input and the convolution geometry,
//! this builds (a) the output hash table, numbering output sites by first
//! visit, and (b) per-kernel-offset lists of (input-row, output-row) pairs
//! that drive the gather-GEMM-scatter forward pass. Three modes: standard
//! "valid" convolution, submanifold (output actives == input actives), and
//! transposed (the exact adjoint of the standard map).

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::scalar::Real;
use crate::sparse_tensor::{Coord3, SparseTensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Standard,
    Submanifold,
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub mode: ConvMode,
    pub in_shape: (usize, usize, usize),
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("submanifold kernel dims must be odd, got {0:?}")]
    EvenSubmanifoldKernel((usize, usize, usize)),
    #[error("submanifold stride must be (1,1,1), got {0:?}")]
    SubmanifoldStride((usize, usize, usize)),
    #[error("kernel dim {k} exceeds input dim {d} on axis {axis}")]
    KernelTooLarge { axis: usize, k: usize, d: usize },
    #[error("(d - k) not divisible by stride on axis {axis}: d={d}, k={k}, s={s}; pad the grid")]
    NotDivisible { axis: usize, d: usize, k: usize, s: usize },
}

impl ConvGeometry {
    pub fn new(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        mode: ConvMode,
        in_shape: (usize, usize, usize),
    ) -> Result<Self, GeometryError> {
        let g = ConvGeometry {
            kernel,
            stride,
            mode,
            in_shape,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = [self.kernel.0, self.kernel.1, self.kernel.2];
        let d = [self.in_shape.0, self.in_shape.1, self.in_shape.2];
        match self.mode {
            ConvMode::Submanifold => {
                if k.iter().any(|&ki| ki % 2 == 0) {
                    return Err(GeometryError::EvenSubmanifoldKernel(self.kernel));
                }
                if self.stride != (1, 1, 1) {
                    return Err(GeometryError::SubmanifoldStride(self.stride));
                }
            }
            ConvMode::Standard | ConvMode::Transposed => {
                for axis in 0..3 {
                    if self.mode == ConvMode::Standard && k[axis] > d[axis] {
                        return Err(GeometryError::KernelTooLarge {
                            axis,
                            k: k[axis],
                            d: d[axis],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Output grid shape. Standard: (d-k)/s + 1 per axis, requiring exact
    /// divisibility; submanifold: unchanged; transposed: (d-1)*s + k.
    pub fn output_shape(&self) -> Result<(usize, usize, usize), GeometryError> {
        self.validate()?;
        let k = [self.kernel.0, self.kernel.1, self.kernel.2];
        let s = [self.stride.0, self.stride.1, self.stride.2];
        let d = [self.in_shape.0, self.in_shape.1, self.in_shape.2];
        let mut out = [0usize; 3];
        match self.mode {
            ConvMode::Submanifold => out = d,
            ConvMode::Standard => {
                for axis in 0..3 {
                    if (d[axis] - k[axis]) % s[axis] != 0 {
                        return Err(GeometryError::NotDivisible {
                            axis,
                            d: d[axis],
                            k: k[axis],
                            s: s[axis],
                        });
                    }
                    out[axis] = (d[axis] - k[axis]) / s[axis] + 1;
                }
            }
            ConvMode::Transposed => {
                for axis in 0..3 {
                    out[axis] = (d[axis] - 1) * s[axis] + k[axis];
                }
            }
        }
        Ok((out[0], out[1], out[2]))
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    /// Row-major linearization of a kernel offset, matching the Alg. 2
    /// triple-loop order.
    pub fn offset_id(&self, off: (usize, usize, usize)) -> usize {
        (off.0 * self.kernel.1 + off.1) * self.kernel.2 + off.2
    }
}

/// All output coordinates one input point contributes to, enumerated in
/// ascending row-major order. Submanifold returns the clipped neighborhood
/// without activity filtering; the build step intersects with the active set.
pub fn get_output_coords(p: Coord3, g: &ConvGeometry) -> Vec<Coord3> {
    let out_shape = g.output_shape().expect("valid geometry");
    let out_dim = [out_shape.0 as i64, out_shape.1 as i64, out_shape.2 as i64];
    let p = [p.x as i64, p.y as i64, p.z as i64];
    let k = [g.kernel.0 as i64, g.kernel.1 as i64, g.kernel.2 as i64];
    let s = [g.stride.0 as i64, g.stride.1 as i64, g.stride.2 as i64];
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for axis in 0..3 {
        match g.mode {
            // o*s <= p <= o*s + k - 1  and  0 <= o < out_dim
            ConvMode::Standard => {
                lo[axis] = ((p[axis] - k[axis] + 1) + s[axis] - 1).div_euclid(s[axis]).max(0);
                hi[axis] = (p[axis].div_euclid(s[axis])).min(out_dim[axis] - 1);
            }
            // |o - p| <= (k-1)/2, clipped to the grid
            ConvMode::Submanifold => {
                let r = (k[axis] - 1) / 2;
                lo[axis] = (p[axis] - r).max(0);
                hi[axis] = (p[axis] + r).min(out_dim[axis] - 1);
            }
            // adjoint of Standard: p*s <= o <= p*s + k - 1 (always in-bounds)
            ConvMode::Transposed => {
                lo[axis] = p[axis] * s[axis];
                hi[axis] = p[axis] * s[axis] + k[axis] - 1;
            }
        }
    }
    let mut coords = Vec::new();
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                coords.push(Coord3::new(x as i32, y as i32, z as i32));
            }
        }
    }
    coords
}

/// Position of `p_in` within the kernel window of `p_out`; each component
/// lies in [0, k). Offset (0,0,0) is the kernel's first corner.
pub fn get_offset(p_in: Coord3, p_out: Coord3, g: &ConvGeometry) -> (usize, usize, usize) {
    let pi = [p_in.x as i64, p_in.y as i64, p_in.z as i64];
    let po = [p_out.x as i64, p_out.y as i64, p_out.z as i64];
    let k = [g.kernel.0 as i64, g.kernel.1 as i64, g.kernel.2 as i64];
    let s = [g.stride.0 as i64, g.stride.1 as i64, g.stride.2 as i64];
    let mut off = [0i64; 3];
    for axis in 0..3 {
        off[axis] = match g.mode {
            ConvMode::Standard => pi[axis] - po[axis] * s[axis],
            ConvMode::Submanifold => pi[axis] - po[axis] + (k[axis] - 1) / 2,
            // roles flip: the transposed output is the standard input
            ConvMode::Transposed => po[axis] - pi[axis] * s[axis],
        };
        assert!(
            off[axis] >= 0 && off[axis] < k[axis],
            "offset {} out of [0,{}) on axis {axis}: precondition breach",
            off[axis],
            k[axis]
        );
    }
    (off[0] as usize, off[1] as usize, off[2] as usize)
}

/// Per-offset (input-row, output-row) pair lists plus the output hash table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleBook {
    pub geometry: ConvGeometry,
    pub out_shape: (usize, usize, usize),
    /// Output coordinates in row order (first-visit numbering).
    pub out_coords: Vec<Coord3>,
    pub out_index: HashMap<Coord3, usize>,
    /// Indexed by `ConvGeometry::offset_id`.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl RuleBook {
    pub fn out_count(&self) -> usize {
        self.out_coords.len()
    }

    /// Pair count for one offset (the paper's Cntr).
    pub fn counter(&self, off: (usize, usize, usize)) -> usize {
        self.pairs[self.geometry.offset_id(off)].len()
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(|p| p.len()).sum()
    }

    /// Per-offset pair lists in offset-row-major order, for golden tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let (kh, kw, kl) = self.geometry.kernel;
        for i in 0..kh {
            for j in 0..kw {
                for k in 0..kl {
                    let list = &self.pairs[self.geometry.offset_id((i, j, k))];
                    write!(out, "offset {i} {j} {k}:").unwrap();
                    for (a, b) in list {
                        write!(out, " ({a},{b})").unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Appendix-A style construction: iterate active inputs in row order; each
/// (input, output) visit appends one pair under its offset; the first visit
/// of an output coordinate assigns it the next output row.
pub fn build_rulebook<T: Real>(input: &SparseTensor3<T>, g: &ConvGeometry) -> RuleBook {
    let out_shape = g.output_shape().expect("valid geometry");
    let mut pairs = vec![Vec::new(); g.kernel_volume()];
    let mut out_index: HashMap<Coord3, usize>;
    let mut out_coords: Vec<Coord3>;

    match g.mode {
        ConvMode::Submanifold => {
            // output table is the input table verbatim
            out_index = input.index().clone();
            out_coords = input.coords().to_vec();
            for (in_row, &p) in input.coords().iter().enumerate() {
                for o in get_output_coords(p, g) {
                    if let Some(&out_row) = out_index.get(&o) {
                        let off = get_offset(p, o, g);
                        pairs[g.offset_id(off)].push((in_row as u32, out_row as u32));
                    }
                }
            }
        }
        ConvMode::Standard | ConvMode::Transposed => {
            out_index = HashMap::new();
            out_coords = Vec::new();
            for (in_row, &p) in input.coords().iter().enumerate() {
                for o in get_output_coords(p, g) {
                    let out_row = *out_index.entry(o).or_insert_with(|| {
                        out_coords.push(o);
                        out_coords.len() - 1
                    });
                    let off = get_offset(p, o, g);
                    pairs[g.offset_id(off)].push((in_row as u32, out_row as u32));
                }
            }
        }
    }

    RuleBook {
        geometry: *g,
        out_shape,
        out_coords,
        out_index,
        pairs,
    }
}
