//! Active-site hash table paired with a dense per-site feature matrix.
//!
//! A `SparseTensor3` stores only the active voxels of a `c x h x w x l`
//! feature map: an exact map from integer coordinates to row indices, plus
//! an `a x c` matrix holding one feature row per active site. Row ids are
//! assigned in insertion order so repeated builds are reproducible.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array4, ArrayView1};
use thiserror::Error;

use crate::scalar::Real;

/// Integer voxel coordinate along the (h, w, l) grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord3 {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Coord3 { x, y, z }
    }

    pub fn in_bounds(&self, shape: (usize, usize, usize)) -> bool {
        self.x >= 0
            && self.y >= 0
            && self.z >= 0
            && (self.x as usize) < shape.0
            && (self.y as usize) < shape.1
            && (self.z as usize) < shape.2
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("duplicate coordinate ({0:?})")]
    DuplicateCoord(Coord3),
    #[error("coordinate {coord:?} out of bounds for shape {shape:?}")]
    OutOfBounds {
        coord: Coord3,
        shape: (usize, usize, usize),
    },
    #[error("feature row has {got} channels, tensor has {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("active-site index mismatch between operands")]
    IndexMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Sparse 3D feature map: hash table `H` plus feature matrix `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor3<T: Real> {
    shape: (usize, usize, usize),
    channels: usize,
    index: HashMap<Coord3, usize>,
    coords: Vec<Coord3>,
    features: Array2<T>,
}

impl<T: Real> SparseTensor3<T> {
    /// Builds a tensor from explicit (coordinate, feature row) sites.
    /// Row ids follow the order of `sites`.
    pub fn from_sites(
        shape: (usize, usize, usize),
        channels: usize,
        sites: &[(Coord3, Vec<T>)],
    ) -> Result<Self, TensorError> {
        let mut index = HashMap::with_capacity(sites.len());
        let mut coords = Vec::with_capacity(sites.len());
        let mut features = Array2::zeros((sites.len(), channels));
        for (row, (coord, values)) in sites.iter().enumerate() {
            if !coord.in_bounds(shape) {
                return Err(TensorError::OutOfBounds {
                    coord: *coord,
                    shape,
                });
            }
            if values.len() != channels {
                return Err(TensorError::ChannelMismatch {
                    got: values.len(),
                    expected: channels,
                });
            }
            if index.insert(*coord, row).is_some() {
                return Err(TensorError::DuplicateCoord(*coord));
            }
            coords.push(*coord);
            for (c, v) in values.iter().enumerate() {
                features[(row, c)] = *v;
            }
        }
        Ok(SparseTensor3 {
            shape,
            channels,
            index,
            coords,
            features,
        })
    }

    /// Builds a tensor from a row-ordered coordinate list and a matching
    /// feature matrix. Used by the convolution kernels, which produce the
    /// coordinate numbering themselves.
    pub fn from_parts(
        shape: (usize, usize, usize),
        coords: Vec<Coord3>,
        features: Array2<T>,
    ) -> Result<Self, TensorError> {
        if coords.len() != features.nrows() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} coords vs {} feature rows",
                coords.len(),
                features.nrows()
            )));
        }
        let mut index = HashMap::with_capacity(coords.len());
        for (row, coord) in coords.iter().enumerate() {
            if !coord.in_bounds(shape) {
                return Err(TensorError::OutOfBounds {
                    coord: *coord,
                    shape,
                });
            }
            if index.insert(*coord, row).is_some() {
                return Err(TensorError::DuplicateCoord(*coord));
            }
        }
        Ok(SparseTensor3 {
            shape,
            channels: features.ncols(),
            index,
            coords,
            features,
        })
    }

    pub fn empty(shape: (usize, usize, usize), channels: usize) -> Self {
        SparseTensor3 {
            shape,
            channels,
            index: HashMap::new(),
            coords: Vec::new(),
            features: Array2::zeros((0, channels)),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of active sites `a`.
    pub fn active_count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, coord: Coord3) -> Option<usize> {
        self.index.get(&coord).copied()
    }

    /// Coordinates in row order.
    pub fn coords(&self) -> &[Coord3] {
        &self.coords
    }

    pub fn index(&self) -> &HashMap<Coord3, usize> {
        &self.index
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Array2<T> {
        &mut self.features
    }

    pub fn feature_row(&self, row: usize) -> ArrayView1<'_, T> {
        self.features.row(row)
    }

    /// True when both tensors share shape and the same coord -> row map.
    pub fn same_index(&self, other: &Self) -> bool {
        self.shape == other.shape && self.coords == other.coords
    }

    /// Densifies to a `c x h x w x l` array; inactive sites are exact zero.
    pub fn to_dense(&self) -> Array4<T> {
        let (h, w, l) = self.shape;
        let mut out = Array4::zeros((self.channels, h, w, l));
        for (row, coord) in self.coords.iter().enumerate() {
            for c in 0..self.channels {
                out[(c, coord.x as usize, coord.y as usize, coord.z as usize)] =
                    self.features[(row, c)];
            }
        }
        out
    }

    /// Recovers the sparse form: a site is active iff its feature vector has
    /// nonzero magnitude. Sites are numbered in row-major grid order.
    pub fn from_dense(arr: &Array4<T>) -> Self {
        let (c, h, w, l) = arr.dim();
        let mut sites = Vec::new();
        for x in 0..h {
            for y in 0..w {
                for z in 0..l {
                    let mut mag = T::zero();
                    for ch in 0..c {
                        mag += arr[(ch, x, y, z)] * arr[(ch, x, y, z)];
                    }
                    if mag > T::zero() {
                        let row: Vec<T> = (0..c).map(|ch| arr[(ch, x, y, z)]).collect();
                        sites.push((Coord3::new(x as i32, y as i32, z as i32), row));
                    }
                }
            }
        }
        SparseTensor3::from_sites((h, w, l), c, &sites).expect("dense scan yields valid sites")
    }

    /// Debug dump: one line per site, "x y z f0 .. f(c-1)", sorted by coord.
    pub fn dump(&self) -> String {
        let mut rows: Vec<(Coord3, usize)> =
            self.coords.iter().copied().zip(0..self.coords.len()).collect();
        rows.sort_by_key(|(c, _)| *c);
        let mut out = String::new();
        for (coord, row) in rows {
            write!(out, "{} {} {}", coord.x, coord.y, coord.z).unwrap();
            for c in 0..self.channels {
                write!(out, " {}", self.features[(row, c)]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tensor() {
        let t = SparseTensor3::<f64>::from_sites((2, 2, 2), 1, &[]).unwrap();
        assert_eq!(t.active_count(), 0);
        assert!(t.to_dense().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_site() {
        let t = SparseTensor3::from_sites(
            (4, 4, 4),
            2,
            &[(Coord3::new(1, 2, 3), vec![0.5, -1.0])],
        )
        .unwrap();
        assert_eq!(t.active_count(), 1);
        assert_eq!(t.features().row(0).to_vec(), vec![0.5, -1.0]);
        let d = t.to_dense();
        assert_eq!(d[(0, 1, 2, 3)], 0.5);
        assert_eq!(d[(1, 1, 2, 3)], -1.0);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn duplicate_coord_rejected() {
        let err = SparseTensor3::from_sites(
            (2, 2, 2),
            1,
            &[
                (Coord3::new(0, 0, 0), vec![1.0]),
                (Coord3::new(0, 0, 0), vec![2.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::DuplicateCoord(_)));
    }

    #[test]
    fn out_of_bounds_rejected() {
        let err =
            SparseTensor3::from_sites((2, 2, 2), 1, &[(Coord3::new(2, 0, 0), vec![1.0])])
                .unwrap_err();
        assert!(matches!(err, TensorError::OutOfBounds { .. }));
    }

    #[test]
    fn row_ids_are_bijection() {
        let t = SparseTensor3::from_sites(
            (4, 4, 4),
            1,
            &[
                (Coord3::new(3, 0, 0), vec![1.0]),
                (Coord3::new(0, 2, 1), vec![2.0]),
                (Coord3::new(1, 1, 1), vec![3.0]),
            ],
        )
        .unwrap();
        let mut rows: Vec<usize> = t.index().values().copied().collect();
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1, 2]);
        assert_eq!(t.row_of(Coord3::new(3, 0, 0)), Some(0));
    }

    #[test]
    fn dense_sparse_round_trip() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut sites = Vec::new();
            for x in 0..5i32 {
                for y in 0..5i32 {
                    for z in 0..5i32 {
                        if rng.gen_bool(0.05) {
                            // keep rows nonzero-magnitude so sparsity survives
                            let row = vec![rng.gen_range(0.5..2.0), rng.gen_range(-2.0..-0.5)];
                            sites.push((Coord3::new(x, y, z), row));
                        }
                    }
                }
            }
            let t = SparseTensor3::from_sites((5, 5, 5), 2, &sites).unwrap();
            let back = SparseTensor3::from_dense(&t.to_dense());
            assert_eq!(back.active_count(), t.active_count());
            for coord in t.coords() {
                let r1 = t.row_of(*coord).unwrap();
                let r2 = back.row_of(*coord).unwrap();
                assert_eq!(t.features().row(r1), back.features().row(r2));
            }
        }
    }

    #[test]
    fn dense_to_sparse_counts_nonzero_sites() {
        let mut arr = Array4::<f64>::zeros((2, 3, 3, 3));
        arr[(1, 2, 0, 1)] = 4.0;
        let t = SparseTensor3::from_dense(&arr);
        assert_eq!(t.active_count(), 1);
        assert_eq!(t.row_of(Coord3::new(2, 0, 1)), Some(0));
    }

    #[test]
    fn dump_is_sorted() {
        let t = SparseTensor3::from_sites(
            (3, 3, 3),
            1,
            &[
                (Coord3::new(2, 0, 0), vec![1.0]),
                (Coord3::new(0, 1, 0), vec![2.0]),
            ],
        )
        .unwrap();
        assert_eq!(t.dump(), "0 1 0 2\n2 0 0 1\n");
    }
}
