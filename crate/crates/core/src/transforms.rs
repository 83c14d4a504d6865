//! The 48 axis permutations with sign flips that map a cube onto itself.
//!
//! A transform reads output axis `i` from input axis `perm[i]`, reversed when
//! `signs[i] == -1`:
//!
//! ```text
//! output[q] = input[p],   p[perm[i]] = q[i]           if signs[i] == +1
//!                         p[perm[i]] = n - 1 - q[i]   if signs[i] == -1
//! ```
//!
//! Continuous coordinates follow the same rule with `n - c` for a flip.
//!
//! Canonical order: permutations in lexicographic order
//! (`[0,1,2]`, `[0,2,1]`, `[1,0,2]`, `[1,2,0]`, `[2,0,1]`, `[2,1,0]`), and
//! for each permutation the eight sign patterns in lexicographic order with
//! `+1` before `-1`. Element 0 is the identity.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, AnchorLocation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Box3D, Volume3D};

pub const GROUP_ORDER: usize = 48;

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CubeTransform {
    pub perm: [usize; 3],
    pub signs: [i8; 3],
}

type SignedMatrix = [[i8; 3]; 3];

impl CubeTransform {
    pub const IDENTITY: CubeTransform = CubeTransform {
        perm: [0, 1, 2],
        signs: [1, 1, 1],
    };

    pub fn new(perm: [usize; 3], signs: [i8; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::Config(format!("{perm:?} is not a permutation of 0..3")));
            }
            seen[p] = true;
        }
        if signs.iter().any(|s| s.abs() != 1) {
            return Err(Error::Config(format!("signs must be +1 or -1, got {signs:?}")));
        }
        Ok(Self { perm, signs })
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Position of this element in the canonical enumeration.
    pub fn canonical_index(&self) -> usize {
        let p = PERMUTATIONS.iter().position(|p| *p == self.perm).expect("valid permutation");
        let bits = self
            .signs
            .iter()
            .fold(0, |acc, &s| (acc << 1) | usize::from(s < 0));
        p * 8 + bits
    }

    /// `M` with `u_in = M u_out` in centered coordinates.
    fn matrix(&self) -> SignedMatrix {
        let mut m = [[0i8; 3]; 3];
        for i in 0..3 {
            m[self.perm[i]][i] = self.signs[i];
        }
        m
    }

    fn from_matrix(m: &SignedMatrix) -> Self {
        let mut perm = [0; 3];
        let mut signs = [1; 3];
        for i in 0..3 {
            let r = (0..3).find(|&r| m[r][i] != 0).expect("signed permutation matrix");
            perm[i] = r;
            signs[i] = m[r][i];
        }
        Self { perm, signs }
    }

    pub fn inverse(&self) -> Self {
        let m = self.matrix();
        let mut t = [[0i8; 3]; 3];
        for (r, row) in m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                t[c][r] = *v;
            }
        }
        Self::from_matrix(&t)
    }

    /// The transform equivalent to applying `second` after `self`.
    pub fn then(&self, second: &CubeTransform) -> Self {
        compose(second, self)
    }

    /// Input index read by output index `q` on a cube of edge `n`.
    fn source_index(&self, q: [usize; 3], n: usize) -> [usize; 3] {
        let mut p = [0; 3];
        for i in 0..3 {
            p[self.perm[i]] = if self.signs[i] > 0 { q[i] } else { n - 1 - q[i] };
        }
        p
    }

    /// Output index that receives input index `p` on a cube of edge `n`.
    pub fn map_index(&self, p: [usize; 3], n: usize) -> [usize; 3] {
        std::array::from_fn(|i| {
            let v = p[self.perm[i]];
            if self.signs[i] > 0 {
                v
            } else {
                n - 1 - v
            }
        })
    }
}

/// `compose(a, b)` acts as `b` first, then `a`.
pub fn compose(a: &CubeTransform, b: &CubeTransform) -> CubeTransform {
    // apply(a, apply(b, v))[q] = v[src_b(src_a(q))]; matrices multiply as M_b M_a.
    let (ma, mb) = (a.matrix(), b.matrix());
    let mut m = [[0i8; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, out) in row.iter_mut().enumerate() {
            *out = (0..3).map(|k| mb[r][k] * ma[k][c]).sum();
        }
    }
    CubeTransform::from_matrix(&m)
}

/// All 48 elements in canonical order.
pub fn enumerate_group() -> Vec<CubeTransform> {
    let mut out = Vec::with_capacity(GROUP_ORDER);
    for perm in PERMUTATIONS {
        for bits in 0..8u8 {
            let sign = |k: u8| if bits >> (2 - k) & 1 == 1 { -1 } else { 1 };
            out.push(CubeTransform {
                perm,
                signs: [sign(0), sign(1), sign(2)],
            });
        }
    }
    out
}

/// The eight elements that leave the z axis untouched (the square's
/// symmetries acting on every axial slice).
pub fn planar_subgroup() -> Vec<CubeTransform> {
    enumerate_group()
        .into_iter()
        .filter(|t| t.perm[0] == 0 && t.signs[0] == 1)
        .collect()
}

fn check_cubic(shape: [usize; 3], t: &CubeTransform) -> Result<()> {
    for i in 0..3 {
        if shape[i] != shape[t.perm[i]] {
            return Err(Error::Shape(format!(
                "transform {t:?} exchanges axes of unequal length in {shape:?}"
            )));
        }
    }
    Ok(())
}

/// Relabel voxels of a 3D array by `t`. Values are moved, never changed.
pub fn apply_to_array<T: Clone>(t: &CubeTransform, data: &Array3<T>) -> Result<Array3<T>> {
    let (d, h, w) = data.dim();
    let shape = [d, h, w];
    check_cubic(shape, t)?;
    let out_shape = std::array::from_fn::<usize, 3, _>(|i| shape[t.perm[i]]);
    Ok(Array3::from_shape_fn((out_shape[0], out_shape[1], out_shape[2]), |(z, y, x)| {
        let mut p = [0; 3];
        for i in 0..3 {
            let q = [z, y, x][i];
            let n = out_shape[i];
            p[t.perm[i]] = if t.signs[i] > 0 { q } else { n - 1 - q };
        }
        data[p].clone()
    }))
}

pub fn apply_to_volume<S: Scalar>(t: &CubeTransform, v: &Volume3D<S>) -> Result<Volume3D<S>> {
    let data = apply_to_array(t, v.data())?;
    let sp = v.spacing();
    Volume3D::new(data, std::array::from_fn(|i| sp[t.perm[i]]))
}

/// Map a box of a patch with extent `patch_shape`; the edge length is
/// unchanged.
pub fn apply_to_box(t: &CubeTransform, b: &Box3D, patch_shape: [usize; 3]) -> Result<Box3D> {
    check_cubic(patch_shape, t)?;
    let center = std::array::from_fn(|i| {
        let n = patch_shape[t.perm[i]] as f64;
        let c = b.center[t.perm[i]];
        if t.signs[i] > 0 {
            c
        } else {
            n - c
        }
    });
    Ok(Box3D::new(center, b.edge))
}

/// Anchor correspondence under `t`: entry `i` is the index of the original
/// anchor whose location the `i`-th anchor of the transformed patch occupies.
pub fn apply_to_anchor_index(t: &CubeTransform, grid: &AnchorGrid) -> Result<Vec<usize>> {
    let shape = grid.patch_shape();
    if !(shape[0] == shape[1] && shape[1] == shape[2]) {
        return Err(Error::Shape(format!("anchor permutation needs a cubic patch, got {shape:?}")));
    }
    let mut perm = Vec::with_capacity(grid.len());
    for level in 0..grid.levels().len() {
        let n = grid.level_shape(level)[0];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let cell = t.source_index([z, y, x], n);
                    perm.push(grid.index(AnchorLocation { level, cell }));
                }
            }
        }
    }
    Ok(perm)
}

/// Inverse permutation of [`apply_to_anchor_index`]: entry `j` is the
/// transformed-patch index of original anchor `j`.
pub fn anchor_index_preimage(t: &CubeTransform, grid: &AnchorGrid) -> Result<Vec<usize>> {
    let forward = apply_to_anchor_index(t, grid)?;
    let mut inv = vec![0; forward.len()];
    for (i, &j) in forward.iter().enumerate() {
        inv[j] = i;
    }
    Ok(inv)
}
