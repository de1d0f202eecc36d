//! Scale-aware rotary position embedding.
//!
//! Tokens cut at different patch sizes are placed on one shared grid whose
//! unit is the base patch `p_base`: a patch of size `p` at grid cell `(i, j)`
//! sits at its pixel center divided by `p_base`. With `p_l = 16`, `p_s = 8`
//! and `p_base = 4`, large-patch centers land on even coordinates and
//! small-patch centers on odd ones, so the two streams interleave without
//! collisions.

use ndarray::{Array2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TokenPosition;

/// Position of a token on the shared base grid, in base-patch units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnifiedPosition {
    pub i: f64,
    pub j: f64,
}

impl UnifiedPosition {
    pub fn shifted(self, di: f64, dj: f64) -> Self {
        Self { i: self.i + di, j: self.j + dj }
    }
}

/// `p_base = 2^n` with `n = ⌊log2(L / (L/p_s + L/p_l))⌋`, `L = max(H, W)`, clamped to at least 1.
pub fn compute_base_patch(height: usize, width: usize, p_small: usize, p_large: usize) -> Result<usize> {
    if p_small == 0 || p_large == 0 {
        return Err(Error::InvalidPatch("patch sizes must be positive".into()));
    }
    if p_small > p_large {
        return Err(Error::InvalidPatch(format!("small patch {p_small} exceeds large patch {p_large}")));
    }
    for p in [p_small, p_large] {
        if height % p != 0 || width % p != 0 {
            return Err(Error::InvalidPatch(format!("patch {p} does not divide {height}x{width}")));
        }
    }
    let l = height.max(width);
    let tokens_per_side = l / p_small + l / p_large;
    // largest n with 2^n * tokens_per_side <= l
    let mut base = 1usize;
    while base * 2 * tokens_per_side <= l {
        base *= 2;
    }
    Ok(base)
}

/// Patch center of grid cell `(i, j)` expressed in base-patch units.
pub fn unified_index(i: usize, j: usize, p: usize, p_base: usize) -> UnifiedPosition {
    let half = p as f64 / 2.0;
    let base = p_base as f64;
    UnifiedPosition { i: ((i * p) as f64 + half) / base, j: ((j * p) as f64 + half) / base }
}

/// Maps raw position records to unified coordinates; non-spatial tokens map to `None`.
pub fn unified_positions(positions: &[TokenPosition], p: usize, p_base: usize) -> Vec<Option<UnifiedPosition>> {
    positions
        .iter()
        .map(|pos| match *pos {
            TokenPosition::Grid { row, col } => Some(unified_index(row, col, p, p_base)),
            TokenPosition::NonSpatial => None,
        })
        .collect()
}

/// Per-axis rotary frequencies `theta^(-4k/head_dim)`, `k < head_dim/4`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryBasis {
    pub head_dim: usize,
    pub theta: f64,
    pub frequencies: Vec<f64>,
}

impl RotaryBasis {
    pub fn new(head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "rotary head dimension {head_dim} is not a positive multiple of 4"
            )));
        }
        if !(theta > 1.0) {
            return Err(Error::Config(format!("rotary theta {theta} must exceed 1")));
        }
        let frequencies = (0..head_dim / 4).map(|k| theta.powf(-4.0 * k as f64 / head_dim as f64)).collect();
        Ok(Self { head_dim, theta, frequencies })
    }

    /// Angle of channel pair `pair` at `pos`: the first half of pairs follow the
    /// row coordinate, the second half the column coordinate.
    fn angle(&self, pair: usize, pos: UnifiedPosition) -> f64 {
        let quarter = self.head_dim / 4;
        if pair < quarter {
            pos.i * self.frequencies[pair]
        } else {
            pos.j * self.frequencies[pair - quarter]
        }
    }
}

/// Cached cosines and sines for one token sequence (`N × head_dim/2`).
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTable<F> {
    head_dim: usize,
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: Scalar> RotaryTable<F> {
    pub fn new(basis: &RotaryBasis, positions: &[Option<UnifiedPosition>]) -> Self {
        let pairs = basis.head_dim / 2;
        let mut cos = Array2::ones((positions.len(), pairs));
        let mut sin = Array2::zeros((positions.len(), pairs));
        for (n, pos) in positions.iter().enumerate() {
            if let Some(pos) = pos {
                for p in 0..pairs {
                    let a = basis.angle(p, *pos);
                    cos[[n, p]] = F::lit(a.cos());
                    sin[[n, p]] = F::lit(a.sin());
                }
            }
        }
        Self { head_dim: basis.head_dim, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.nrows() == 0
    }

    /// Rotates every head of `x` (`N × heads·head_dim`) in place.
    pub fn rotate(&self, x: ArrayViewMut2<'_, F>) {
        self.apply(x, F::one());
    }

    /// Applies the inverse rotation (used to pull gradients back through `rotate`).
    pub fn rotate_inverse(&self, x: ArrayViewMut2<'_, F>) {
        self.apply(x, -F::one());
    }

    fn apply(&self, mut x: ArrayViewMut2<'_, F>, sign: F) {
        assert_eq!(x.nrows(), self.len(), "rotary table length mismatch");
        assert_eq!(x.ncols() % self.head_dim, 0, "width is not a multiple of the head dimension");
        let heads = x.ncols() / self.head_dim;
        let pairs = self.head_dim / 2;
        for (n, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..heads {
                let off = h * self.head_dim;
                for p in 0..pairs {
                    let c = self.cos[[n, p]];
                    let s = sign * self.sin[[n, p]];
                    let a = row[off + 2 * p];
                    let b = row[off + 2 * p + 1];
                    row[off + 2 * p] = a * c - b * s;
                    row[off + 2 * p + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotates per-head query or key vectors (`N × head_dim`, or several heads side by side).
pub fn apply_rope<F: Scalar>(
    vectors: &Array2<F>,
    positions: &[Option<UnifiedPosition>],
    basis: &RotaryBasis,
) -> Result<Array2<F>> {
    if vectors.nrows() != positions.len() {
        return Err(Error::DimensionMismatch(format!("{} vectors but {} positions", vectors.nrows(), positions.len())));
    }
    if vectors.ncols() % basis.head_dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "vector width {} is not a multiple of head dimension {}",
            vectors.ncols(),
            basis.head_dim
        )));
    }
    let mut out = vectors.clone();
    RotaryTable::new(basis, positions).rotate(out.view_mut());
    Ok(out)
}
