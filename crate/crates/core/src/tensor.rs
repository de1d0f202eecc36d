use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// A `C × H × W` raster: data samples, noise and every intermediate diffusion state.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F = f32> {
    data: Array3<F>,
}

impl<F: Scalar> ImageTensor<F> {
    pub fn new(data: Array3<F>) -> Self {
        Self { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: F) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        let n = values.len();
        Array3::from_shape_vec((channels, height, width), values)
            .map(Self::new)
            .map_err(|_| shape_err((channels, height, width), n))
    }

    /// Standard normal noise.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        Self::new(Array3::from_shape_simple_fn((channels, height, width), || {
            F::lit(rng.sample::<f64, _>(StandardNormal))
        }))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
    pub fn height(&self) -> usize {
        self.data.dim().1
    }
    pub fn width(&self) -> usize {
        self.data.dim().2
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &Array3<F> {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut Array3<F> {
        &mut self.data
    }
    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: F, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let mut out = self.data.clone();
        out.zip_mut_with(&other.data, |a, &b| *a += alpha * b);
        Ok(Self::new(out))
    }

    /// Element-wise `f(self, other)`.
    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let mut out = self.data.clone();
        Zip::from(&mut out).and(&other.data).for_each(|a, &b| *a = f(*a, b));
        Ok(Self::new(out))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::new(self.data.mapv(f))
    }

    pub fn cast<G: Scalar>(&self) -> ImageTensor<G> {
        ImageTensor::new(self.data.mapv(|v| G::lit(v.as_f64())))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / self.data.len() as f64
    }
}

/// Where a token lives: a raw patch-grid cell, or nowhere (registers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenPosition {
    Grid { row: usize, col: usize },
    NonSpatial,
}

impl TokenPosition {
    pub fn is_spatial(&self) -> bool {
        matches!(self, TokenPosition::Grid { .. })
    }
}

/// Patch size the tokens were cut at, or non-spatial for learned tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScale {
    Patch(usize),
    NonSpatial,
}

/// `N × D` tokens with one position record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F = f32> {
    pub tokens: Array2<F>,
    pub positions: Vec<TokenPosition>,
    pub scale: TokenScale,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn new(tokens: Array2<F>, positions: Vec<TokenPosition>, scale: TokenScale) -> Result<Self> {
        if tokens.nrows() != positions.len() {
            return Err(shape_err(tokens.nrows(), positions.len()));
        }
        Ok(Self { tokens, positions, scale })
    }

    pub fn non_spatial(tokens: Array2<F>) -> Self {
        let positions = vec![TokenPosition::NonSpatial; tokens.nrows()];
        Self { tokens, positions, scale: TokenScale::NonSpatial }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Layout of patches over an image: `rows · patch = H`, `cols · patch = W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(crate::Error::DimensionMismatch(format!(
                "{height}x{width} image is not divisible by patch size {patch}"
            )));
        }
        Ok(Self { patch, rows: height / patch, cols: width / patch })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn height(&self) -> usize {
        self.rows * self.patch
    }
    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    /// Raster-order grid positions.
    pub fn positions(&self) -> Vec<TokenPosition> {
        (0..self.rows).flat_map(|row| (0..self.cols).map(move |col| TokenPosition::Grid { row, col })).collect()
    }
}
