//! Image ↔ token conversion at an arbitrary patch size.
//!
//! Patches are taken in raster order (row-major over the patch grid) and each
//! patch is flattened as `p × p × C` (row within patch, column within patch,
//! channel).

use ndarray::Array2;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PatchGrid, TokenScale, TokenSequence};

/// A per-token map applied after patch extraction or before patch placement.
pub trait TokenMap<F: Scalar> {
    fn map_tokens(&self, x: &Array2<F>) -> Array2<F>;
}

/// Leaves tokens untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl<F: Scalar> TokenMap<F> for Identity {
    fn map_tokens(&self, x: &Array2<F>) -> Array2<F> {
        x.clone()
    }
}

/// Extracts raster-ordered flattened patches, one row per patch.
pub fn patchify_raw<F: Scalar>(image: &ImageTensor<F>, p: usize) -> Result<(Array2<F>, PatchGrid)> {
    let (c, h, w) = image.dims();
    let grid = PatchGrid::for_image(h, w, p)?;
    let data = image.data();
    let mut out = Array2::zeros((grid.len(), p * p * c));
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let mut row = out.row_mut(gr * grid.cols + gc);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        row[k] = data[[ch, gr * p + dy, gc * p + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify_raw`].
pub fn unpatchify_raw<F: Scalar>(patches: &Array2<F>, grid: PatchGrid, channels: usize) -> Result<ImageTensor<F>> {
    let p = grid.patch;
    if patches.nrows() != grid.len() || patches.ncols() != p * p * channels {
        return Err(shape_err((grid.len(), p * p * channels), patches.dim()));
    }
    let mut img = ImageTensor::zeros(channels, grid.height(), grid.width());
    let data = img.data_mut();
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = patches.row(gr * grid.cols + gc);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..channels {
                        data[[ch, gr * p + dy, gc * p + dx]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Cuts `image` into `p × p` patches and embeds each one.
pub fn patchify<F: Scalar>(image: &ImageTensor<F>, p: usize, embed: &impl TokenMap<F>) -> Result<TokenSequence<F>> {
    let (raw, grid) = patchify_raw(image, p)?;
    TokenSequence::new(embed.map_tokens(&raw), grid.positions(), TokenScale::Patch(p))
}

/// Projects tokens back to patch pixels and tiles them into a `channels × H × W` image.
pub fn unpatchify<F: Scalar>(
    tokens: &TokenSequence<F>,
    grid: PatchGrid,
    channels: usize,
    project: &impl TokenMap<F>,
) -> Result<ImageTensor<F>> {
    if tokens.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} tokens for a {}x{} grid", grid.len(), grid.rows, grid.cols),
            actual: format!("{} tokens", tokens.len()),
        });
    }
    unpatchify_raw(&project.map_tokens(&tokens.tokens), grid, channels)
}
