//! Toy-FID, the guidance-scale sweep, a nearest-centroid oracle and PCA
//! feature maps.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CfgPolicy, SamplerConfig};
use crate::data::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::runtime::map_chunks;
use crate::sampler::{sample, Denoiser};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PatchGrid, TokenPosition, TokenSequence};
use crate::vfm::MockExtractor;

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::DimensionMismatch(format!("covariance {:?} for mean of length {d}", cov.dim())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-6 {
                    return Err(Error::NotPsd(cov[[i, j]] - cov[[j, i]]));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    /// Unbiased statistics of the rows of `x` (`N × D`, `N ≥ 2`).
    pub fn from_samples(x: &Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::DimensionMismatch(format!("need at least 2 samples, got {n}")));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = x - &mean;
        let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
        let sym = (&cov + &cov.t()) * 0.5;
        cov.assign(&sym);
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenvalues with negatives inside the tolerance clamped to zero.
fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-8 * scale;
    for v in eig.eigenvalues.iter_mut() {
        if *v < -tol {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("{}-d vs {}-d statistics", a.dim(), b.dim())));
    }
    let mean_term: f64 = (&a.mean - &b.mean).mapv(|v| v * v).sum();
    let eig_a = psd_eigen(to_dmatrix(&a.cov))?;
    let root_vals = DMatrix::from_diagonal(&eig_a.eigenvalues.map(f64::sqrt));
    let root_a = &eig_a.eigenvectors * root_vals * eig_a.eigenvectors.transpose();
    let inner = &root_a * to_dmatrix(&b.cov) * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = psd_eigen(inner)?;
    let trace_root: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let trace = a.cov.diag().sum() + b.cov.diag().sum();
    Ok((mean_term + trace - 2.0 * trace_root).max(0.0))
}

/// Flattened mock features used for toy-FID.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFidExtractor {
    extractor: MockExtractor,
}

impl ToyFidExtractor {
    pub fn new(channels: usize, tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self { extractor: MockExtractor::new(channels, tokens, dim, seed)? })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.tokens() * self.extractor.dim()
    }

    /// One row per image; pixels are clamped to `[-1, 1]` first, as when writing 8-bit output.
    pub fn features(&self, images: &[&ImageTensor<f32>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.feature_dim()));
        for (row, img) in out.rows_mut().into_iter().zip(images) {
            let clamped = img.map(|v| v.clamp(-1.0, 1.0));
            let f = self.extractor.extract(&clamped)?;
            for (dst, src) in row.into_iter().zip(f.iter()) {
                *dst = f64::from(*src);
            }
        }
        Ok(out)
    }

    pub fn stats(&self, images: &[&ImageTensor<f32>]) -> Result<GaussianStats> {
        GaussianStats::from_samples(&self.features(images)?)
    }

    pub fn dataset_stats(&self, dataset: &Dataset) -> Result<GaussianStats> {
        let images: Vec<&ImageTensor<f32>> = dataset.items.iter().map(|i| &i.image).collect();
        self.stats(&images)
    }
}

/// Pixel-space nearest-class-mean classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    centroids: Vec<Array1<f64>>,
}

fn flatten(img: &ImageTensor<f32>) -> Array1<f64> {
    img.data().iter().map(|&v| f64::from(v)).collect()
}

impl NearestCentroid {
    pub fn fit(items: &[LabeledImage], classes: usize) -> Result<Self> {
        let dim = items.first().map(|i| i.image.len()).unwrap_or(0);
        let mut sums = vec![Array1::<f64>::zeros(dim); classes];
        let mut counts = vec![0usize; classes];
        for item in items {
            if item.label >= classes {
                return Err(Error::DimensionMismatch(format!("label {} >= {classes} classes", item.label)));
            }
            sums[item.label] += &flatten(&item.image);
            counts[item.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::DimensionMismatch(format!("class {c} has no examples")));
        }
        let centroids = sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect();
        Ok(Self { centroids })
    }

    pub fn predict(&self, img: &ImageTensor<f32>) -> usize {
        let x = flatten(img).mapv(|v| v.clamp(-1.0, 1.0));
        self.centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (&x - c).mapv(|v| v * v).sum()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("at least one class")
    }

    pub fn accuracy(&self, images: &[&ImageTensor<f32>], labels: &[usize]) -> f64 {
        let hits = images.iter().zip(labels).filter(|(img, &l)| self.predict(img) == l).count();
        hits as f64 / images.len().max(1) as f64
    }
}

/// Class-conditional samples; sample `i` uses label `labels[i]` and noise from stream `i` of `seed`.
pub fn generate_samples<M: Denoiser<f32> + Sync>(
    model: &M,
    labels: &[usize],
    cfg: &CfgPolicy,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<ImageTensor<f32>>> {
    let chunks = map_chunks(labels.len(), |range| -> Result<Vec<ImageTensor<f32>>> {
        range
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                sample(model, labels[i], cfg, sampler, &mut rng).map(|s| s.image)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(labels.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fixed settings shared by every entry of a guidance sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub num_samples: usize,
    pub num_classes: usize,
    /// Guidance interval; the scale is replaced per sweep entry.
    pub interval: CfgPolicy,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub reference: GaussianStats,
    pub fid: ToyFidExtractor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    pub toy_fid: f64,
}

/// Toy-FID of generated samples against `reference`, with labels cycling over classes.
pub fn toy_fid<M: Denoiser<f32> + Sync>(model: &M, cfg: &CfgPolicy, setup: &SweepSetup) -> Result<f64> {
    if setup.num_samples < 2 {
        return Err(Error::Config(format!("eval.num_samples: {} is too few (need >= 2)", setup.num_samples)));
    }
    let labels: Vec<usize> = (0..setup.num_samples).map(|i| i % setup.num_classes).collect();
    let samples = generate_samples(model, &labels, cfg, &setup.sampler, setup.seed)?;
    let refs: Vec<&ImageTensor<f32>> = samples.iter().collect();
    frechet_distance(&setup.fid.stats(&refs)?, &setup.reference)
}

pub fn cfg_sweep<M: Denoiser<f32> + Sync>(model: &M, scales: &[f64], setup: &SweepSetup) -> Result<Vec<SweepRow>> {
    if scales.is_empty() {
        return Err(Error::Config("eval.sweep_scales: no scales given".into()));
    }
    if setup.num_samples == 0 {
        return Err(Error::Config("eval.num_samples: must be positive".into()));
    }
    scales
        .iter()
        .map(|&scale| {
            let cfg = CfgPolicy::new(scale, setup.interval.t_min, setup.interval.t_max)?;
            Ok(SweepRow { scale, toy_fid: toy_fid(model, &cfg, setup)? })
        })
        .collect()
}

/// Tab-separated table with a header row.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scale\ttoy_fid\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\n", r.scale, r.toy_fid));
    }
    out
}

/// The row with the lowest toy-FID.
pub fn best_scale(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().min_by(|a, b| a.toy_fid.total_cmp(&b.toy_fid))
}

/// Projects spatial tokens onto their top three principal components and
/// min-max normalizes each to `[0, 1]`. Returns a `3 × rows × cols` raster;
/// components beyond the feature rank are zero.
pub fn pca_feature_viz<F: Scalar>(features: &TokenSequence<F>, grid: PatchGrid) -> Result<ImageTensor<f64>> {
    let spatial: Vec<(usize, usize, usize)> = features
        .positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match *p {
            TokenPosition::Grid { row, col } => Some((i, row, col)),
            TokenPosition::NonSpatial => None,
        })
        .collect();
    if spatial.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} spatial tokens for a {}x{} grid",
            spatial.len(),
            grid.rows,
            grid.cols
        )));
    }
    let d = features.dim();
    let mut x = Array2::<f64>::zeros((spatial.len(), d));
    for (r, &(i, _, _)) in spatial.iter().enumerate() {
        for (dst, src) in x.row_mut(r).iter_mut().zip(features.tokens.row(i)) {
            *dst = src.as_f64();
        }
    }
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered);
    let eig = SymmetricEigen::new(to_dmatrix(&cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order.first().map(|&i| eig.eigenvalues[i]).unwrap_or(0.0);

    let mut out = ImageTensor::<f64>::zeros(3, grid.rows, grid.cols);
    for (channel, &k) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[k];
        if !(top > 0.0 && lambda > 1e-10 * top) {
            continue;
        }
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> =
            centered.rows().into_iter().map(|row| row.iter().zip(&axis).map(|(a, b)| a * b).sum()).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if !(span > 0.0) {
            continue;
        }
        for (v, &(_, row, col)) in proj.iter().zip(&spatial) {
            out.data_mut()[[channel, row, col]] = (v - lo) / span;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: Array1<f64>, cov: Array2<f64>) -> GaussianStats {
        GaussianStats::new(mean, cov, 10).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        let d = 5;
        let eye = Array2::<f64>::eye(d);
        let a = stats(Array1::zeros(d), eye.clone());
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let shift = Array1::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let b = stats(shift.clone(), eye.clone());
        assert!((frechet_distance(&a, &b).unwrap() - shift.mapv(|v| v * v).sum()).abs() < 1e-9);
        let c = stats(Array1::zeros(d), eye.clone() * 4.0);
        assert!((frechet_distance(&c, &a).unwrap() - d as f64).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_on_random_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xa = Array2::from_shape_simple_fn((40, 6), || StandardNormal.sample(&mut rng));
        let xb = Array2::from_shape_simple_fn((40, 6), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            1.5 * v + 0.3
        });
        let a = GaussianStats::from_samples(&xa).unwrap();
        let b = GaussianStats::from_samples(&xb).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!(ab > 0.1 && (ab - ba).abs() < 1e-8 * ab.max(1.0));
    }

    #[test]
    fn non_psd_is_rejected() {
        let a = stats(Array1::zeros(2), array![[1.0, 0.0], [0.0, -0.5]]);
        let b = stats(Array1::zeros(2), Array2::eye(2));
        assert!(matches!(frechet_distance(&a, &b), Err(Error::NotPsd(_))));
        assert!(GaussianStats::new(Array1::zeros(2), array![[1.0, 0.5], [0.0, 1.0]], 2).is_err());
    }

    fn seq(tokens: Array2<f64>, grid: PatchGrid) -> TokenSequence<f64> {
        TokenSequence::new(tokens, grid.positions(), crate::tensor::TokenScale::Patch(grid.patch)).unwrap()
    }

    #[test]
    fn pca_rank_one_and_range() {
        let grid = PatchGrid::for_image(4, 4, 1).unwrap();
        let dir = array![1.0, 2.0, -1.0];
        let tokens = Array2::from_shape_fn((16, 3), |(i, j)| i as f64 * dir[j]);
        let out = pca_feature_viz(&seq(tokens, grid), grid).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let ch = |c: usize| out.data().index_axis(Axis(0), c).to_owned();
        assert!(ch(0).iter().any(|&v| v > 0.5));
        assert!(ch(1).iter().all(|&v| v == 0.0) && ch(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_two_clusters_hit_extremes() {
        let grid = PatchGrid::for_image(4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = Array2::from_shape_fn((16, 6), |(i, j)| {
            let centre = if i < 8 { 5.0 } else { -5.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            if j == 0 {
                centre + 0.01 * noise
            } else {
                0.01 * noise
            }
        });
        let out = pca_feature_viz(&seq(tokens.clone(), grid), grid).unwrap();
        let c0: Vec<f64> = out.data().index_axis(Axis(0), 0).iter().copied().collect();
        let (first, second) = c0.split_at(8);
        let lo_a = first.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_b = second.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let separated = (first.iter().all(|&v| v > 0.99) && second.iter().all(|&v| v < 0.01))
            || (first.iter().all(|&v| v < 0.01) && second.iter().all(|&v| v > 0.99));
        assert!(separated, "{lo_a} {hi_b}");

        let scaled = pca_feature_viz(&seq(tokens.mapv(|v| 7.5 * v), grid), grid).unwrap();
        assert!(scaled.max_abs_diff(&out) < 1e-9);
    }

    #[test]
    fn pca_rejects_wrong_count() {
        let grid = PatchGrid::for_image(4, 4, 1).unwrap();
        let small = PatchGrid::for_image(2, 2, 1).unwrap();
        let tokens = Array2::zeros((4, 3));
        assert!(pca_feature_viz(&seq(tokens, small), grid).is_err());
    }

    #[test]
    fn nearest_centroid_separates_toy_classes() {
        use crate::data::{generate_synthetic_dataset, SyntheticSpec};
        let train = generate_synthetic_dataset(&SyntheticSpec { size: 32, count: 200, seed: 10 });
        let held = generate_synthetic_dataset(&SyntheticSpec { size: 32, count: 400, seed: 11 });
        let clf = NearestCentroid::fit(&train.items, 4).unwrap();
        let images: Vec<&ImageTensor<f32>> = held.items.iter().map(|i| &i.image).collect();
        let labels: Vec<usize> = held.items.iter().map(|i| i.label).collect();
        let acc = clf.accuracy(&images, &labels);
        let mut conf = [[0usize; 4]; 4];
        for (i, l) in images.iter().zip(&labels) {
            conf[*l][clf.predict(i)] += 1;
        }
        assert!(acc >= 0.99, "{acc} {conf:?}");
    }

    #[test]
    fn sweep_table_format() {
        let rows = [SweepRow { scale: 1.0, toy_fid: 2.5 }, SweepRow { scale: 2.0, toy_fid: 1.25 }];
        assert_eq!(sweep_tsv(&rows), "scale\ttoy_fid\n1\t2.500000\n2\t1.250000\n");
        assert_eq!(best_scale(&rows).unwrap().scale, 2.0);
    }
}
