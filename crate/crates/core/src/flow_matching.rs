//! Rectified-flow interpolation, velocity targets and the training losses.
//!
//! Convention: `z_t = t·x0 + (1 − t)·ε`, so `t = 0` is noise and `t = 1` is data,
//! and the target velocity is `x0 − ε`.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::config::{FrequencyProfile, TimeSampler};
use crate::error::{shape_err, Error, Result};
use crate::patching::TokenMap;
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, TokenSequence};

pub fn interpolate<F: Scalar>(x0: &ImageTensor<F>, eps: &ImageTensor<F>, t: F) -> Result<ImageTensor<F>> {
    x0.zip_map(eps, |a, e| t * a + (F::one() - t) * e)
}

pub fn target_velocity<F: Scalar>(x0: &ImageTensor<F>, eps: &ImageTensor<F>) -> Result<ImageTensor<F>> {
    x0.zip_map(eps, |a, e| a - e)
}

/// Converts a clean-image prediction into the velocity `(x_pred − z_t)/(1 − t)`.
pub fn xpred_to_velocity<F: Scalar>(
    x_pred: &ImageTensor<F>,
    z_t: &ImageTensor<F>,
    t: f64,
    t_guard: f64,
) -> Result<ImageTensor<F>> {
    let gap = 1.0 - t;
    if !(gap >= t_guard) {
        return Err(Error::Singularity { gap, guard: t_guard });
    }
    let inv = F::lit(1.0 / gap);
    x_pred.zip_map(z_t, |x, z| (x - z) * inv)
}

/// Mean squared error of `v_pred` against the target velocity `x0 − ε`.
pub fn fm_loss<F: Scalar>(v_pred: &ImageTensor<F>, x0: &ImageTensor<F>, eps: &ImageTensor<F>) -> Result<f64> {
    velocity_mse(v_pred, &target_velocity(x0, eps)?)
}

/// Mean squared error between two velocity fields, accumulated in f64.
pub fn velocity_mse<F: Scalar>(v_pred: &ImageTensor<F>, target: &ImageTensor<F>) -> Result<f64> {
    v_pred.ensure_same_shape(target)?;
    let n = v_pred.len() as f64;
    let sum: f64 =
        Zip::from(v_pred.data()).and(target.data()).fold(0.0, |acc, &a, &b| acc + (a.as_f64() - b.as_f64()).powi(2));
    Ok(sum / n)
}

/// [`velocity_mse`] and its gradient with respect to `v_pred`.
pub fn velocity_mse_grad<F: Scalar>(v_pred: &ImageTensor<F>, target: &ImageTensor<F>) -> Result<(f64, ImageTensor<F>)> {
    let loss = velocity_mse(v_pred, target)?;
    let scale = F::lit(2.0 / v_pred.len() as f64);
    let grad = v_pred.zip_map(target, |a, b| (a - b) * scale)?;
    Ok((loss, grad))
}

/// Non-negative per-frequency weights on an `H × W` DFT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqWeightProfile {
    weights: Array2<f64>,
}

impl FreqWeightProfile {
    pub fn uniform(height: usize, width: usize) -> Self {
        Self { weights: Array2::ones((height, width)) }
    }

    /// `1 + strength·r`, with `r ∈ [0, 1]` the radial distance of the
    /// (wrapped) frequency from DC, normalized by its maximum.
    pub fn high_pass(height: usize, width: usize, strength: f64) -> Self {
        let wrap = |k: usize, n: usize| {
            let k = k as f64;
            let n = n as f64;
            if k <= n / 2.0 {
                k / n
            } else {
                (n - k) / n
            }
        };
        let max_r = (0.5f64.powi(2) * 2.0).sqrt();
        let weights = Array2::from_shape_fn((height, width), |(u, v)| {
            let r = (wrap(u, height).powi(2) + wrap(v, width).powi(2)).sqrt() / max_r;
            1.0 + strength * r
        });
        Self { weights }
    }

    pub fn from_config(profile: FrequencyProfile, height: usize, width: usize) -> Self {
        match profile {
            FrequencyProfile::Uniform => Self::uniform(height, width),
            FrequencyProfile::HighPass { strength } => Self::high_pass(height, width, strength),
        }
    }

    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("frequency weights must be finite and non-negative".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// Orthonormal 2D DFT of one `H × W` plane, in place.
fn dft2(plane: &mut Array2<Complex64>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = plane.dim();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut row in plane.rows_mut() {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, &x)| *b = x);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(x, &b)| *x = b);
    }
    for mut col in plane.columns_mut() {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, &x)| *b = x);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(x, &b)| *x = b);
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    plane.mapv_inplace(|x| x * norm);
}

fn residual_spectra<F: Scalar>(
    v_pred: &ImageTensor<F>,
    target: &ImageTensor<F>,
    profile: &FreqWeightProfile,
    planner: &mut FftPlanner<f64>,
) -> Result<Vec<Array2<Complex64>>> {
    v_pred.ensure_same_shape(target)?;
    let (c, h, w) = v_pred.dims();
    if profile.weights.dim() != (h, w) {
        return Err(shape_err(format!("{h}x{w} frequency weights"), format!("{:?}", profile.weights.dim())));
    }
    let mut spectra = Vec::with_capacity(c);
    for ch in 0..c {
        let mut plane = Array2::from_shape_fn((h, w), |(y, x)| {
            let r = v_pred.data()[[ch, y, x]].as_f64() - target.data()[[ch, y, x]].as_f64();
            Complex64::new(r, 0.0)
        });
        dft2(&mut plane, planner, false);
        spectra.push(plane);
    }
    Ok(spectra)
}

/// Weighted squared error of the residual's orthonormal spectrum, averaged
/// over `C·H·W`. With uniform unit weights this equals [`velocity_mse`].
pub fn freq_fm_loss<F: Scalar>(
    v_pred: &ImageTensor<F>,
    target: &ImageTensor<F>,
    profile: &FreqWeightProfile,
) -> Result<f64> {
    let mut planner = FftPlanner::new();
    let spectra = residual_spectra(v_pred, target, profile, &mut planner)?;
    let mut sum = 0.0;
    for plane in &spectra {
        sum += Zip::from(plane).and(&profile.weights).fold(0.0, |acc, z, &w| acc + w * z.norm_sqr());
    }
    Ok(sum / v_pred.len() as f64)
}

/// [`freq_fm_loss`] and its gradient `2·Re(Fᴴ W F r)/(C·H·W)` with respect to `v_pred`.
pub fn freq_fm_loss_grad<F: Scalar>(
    v_pred: &ImageTensor<F>,
    target: &ImageTensor<F>,
    profile: &FreqWeightProfile,
) -> Result<(f64, ImageTensor<F>)> {
    let mut planner = FftPlanner::new();
    let spectra = residual_spectra(v_pred, target, profile, &mut planner)?;
    let (c, h, w) = v_pred.dims();
    let n = v_pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = ImageTensor::zeros(c, h, w);
    for (ch, mut plane) in spectra.into_iter().enumerate() {
        Zip::from(&mut plane).and(&profile.weights).for_each(|z, &wt| {
            sum += wt * z.norm_sqr();
            *z *= wt;
        });
        dft2(&mut plane, &mut planner, true);
        let mut out = grad.data_mut().index_axis_mut(ndarray::Axis(0), ch);
        Zip::from(&mut out).and(&plane).for_each(|g, z| *g = F::lit(2.0 * z.re / n));
    }
    Ok((sum / n, grad))
}

/// `1 − mean_i cos(projected_i, target_i)` over matching token rows.
pub fn alignment_loss<F: Scalar>(projected: &Array2<F>, targets: &Array2<F>) -> Result<f64> {
    alignment_loss_grad(projected, targets).map(|(loss, _)| loss)
}

/// [`alignment_loss`] and its gradient with respect to `projected`.
pub fn alignment_loss_grad<F: Scalar>(projected: &Array2<F>, targets: &Array2<F>) -> Result<(f64, Array2<F>)> {
    if projected.dim() != targets.dim() {
        return Err(Error::DimensionMismatch(format!(
            "projected registers {:?} vs feature tokens {:?}",
            projected.dim(),
            targets.dim()
        )));
    }
    let n = projected.nrows();
    if n == 0 {
        return Err(Error::DimensionMismatch("no tokens to align".into()));
    }
    let mut grad = Array2::zeros(projected.dim());
    let mut cos_sum = 0.0;
    for (i, (a, b)) in projected.rows().into_iter().zip(targets.rows()).enumerate() {
        let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm(i));
        }
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        let cos = dot / (na * nb);
        cos_sum += cos;
        // d(−cos/n)/da = −(b/(|a||b|) − cos·a/|a|²)/n
        for ((g, x), y) in grad.row_mut(i).iter_mut().zip(a.iter()).zip(b.iter()) {
            *g = F::lit(-(y.as_f64() / (na * nb) - cos * x.as_f64() / (na * na)) / n as f64);
        }
    }
    Ok((1.0 - cos_sum / n as f64, grad))
}

/// Alignment loss of registers mapped through `proj` against feature tokens, index-paired.
pub fn repa_loss<F: Scalar>(
    register_outputs: &TokenSequence<F>,
    vfm_features: &TokenSequence<F>,
    proj: &impl TokenMap<F>,
) -> Result<f64> {
    if register_outputs.len() != vfm_features.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} registers vs {} feature tokens",
            register_outputs.len(),
            vfm_features.len()
        )));
    }
    let projected = proj.map_tokens(&register_outputs.tokens);
    alignment_loss(&projected, &vfm_features.tokens)
}

/// Loss coefficients for the frequency and alignment terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub freq: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { freq: 1.0, align: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub fm: f64,
    pub freq: f64,
    pub align: f64,
}

impl LossParts {
    pub fn total(&self, weights: LossWeights) -> f64 {
        self.fm + weights.freq * self.freq + weights.align * self.align
    }
}

pub fn total_loss(parts: LossParts, weights: LossWeights) -> f64 {
    parts.total(weights)
}

/// Draws `t ∈ (0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R, sampler: TimeSampler) -> f64 {
    const EDGE: f64 = 1e-7;
    let t = match sampler {
        TimeSampler::Uniform => rng.random::<f64>(),
        TimeSampler::LogitNormal { mean, std } => {
            let n: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-(mean + std * n)).exp())
        }
    };
    t.clamp(EDGE, 1.0 - EDGE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor<f64> {
        ImageTensor::randn(c, h, w, rng)
    }

    #[test]
    fn interpolation_endpoints_and_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_img(&mut rng, 2, 4, 4);
        let eps = rand_img(&mut rng, 2, 4, 4);
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), eps);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), x0);
        let half = interpolate(&ImageTensor::filled(1, 2, 2, 2.0), &ImageTensor::zeros(1, 2, 2), 0.5).unwrap();
        assert!(half.data().iter().all(|&v| v == 1.0));
        let v = target_velocity(&x0, &eps).unwrap();
        let h = 1e-5;
        let zp = interpolate(&x0, &eps, 0.3 + h).unwrap();
        let zm = interpolate(&x0, &eps, 0.3 - h).unwrap();
        let fd = zp.zip_map(&zm, |a, b| (a - b) / (2.0 * h)).unwrap();
        assert!(fd.max_abs_diff(&v) < 1e-8);
    }

    #[test]
    fn fm_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_img(&mut rng, 2, 4, 4);
        let eps = rand_img(&mut rng, 2, 4, 4);
        let v = target_velocity(&x0, &eps).unwrap();
        assert_eq!(fm_loss(&v, &x0, &eps).unwrap(), 0.0);
        let zero = ImageTensor::zeros(2, 4, 4);
        let direct = v.mean_square();
        assert!((fm_loss(&zero, &x0, &eps).unwrap() - direct).abs() < 1e-12);
        let doubled = v.axpy(-2.0, &v).unwrap();
        assert!((fm_loss(&doubled, &x0, &eps).unwrap() - 4.0 * direct).abs() < 1e-12);
    }

    #[test]
    fn xpred_velocity_and_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_img(&mut rng, 1, 4, 4);
        let eps = rand_img(&mut rng, 1, 4, 4);
        let truth = target_velocity(&x0, &eps).unwrap();
        for t in [0.0, 0.4, 0.99] {
            let z = interpolate(&x0, &eps, t).unwrap();
            let v = xpred_to_velocity(&x0, &z, t, 1e-3).unwrap();
            assert!(v.max_abs_diff(&truth) < 1e-10);
        }
        let z = interpolate(&x0, &eps, 0.5).unwrap();
        assert!(matches!(xpred_to_velocity(&x0, &z, 0.999999, 1e-3), Err(Error::Singularity { .. })));
    }

    #[test]
    fn uniform_frequency_loss_matches_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_img(&mut rng, 3, 8, 6);
        let b = rand_img(&mut rng, 3, 8, 6);
        let profile = FreqWeightProfile::uniform(8, 6);
        let fm = velocity_mse(&a, &b).unwrap();
        let fq = freq_fm_loss(&a, &b, &profile).unwrap();
        assert!((fm - fq).abs() <= 1e-12 * fm.max(1.0));
        let (_, g1) = velocity_mse_grad(&a, &b).unwrap();
        let (_, g2) = freq_fm_loss_grad(&a, &b, &profile).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn frequency_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_img(&mut rng, 2, 5, 4);
        let b = rand_img(&mut rng, 2, 5, 4);
        let profile = FreqWeightProfile::high_pass(5, 4, 3.0);
        let (_, g) = freq_fm_loss_grad(&a, &b, &profile).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 3], [0, 4, 1]] {
            let mut p = a.clone();
            p.data_mut()[idx] += h;
            let mut m = a.clone();
            m.data_mut()[idx] -= h;
            let num = (freq_fm_loss(&p, &b, &profile).unwrap() - freq_fm_loss(&m, &b, &profile).unwrap()) / (2.0 * h);
            assert!((num - g.data()[idx]).abs() < 1e-7, "{num} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn high_pass_weights_grow_with_frequency() {
        let p = FreqWeightProfile::high_pass(8, 8, 2.0);
        let w = p.weights();
        assert_eq!(w[[0, 0]], 1.0);
        assert!(w[[4, 4]] > w[[1, 1]]);
        assert!((w[[4, 4]] - 3.0).abs() < 1e-12);
        assert_eq!(w[[1, 0]], w[[7, 0]]);
    }

    #[test]
    fn alignment_loss_bounds_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Array2<f64> = Array2::from_shape_simple_fn((4, 6), || StandardNormal.sample(&mut rng));
        assert!(alignment_loss(&a, &a).unwrap().abs() < 1e-12);
        let neg = a.mapv(|x| -x);
        assert!((alignment_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-12);
        let b: Array2<f64> = Array2::from_shape_simple_fn((4, 6), || StandardNormal.sample(&mut rng));
        let (_, g) = alignment_loss_grad(&a, &b).unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (3, 5)] {
            let mut p = a.clone();
            p[[i, j]] += h;
            let mut m = a.clone();
            m[[i, j]] -= h;
            let num = (alignment_loss(&p, &b).unwrap() - alignment_loss(&m, &b).unwrap()) / (2.0 * h);
            assert!((num - g[[i, j]]).abs() < 1e-8);
        }
        let mut zero = a.clone();
        zero.row_mut(2).fill(0.0);
        assert!(matches!(alignment_loss(&zero, &b), Err(Error::ZeroNorm(2))));
        assert!(matches!(
            alignment_loss(&a, &b.slice(ndarray::s![..3, ..]).to_owned()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_profile_and_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_img(&mut rng, 2, 4, 4);
        let b = rand_img(&mut rng, 2, 4, 4);
        let zero = FreqWeightProfile::from_weights(Array2::zeros((4, 4))).unwrap();
        assert_eq!(freq_fm_loss(&a, &b, &zero).unwrap(), 0.0);
        assert_eq!(freq_fm_loss(&a, &a, &FreqWeightProfile::uniform(4, 4)).unwrap(), 0.0);
        assert!(freq_fm_loss(&a, &b, &FreqWeightProfile::uniform(4, 5)).is_err());
        assert!(FreqWeightProfile::from_weights(Array2::from_elem((2, 2), -1.0)).is_err());
    }

    #[test]
    fn repa_loss_through_projection() {
        use crate::patching::Identity;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Array2<f64> = Array2::from_shape_simple_fn((3, 4), || StandardNormal.sample(&mut rng));
        let regs = TokenSequence::non_spatial(a.clone());
        let scaled = TokenSequence::non_spatial(a.mapv(|x| 3.0 * x));
        assert!(repa_loss(&regs, &scaled, &Identity).unwrap().abs() < 1e-12);
        let short = TokenSequence::non_spatial(a.slice(ndarray::s![..2, ..]).to_owned());
        assert!(matches!(repa_loss(&regs, &short, &Identity), Err(Error::DimensionMismatch(_))));
        let e = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let o = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        assert!((alignment_loss(&e, &o).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logit_normal_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ts: Vec<f64> =
            (0..100_000).map(|_| sample_time(&mut rng, TimeSampler::LogitNormal { mean: 0.0, std: 1.0 })).collect();
        ts.sort_by(f64::total_cmp);
        assert!((ts[50_000] - 0.5).abs() < 0.01);
    }

    #[test]
    fn time_samples_are_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for sampler in [TimeSampler::Uniform, TimeSampler::LogitNormal { mean: 0.0, std: 1.0 }] {
            let ts: Vec<f64> = (0..2000).map(|_| sample_time(&mut rng, sampler)).collect();
            assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
            let mean = ts.iter().sum::<f64>() / ts.len() as f64;
            assert!((mean - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn total_combines_terms() {
        let parts = LossParts { fm: 1.0, freq: 2.0, align: 4.0 };
        assert_eq!(total_loss(parts, LossWeights::default()), 1.0 + 2.0 + 2.0);
    }
}
