//! Training loop: per-sample flow-matching losses, Adam with warmup, EMA.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AlignPooling, ModelConfig, Parameterization, RunConfig, TrainConfig};
use crate::data::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::flow_matching::{
    alignment_loss_grad, freq_fm_loss_grad, interpolate, sample_time, target_velocity, velocity_mse_grad,
    xpred_to_velocity, FreqWeightProfile, LossParts, LossWeights,
};
use crate::model::HyperDit;
use crate::module::Module;
use crate::optim::{adam_update, clip_global_norm, ema_update, AdamConfig};
use crate::runtime::map_chunks;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;
use crate::vfm::{pool_tokens, FeatureFile, MockExtractor};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: HyperDit<f32>,
    pub ema: HyperDit<f32>,
    pub adam_m: HyperDit<f32>,
    pub adam_v: HyperDit<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: parameters from `seed`, EMA equal to them, zero moments.
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = HyperDit::new(model.clone(), seed)?;
        let zeros = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { step: 0, ema: params.clone(), params, adam_m: zeros.clone(), adam_v: zeros, rng })
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Step count after the update.
    pub step: u64,
    pub lr: f64,
    /// Batch means of each loss term.
    pub losses: LossParts,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Labels actually fed to the model (after dropout).
    pub labels: Vec<usize>,
    pub times: Vec<f64>,
}

/// Randomness drawn for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDraw<F = f32> {
    pub t: f64,
    pub eps: ImageTensor<F>,
    pub label: usize,
}

fn loss_weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights { freq: cfg.lambda_freq, align: cfg.lambda_align }
}

/// Loss terms for one example; adds `scale` times the parameter gradient of
/// the weighted total into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn example_gradient<F: Scalar>(
    model: &HyperDit<F>,
    x0: &ImageTensor<F>,
    draw: &ExampleDraw<F>,
    target_features: Option<&Array2<F>>,
    cfg: &TrainConfig,
    profile: &FreqWeightProfile,
    scale: F,
    grad: &mut HyperDit<F>,
) -> Result<LossParts> {
    let t = draw.t;
    let z = interpolate(x0, &draw.eps, F::lit(t))?;
    let (out, cache) = model.forward_train(&z, t, draw.label)?;
    let velocity = match model.config().parameterization {
        Parameterization::VPred => out.output.clone(),
        Parameterization::XPred => xpred_to_velocity(&out.output, &z, t, cfg.t_guard)?,
    };
    let target = target_velocity(x0, &draw.eps)?;
    let (fm, mut d_v) = velocity_mse_grad(&velocity, &target)?;
    let mut parts = LossParts { fm, ..LossParts::default() };
    if cfg.lambda_freq > 0.0 {
        let (freq, d_freq) = freq_fm_loss_grad(&velocity, &target, profile)?;
        parts.freq = freq;
        d_v = d_v.axpy(F::lit(cfg.lambda_freq), &d_freq)?;
    }
    let d_out = match model.config().parameterization {
        Parameterization::VPred => d_v.map(|g| g * scale),
        Parameterization::XPred => {
            let k = scale / F::lit(1.0 - t);
            d_v.map(|g| g * k)
        }
    };
    let mut d_proj = None;
    if cfg.lambda_align > 0.0 {
        if let (Some(projected), Some(feats)) = (&out.projected, target_features) {
            let (align, g) = alignment_loss_grad(projected, feats)?;
            parts.align = align;
            let k = F::lit(cfg.lambda_align) * scale;
            d_proj = Some(g.mapv(|v| v * k));
        }
    }
    model.backward(&cache, &d_out, d_proj.as_ref(), grad)?;
    Ok(parts)
}

/// Weighted total loss of one example under fixed randomness.
pub fn example_loss<F: Scalar>(
    model: &HyperDit<F>,
    x0: &ImageTensor<F>,
    draw: &ExampleDraw<F>,
    target_features: Option<&Array2<F>>,
    cfg: &TrainConfig,
    profile: &FreqWeightProfile,
) -> Result<f64> {
    let mut scratch = model.zeros_like();
    let parts = example_gradient(model, x0, draw, target_features, cfg, profile, F::zero(), &mut scratch)?;
    Ok(parts.total(loss_weights(cfg)))
}

/// One optimizer step on `batch`.
///
/// `features[i]` are the alignment targets for `batch[i]`. Randomness (time,
/// noise, label dropout) is drawn from `state.rng` in batch order.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&LabeledImage],
    features: Option<&[&Array2<f32>]>,
    cfg: &TrainConfig,
    profile: &FreqWeightProfile,
    lr: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("train.batch: empty batch".into()));
    }
    if let Some(f) = features {
        if f.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!("{} feature sets for {} images", f.len(), batch.len())));
        }
    }
    let model_cfg = state.params.config().clone();
    let null = state.params.null_class();
    let t_max = match model_cfg.parameterization {
        Parameterization::VPred => 1.0,
        Parameterization::XPred => 1.0 - cfg.t_guard,
    };
    let draws: Vec<ExampleDraw> = batch
        .iter()
        .map(|item| {
            let t = sample_time(&mut state.rng, cfg.time_sampler).min(t_max);
            let (c, h, w) = item.image.dims();
            let eps = ImageTensor::randn(c, h, w, &mut state.rng);
            let drop = state.rng.random::<f64>() < cfg.label_dropout;
            ExampleDraw { t, eps, label: if drop { null } else { item.label } }
        })
        .collect();

    let scale = 1.0 / batch.len() as f32;
    let params = &state.params;
    let chunks = map_chunks(batch.len(), |range| -> Result<(HyperDit<f32>, Vec<LossParts>)> {
        let mut grad = params.zeros_like();
        let mut parts = Vec::with_capacity(range.len());
        for i in range {
            let feats = features.map(|f| f[i]);
            parts.push(example_gradient(params, &batch[i].image, &draws[i], feats, cfg, profile, scale, &mut grad)?);
        }
        Ok((grad, parts))
    });
    let mut grad: Option<HyperDit<f32>> = None;
    let mut all_parts = Vec::with_capacity(batch.len());
    for chunk in chunks {
        let (g, parts) = chunk?;
        all_parts.extend(parts);
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => acc.zip_apply(&g, |a, b| *a += b),
        }
    }
    let mut grad = grad.expect("non-empty batch");

    let n = all_parts.len() as f64;
    let losses = LossParts {
        fm: all_parts.iter().map(|p| p.fm).sum::<f64>() / n,
        freq: all_parts.iter().map(|p| p.freq).sum::<f64>() / n,
        align: all_parts.iter().map(|p| p.align).sum::<f64>() / n,
    };
    let total = losses.total(loss_weights(cfg));
    let next = state.step + 1;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: next,
            detail: format!("fm {} freq {} align {}", losses.fm, losses.freq, losses.align),
        });
    }
    let grad_norm = clip_global_norm(&mut grad, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step: next, detail: "non-finite gradient norm".into() });
    }
    let adam = AdamConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps };
    adam_update(&mut state.params, &grad, &mut state.adam_m, &mut state.adam_v, lr, next, adam);
    ema_update(&mut state.ema, &state.params, cfg.ema_decay);
    state.step = next;
    Ok(StepReport {
        step: next,
        lr,
        losses,
        total,
        grad_norm,
        labels: draws.iter().map(|d| d.label).collect(),
        times: draws.iter().map(|d| d.t).collect(),
    })
}

/// Alignment targets for every dataset item, in dataset order.
pub fn dataset_features(
    config: &RunConfig,
    dataset: &Dataset,
    file: Option<&FeatureFile>,
) -> Result<Option<Vec<Array2<f32>>>> {
    let model = &config.model;
    if config.train.lambda_align == 0.0 || model.registers == 0 || model.align_dim == 0 {
        return Ok(None);
    }
    let raw: Vec<Array2<f32>> = match file {
        Some(file) => {
            if file.dim != model.align_dim {
                return Err(Error::Config(format!(
                    "model.align_dim: {} but feature file has D_f = {}",
                    model.align_dim, file.dim
                )));
            }
            let index = file.by_id();
            dataset
                .items
                .iter()
                .map(|item| {
                    index
                        .get(item.id.as_str())
                        .map(|t| (*t).clone())
                        .ok_or_else(|| Error::Config(format!("feature file has no record for `{}`", item.id)))
                })
                .collect::<Result<_>>()?
        }
        None => {
            let extractor =
                MockExtractor::new(model.channels, config.features.tokens, model.align_dim, config.features.seed)?;
            dataset.items.iter().map(|item| extractor.extract(&item.image)).collect::<Result<_>>()?
        }
    };
    let k = raw.first().map(|t| t.nrows()).unwrap_or(model.registers);
    if k == model.registers {
        return Ok(Some(raw));
    }
    match config.train.align_pooling {
        AlignPooling::Strict => Err(Error::Config(format!(
            "train.align_pooling: {} feature tokens vs model.registers = {}; set align_pooling = \"mean_pool\" to pool",
            k, model.registers
        ))),
        AlignPooling::MeanPool => raw.iter().map(|t| pool_tokens(t, model.registers)).collect::<Result<_>>().map(Some),
    }
}

/// Drives [`train_step`] over a dataset with per-epoch shuffling and warmup.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub dataset: &'a Dataset,
    features: Option<Vec<Array2<f32>>>,
    profile: FreqWeightProfile,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, dataset: &'a Dataset, features: Option<Vec<Array2<f32>>>) -> Result<Self> {
        let state = TrainState::new(&config.model, config.train.seed)?;
        Self::resume(config, dataset, features, state)
    }

    pub fn resume(
        config: RunConfig,
        dataset: &'a Dataset,
        features: Option<Vec<Array2<f32>>>,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if state.params.config() != &config.model {
            return Err(Error::VersionMismatch("training state was built for a different model configuration".into()));
        }
        if dataset.len() < config.train.batch {
            return Err(Error::Config(format!(
                "train.batch: {} exceeds dataset size {}",
                config.train.batch,
                dataset.len()
            )));
        }
        if let Some(f) = &features {
            if f.len() != dataset.len() {
                return Err(Error::DimensionMismatch(format!("{} feature sets for {} images", f.len(), dataset.len())));
            }
        }
        let m = &config.model;
        let profile = FreqWeightProfile::from_config(config.train.freq_profile, m.image_height, m.image_width);
        Ok(Self { config, dataset, features, profile, state })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.dataset.len() / self.config.train.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.max_steps.unwrap_or(self.config.train.epochs as u64 * self.steps_per_epoch())
    }

    pub fn warmup_steps(&self) -> u64 {
        self.config.train.warmup_epochs as u64 * self.steps_per_epoch()
    }

    /// Learning rate for the 1-based update number `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps();
        let lr = self.config.train.lr;
        if warmup == 0 || step >= warmup {
            lr
        } else {
            lr * step as f64 / warmup as f64
        }
    }

    /// Dataset indices for the 0-based update number `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(epoch.wrapping_add(2));
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng);
        let b = self.config.train.batch;
        order[within * b..(within + 1) * b].to_vec()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let indices = self.batch_indices(self.state.step);
        let batch: Vec<&LabeledImage> = indices.iter().map(|&i| &self.dataset.items[i]).collect();
        let feats: Option<Vec<&Array2<f32>>> = self.features.as_ref().map(|f| indices.iter().map(|&i| &f[i]).collect());
        let lr = self.lr_at(self.state.step + 1);
        train_step(&mut self.state, &batch, feats.as_deref(), &self.config.train, &self.profile, lr)
    }

    /// Steps until `state.step == until`, calling `on_step` after each update.
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.state.step < until {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FrequencyProfile;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use rand::seq::IndexedRandom;
    use rand_distr::StandardNormal;

    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            image_height: 8,
            image_width: 8,
            large_patch: 4,
            small_patch: 2,
            hidden: 16,
            heads: 2,
            depth: 2,
            connectors: 2,
            anchor_interval: 1,
            registers: 4,
            timestep_freq_dim: 16,
            align_dim: 6,
            align_hidden: 16,
            ..ModelConfig::nano()
        };
        config.features.tokens = 4;
        config.train.batch = 4;
        config.train.warmup_epochs = 1;
        config.train.lr = 1e-3;
        config
    }

    fn data(n: usize) -> Dataset {
        generate_synthetic_dataset(&SyntheticSpec { size: 8, count: n, seed: 3 })
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let config = tiny_config();
        let ds = data(16);
        let trainer = Trainer::new(config, &ds, None).unwrap();
        assert_eq!(trainer.warmup_steps(), 4);
        assert!((trainer.lr_at(1) - 0.25e-3).abs() < 1e-15);
        assert!((trainer.lr_at(3) - 0.75e-3).abs() < 1e-15);
        assert_eq!(trainer.lr_at(4), 1e-3);
        assert_eq!(trainer.lr_at(400), 1e-3);
    }

    #[test]
    fn epochs_visit_every_item_once() {
        let ds = data(16);
        let trainer = Trainer::new(tiny_config(), &ds, None).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|s| trainer.batch_indices(s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        assert_ne!(trainer.batch_indices(0), trainer.batch_indices(4));
    }

    #[test]
    fn zero_lr_leaves_params_and_blends_ema() {
        let mut config = tiny_config();
        config.train.lr = 1e-9;
        config.train.ema_decay = 0.5;
        let ds = data(8);
        let feats = dataset_features(&config, &ds, None).unwrap();
        let mut trainer = Trainer::new(config.clone(), &ds, feats).unwrap();
        trainer.state.ema.fill(0.0);
        let before = trainer.state.params.clone();
        let batch: Vec<&LabeledImage> = ds.items[..4].iter().collect();
        let profile = FreqWeightProfile::uniform(8, 8);
        train_step(&mut trainer.state, &batch, None, &config.train, &profile, 0.0).unwrap();
        assert_eq!(trainer.state.params, before);
        let mut half = before.clone();
        for (_, mut t) in half.tensors_mut() {
            t.mapv_inplace(|v| 0.5 * v);
        }
        assert_eq!(trainer.state.ema, half);
    }

    #[test]
    fn full_dropout_uses_null_class() {
        let mut config = tiny_config();
        config.train.label_dropout = 1.0;
        let ds = data(8);
        let mut trainer = Trainer::new(config, &ds, None).unwrap();
        let report = trainer.step().unwrap();
        assert!(report.labels.iter().all(|&l| l == trainer.state.params.null_class()));
        let mut config = tiny_config();
        config.train.label_dropout = 0.0;
        let mut trainer = Trainer::new(config, &ds, None).unwrap();
        let idx = trainer.batch_indices(0);
        let report = trainer.step().unwrap();
        let expected: Vec<usize> = idx.iter().map(|&i| ds.items[i].label).collect();
        assert_eq!(report.labels, expected);
    }

    #[test]
    fn alignment_count_mismatch_needs_pooling() {
        let mut config = tiny_config();
        config.features.tokens = 16;
        let ds = data(4);
        assert!(dataset_features(&config, &ds, None).unwrap_err().to_string().contains("train.align_pooling"));
        config.train.align_pooling = AlignPooling::MeanPool;
        let feats = dataset_features(&config, &ds, None).unwrap().unwrap();
        assert_eq!(feats[0].dim(), (4, 6));
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config();
        let ds = data(8);
        let feats = dataset_features(&config, &ds, None).unwrap();
        let run = || {
            let mut t = Trainer::new(config.clone(), &ds, feats.clone()).unwrap();
            (0..3).map(|_| t.step().unwrap().total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn xpred_training_runs() {
        let mut config = tiny_config();
        config.model.parameterization = Parameterization::XPred;
        let ds = data(8);
        let mut t = Trainer::new(config, &ds, None).unwrap();
        for _ in 0..3 {
            let r = t.step().unwrap();
            assert!(r.total.is_finite() && r.times.iter().all(|&s| s <= 1.0 - 1e-3));
        }
    }
    fn nudge(model: &mut HyperDit<f64>, index: usize, delta: f64) {
        let mut offset = index;
        for (_, mut t) in model.tensors_mut() {
            if offset < t.len() {
                *t.iter_mut().nth(offset).unwrap() += delta;
                return;
            }
            offset -= t.len();
        }
        panic!("index out of range");
    }

    fn flat(model: &HyperDit<f64>) -> Vec<f64> {
        model.tensors().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
    }

    fn gradient_check(parameterization: Parameterization) {
        let mut config = tiny_config();
        config.model.hidden = 8;
        config.model.timestep_freq_dim = 8;
        config.model.align_hidden = 8;
        config.model.mlp_ratio = 2;
        config.model.num_classes = 2;
        config.model.channels = 1;
        config.model.timestep_freq_dim = 4;
        config.model.registers = 2;
        config.model.parameterization = parameterization;
        config.train.freq_profile = FrequencyProfile::HighPass { strength: 2.0 };
        let count = crate::model::count_parameters(&config.model);
        assert!(count <= 5000, "{count}");

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = HyperDit::<f64>::new(config.model.clone(), 4).unwrap();
        for (_, mut t) in model.tensors_mut() {
            t.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let x0 = ImageTensor::randn(1, 8, 8, &mut rng);
        let draw = ExampleDraw { t: 0.37, eps: ImageTensor::randn(1, 8, 8, &mut rng), label: 1 };
        let feats = Array2::from_shape_simple_fn((2, 6), || rng.sample::<f64, _>(StandardNormal));
        let profile = FreqWeightProfile::from_config(config.train.freq_profile, 8, 8);
        let cfg = &config.train;

        let mut grad = model.zeros_like();
        example_gradient(&model, &x0, &draw, Some(&feats), cfg, &profile, 1.0, &mut grad).unwrap();
        let analytic = flat(&grad);
        let candidates: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-4).collect();
        let h = 1e-5;
        let mut checked = 0;
        for &i in candidates.choose_multiple(&mut rng, 24) {
            nudge(&mut model, i, h);
            let up = example_loss(&model, &x0, &draw, Some(&feats), cfg, &profile).unwrap();
            nudge(&mut model, i, -2.0 * h);
            let down = example_loss(&model, &x0, &draw, Some(&feats), cfg, &profile).unwrap();
            nudge(&mut model, i, h);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs());
            assert!(rel < 1e-4, "coordinate {i}: analytic {} numeric {numeric}", analytic[i]);
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(Parameterization::VPred);
    }

    #[test]
    fn xpred_gradients_match_finite_differences() {
        gradient_check(Parameterization::XPred);
    }
}
