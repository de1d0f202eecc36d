//! Probability-flow ODE integration from noise (`t = 0`) to data (`t = 1`)
//! with interval-gated classifier-free guidance.

use rand::Rng;

use crate::config::{CfgPolicy, Parameterization, SamplerConfig, SamplerMethod};
use crate::error::Result;
use crate::flow_matching::xpred_to_velocity;
use crate::model::HyperDit;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Anything that maps `(z_t, t, label)` to a raw prediction.
pub trait Denoiser<F: Scalar> {
    fn predict(&self, z: &ImageTensor<F>, t: f64, label: usize) -> Result<ImageTensor<F>>;
    fn parameterization(&self) -> Parameterization;
    fn null_class(&self) -> usize;
    /// `(channels, height, width)` of generated images.
    fn image_dims(&self) -> (usize, usize, usize);
}

impl<F: Scalar> Denoiser<F> for HyperDit<F> {
    fn predict(&self, z: &ImageTensor<F>, t: f64, label: usize) -> Result<ImageTensor<F>> {
        self.forward(z, t, label)
    }
    fn parameterization(&self) -> Parameterization {
        self.config().parameterization
    }
    fn null_class(&self) -> usize {
        HyperDit::null_class(self)
    }
    fn image_dims(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.channels, c.image_height, c.image_width)
    }
}

/// `v_u + w·(v_c − v_u)` inside the guidance interval, `v_c` outside it.
pub fn cfg_velocity<F: Scalar>(
    v_uncond: &ImageTensor<F>,
    v_cond: &ImageTensor<F>,
    policy: &CfgPolicy,
    t: f64,
) -> Result<ImageTensor<F>> {
    v_uncond.ensure_same_shape(v_cond)?;
    if !policy.active_at(t) {
        return Ok(v_cond.clone());
    }
    let w = F::lit(policy.scale);
    v_uncond.zip_map(v_cond, |u, c| u + w * (c - u))
}

pub fn euler_step<F: Scalar>(
    z: &ImageTensor<F>,
    t: f64,
    dt: f64,
    field: &mut impl FnMut(&ImageTensor<F>, f64) -> Result<ImageTensor<F>>,
) -> Result<ImageTensor<F>> {
    let k1 = field(z, t)?;
    z.axpy(F::lit(dt), &k1)
}

/// Improved Euler: `z + dt·(k1 + k2)/2` with `k2` evaluated at the Euler lookahead.
pub fn heun_step<F: Scalar>(
    z: &ImageTensor<F>,
    t: f64,
    dt: f64,
    field: &mut impl FnMut(&ImageTensor<F>, f64) -> Result<ImageTensor<F>>,
) -> Result<ImageTensor<F>> {
    let k1 = field(z, t)?;
    let lookahead = z.axpy(F::lit(dt), &k1)?;
    let k2 = field(&lookahead, t + dt)?;
    let half = F::lit(0.5 * dt);
    let avg = k1.zip_map(&k2, |a, b| a + b)?;
    z.axpy(half, &avg)
}

/// Integrates `field` over a uniform grid of `steps` intervals on `[0, t_end]`.
///
/// With `euler_last`, the final interval skips the Heun corrector.
pub fn integrate<F: Scalar>(
    z0: ImageTensor<F>,
    t_end: f64,
    steps: usize,
    method: SamplerMethod,
    euler_last: bool,
    field: &mut impl FnMut(&ImageTensor<F>, f64) -> Result<ImageTensor<F>>,
) -> Result<ImageTensor<F>> {
    let dt = t_end / steps as f64;
    let mut z = z0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let last = k + 1 == steps;
        z = match method {
            SamplerMethod::Heun if !(last && euler_last) => heun_step(&z, t, dt, field)?,
            _ => euler_step(&z, t, dt, field)?,
        };
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct SampleOutput<F = f32> {
    pub image: ImageTensor<F>,
    /// Number of model forward passes.
    pub nfe: usize,
}

/// Draws `z_0 ~ N(0, I)` and integrates the (guided) velocity field to the data end.
pub fn sample<F: Scalar, M: Denoiser<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    label: usize,
    cfg: &CfgPolicy,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput<F>> {
    cfg.validate()?;
    sampler.validate()?;
    let (c, h, w) = model.image_dims();
    let z0 = ImageTensor::randn(c, h, w, rng);
    sample_from(model, z0, label, cfg, sampler)
}

/// As [`sample`], from a given starting noise.
pub fn sample_from<F: Scalar, M: Denoiser<F> + ?Sized>(
    model: &M,
    z0: ImageTensor<F>,
    label: usize,
    cfg: &CfgPolicy,
    sampler: &SamplerConfig,
) -> Result<SampleOutput<F>> {
    let param = model.parameterization();
    let (t_end, euler_last) = match param {
        Parameterization::VPred => (1.0, false),
        // The corrector on the last interval would evaluate at the guard boundary.
        Parameterization::XPred => (1.0 - sampler.t_guard, true),
    };
    let null = model.null_class();
    let mut nfe = 0usize;
    let mut field = |z: &ImageTensor<F>, t: f64| -> Result<ImageTensor<F>> {
        let to_velocity = |out: ImageTensor<F>| match param {
            Parameterization::VPred => Ok(out),
            Parameterization::XPred => xpred_to_velocity(&out, z, t, sampler.t_guard),
        };
        let v_cond = to_velocity(model.predict(z, t, label)?)?;
        nfe += 1;
        if !cfg.active_at(t) {
            return Ok(v_cond);
        }
        let v_uncond = to_velocity(model.predict(z, t, null)?)?;
        nfe += 1;
        cfg_velocity(&v_uncond, &v_cond, cfg, t)
    };
    let image = integrate(z0, t_end, sampler.steps, sampler.method, euler_last, &mut field)?;
    Ok(SampleOutput { image, nfe })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> ImageTensor<f64> {
        ImageTensor::filled(1, 1, 1, v)
    }

    #[test]
    fn cfg_examples() {
        let policy = CfgPolicy::new(2.0, 0.1, 1.0).unwrap();
        let v = cfg_velocity(&scalar(0.0), &scalar(1.0), &policy, 0.5).unwrap();
        assert_eq!(v.data()[[0, 0, 0]], 2.0);
        let v = cfg_velocity(&scalar(0.0), &scalar(1.0), &policy, 0.05).unwrap();
        assert_eq!(v.data()[[0, 0, 0]], 1.0);
        let ident = CfgPolicy::new(1.0, 0.0, 1.0).unwrap();
        let c = scalar(0.3);
        assert_eq!(cfg_velocity(&scalar(7.0), &c, &ident, 0.5).unwrap(), c);
        assert!(cfg_velocity(&scalar(0.0), &ImageTensor::zeros(1, 1, 2), &policy, 0.5).is_err());
    }

    #[test]
    fn heun_constant_and_linear_fields() {
        let z = scalar(1.5);
        let mut constant = |_: &ImageTensor<f64>, _: f64| Ok(scalar(0.25));
        let next = heun_step(&z, 0.2, 0.5, &mut constant).unwrap();
        assert_eq!(next.data()[[0, 0, 0]], 1.5 + 0.25 * 0.5);
        for steps in [1, 3, 8] {
            let mut linear = |_: &ImageTensor<f64>, t: f64| Ok(scalar(t));
            let end = integrate(scalar(0.0), 1.0, steps, SamplerMethod::Heun, false, &mut linear).unwrap();
            assert!((end.data()[[0, 0, 0]] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn heun_local_error_is_third_order() {
        let mut field = |z: &ImageTensor<f64>, _: f64| Ok(z.clone());
        for dt in [0.1, 0.05] {
            let next = heun_step(&scalar(1.0), 0.0, dt, &mut field).unwrap();
            assert!((next.data()[[0, 0, 0]] - (1.0 + dt + dt * dt / 2.0)).abs() < 1e-15);
        }
    }

    struct Oracle {
        x0: ImageTensor<f64>,
        eps: ImageTensor<f64>,
        param: Parameterization,
    }

    impl Denoiser<f64> for Oracle {
        fn predict(&self, _z: &ImageTensor<f64>, _t: f64, _label: usize) -> Result<ImageTensor<f64>> {
            match self.param {
                Parameterization::VPred => crate::flow_matching::target_velocity(&self.x0, &self.eps),
                Parameterization::XPred => Ok(self.x0.clone()),
            }
        }
        fn parameterization(&self) -> Parameterization {
            self.param
        }
        fn null_class(&self) -> usize {
            4
        }
        fn image_dims(&self) -> (usize, usize, usize) {
            self.x0.dims()
        }
    }

    #[test]
    fn one_euler_step_of_true_field_hits_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = ImageTensor::randn(1, 2, 2, &mut rng);
        let eps = ImageTensor::randn(1, 2, 2, &mut rng);
        let oracle = Oracle { x0: x0.clone(), eps: eps.clone(), param: Parameterization::VPred };
        let cfg = SamplerConfig { steps: 1, method: SamplerMethod::Euler, ..SamplerConfig::default() };
        let out = sample_from(&oracle, eps, 0, &CfgPolicy::disabled(), &cfg).unwrap();
        assert!(out.image.max_abs_diff(&x0) < 1e-15);
        assert_eq!(out.nfe, 1);
    }

    #[test]
    fn xpred_stops_at_guard_with_euler_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = ImageTensor::randn(1, 2, 2, &mut rng);
        let eps = ImageTensor::randn(1, 2, 2, &mut rng);
        let oracle = Oracle { x0: x0.clone(), eps: eps.clone(), param: Parameterization::XPred };
        let cfg = SamplerConfig { steps: 10, method: SamplerMethod::Heun, t_guard: 1e-3 };
        let out = sample_from(&oracle, eps.clone(), 0, &CfgPolicy::disabled(), &cfg).unwrap();
        assert_eq!(out.nfe, 2 * 9 + 1);
        let expected = crate::flow_matching::interpolate(&x0, &eps, 1.0 - 1e-3).unwrap();
        assert!(out.image.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn nfe_with_guidance_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = ImageTensor::randn(1, 2, 2, &mut rng);
        let eps = ImageTensor::randn(1, 2, 2, &mut rng);
        let oracle = Oracle { x0, eps, param: Parameterization::VPred };
        let cfg = SamplerConfig { steps: 50, method: SamplerMethod::Heun, ..SamplerConfig::default() };
        let guided = CfgPolicy::new(2.0, 0.0, 1.0).unwrap();
        let out = sample(&oracle, 0, &guided, &cfg, &mut rng).unwrap();
        assert_eq!(out.nfe, 100 * 2);
        let gated = CfgPolicy::new(2.0, 0.5, 1.0).unwrap();
        let out = sample(&oracle, 0, &gated, &cfg, &mut rng).unwrap();
        assert!(out.nfe > 100 && out.nfe < 200);
    }

    #[test]
    fn seeded_sampling_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = ImageTensor::randn(1, 2, 2, &mut rng);
        let oracle = Oracle { x0: x0.clone(), eps: x0, param: Parameterization::VPred };
        let cfg = SamplerConfig::default();
        let a = sample(&oracle, 0, &CfgPolicy::disabled(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&oracle, 0, &CfgPolicy::disabled(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.image, b.image);
    }
}
