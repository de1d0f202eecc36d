//! Adam, global-norm clipping and the EMA shadow update.

use crate::module::Module;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update; `step` is 1-based.
pub fn adam_update<F: Scalar, M: Module<F>>(
    params: &mut M,
    grads: &M,
    m: &mut M,
    v: &mut M,
    lr: f64,
    step: u64,
    cfg: AdamConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let (fb1, fb2) = (F::lit(b1), F::lit(b2));
    let (gb1, gb2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
    m.zip_apply(grads, |mi, g| *mi = fb1 * *mi + gb1 * g);
    v.zip_apply(grads, |vi, g| *vi = fb2 * *vi + gb2 * g * g);
    if lr == 0.0 {
        return;
    }
    let step_size = F::lit(lr / c1);
    let inv_c2 = F::lit(1.0 / c2);
    let eps = F::lit(cfg.eps);
    let mut params_t = params.tensors_mut();
    let m_t = m.tensors();
    let v_t = v.tensors();
    for (((_, p), (_, mt)), (_, vt)) in params_t.iter_mut().zip(&m_t).zip(&v_t) {
        ndarray::Zip::from(p).and(mt).and(vt).for_each(|p, &mi, &vi| {
            *p -= step_size * mi / ((vi * inv_c2).sqrt() + eps);
        });
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<F: Scalar, M: Module<F>>(grads: &mut M, max_norm: f64) -> f64 {
    let norm = grads.sum_squares().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = F::lit(max_norm / norm);
        for (_, mut t) in grads.tensors_mut() {
            t.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update<F: Scalar, M: Module<F>>(ema: &mut M, params: &M, decay: f64) {
    let d = F::lit(decay);
    let one_minus = F::lit(1.0 - decay);
    ema.zip_apply(params, |e, p| *e = d * *e + one_minus * p);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn ema_examples() {
        let params: Array1<f64> = array![2.0, -4.0];
        let mut ema = Array1::zeros(2);
        ema_update(&mut ema, &params, 0.5);
        assert_eq!(ema, array![1.0, -2.0]);
        let before = ema.clone();
        ema_update(&mut ema, &params, 1.0);
        assert_eq!(ema, before);
        ema_update(&mut ema, &params, 0.0);
        assert_eq!(ema, params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p: Array1<f64> = array![1.0, 1.0];
        let g = array![0.3, -2.0];
        let mut m = Array1::zeros(2);
        let mut v = Array1::zeros(2);
        adam_update(&mut p, &g, &mut m, &mut v, 0.1, 1, AdamConfig::default());
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p: Array1<f64> = array![1.0, 2.0];
        let mut m = Array1::zeros(2);
        let mut v = Array1::zeros(2);
        adam_update(&mut p, &array![1.0, 1.0], &mut m, &mut v, 0.0, 1, AdamConfig::default());
        assert_eq!(p, array![1.0, 2.0]);
    }

    #[test]
    fn clipping() {
        let mut g: Array1<f64> = array![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small: Array1<f64> = array![0.1, 0.0];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, array![0.1, 0.0]);
    }
}
