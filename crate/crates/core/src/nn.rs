//! Layers with explicit forward/backward passes.
//!
//! Forward functions return whatever the backward pass needs; backward
//! functions accumulate parameter gradients into a same-shaped gradient
//! instance and return the gradient with respect to the input.

use std::cmp::Ordering;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::module::impl_module;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl_module!(Linear { weight, bias });

impl<F: Scalar> Linear<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || F::lit(dist.sample(rng))),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || F::lit(dist.sample(rng))),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        if x.nrows() == 1 {
            return self.forward_vec(x.row(0)).insert_axis(Axis(0));
        }
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn forward_vec(&self, x: ArrayView1<'_, F>) -> Array1<F> {
        let mut y = self.bias.clone();
        let out = y.as_slice_mut().expect("contiguous");
        for (&xi, w) in x.iter().zip(self.weight.rows()) {
            axpy(xi, w, out);
        }
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>, grad: &mut Linear<F>) -> Array2<F> {
        if x.nrows() == 1 {
            return self.backward_vec(x.row(0), dy.row(0), grad).insert_axis(Axis(0));
        }
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Accumulates `dW`, `db` only; for layers fed by data.
    pub fn backward_params(&self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>, grad: &mut Linear<F>) {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn backward_vec(&self, x: ArrayView1<'_, F>, dy: ArrayView1<'_, F>, grad: &mut Linear<F>) -> Array1<F> {
        let dy = dy.as_standard_layout();
        let dy = dy.as_slice().expect("contiguous");
        for (&xi, mut g) in x.iter().zip(grad.weight.rows_mut()) {
            let g = g.as_slice_mut().expect("contiguous");
            g.iter_mut().zip(dy).for_each(|(o, &d)| *o += xi * d);
        }
        for (b, &d) in grad.bias.iter_mut().zip(dy) {
            *b += d;
        }
        self.weight.rows().into_iter().map(|w| w.iter().zip(dy).fold(F::zero(), |acc, (&a, &b)| acc + a * b)).collect()
    }
}

/// `out += alpha * x`.
#[inline]
fn axpy<F: Scalar>(alpha: F, x: ArrayView1<'_, F>, out: &mut [F]) {
    match x.as_slice() {
        Some(xs) => out.iter_mut().zip(xs).for_each(|(o, &v)| *o += alpha * v),
        None => out.iter_mut().zip(x.iter()).for_each(|(o, &v)| *o += alpha * v),
    }
}

/// Lookup table, one row per index.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F> {
    pub table: Array2<F>,
}

impl_module!(Embedding { table });

impl<F: Scalar> Embedding<F> {
    pub fn normal<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Self { table: Array2::from_shape_simple_fn((rows, dim), || F::lit(dist.sample(rng))) }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { table: Array2::zeros((rows, dim)) }
    }

    pub fn forward(&self, index: usize) -> Array1<F> {
        self.table.row(index).to_owned()
    }

    pub fn backward(&self, index: usize, dy: ArrayView1<'_, F>, grad: &mut Embedding<F>) {
        let mut row = grad.table.row_mut(index);
        row += &dy;
    }
}

/// Row-wise layer norm without affine parameters. Returns the normalized rows and `1/σ` per row.
pub fn layer_norm<F: Scalar>(x: ArrayView2<'_, F>) -> (Array2<F>, Array1<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(LAYER_NORM_EPS);
    let mut y = x.to_owned();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let r = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        *inv_std = r;
    }
    (y, inv)
}

pub fn layer_norm_backward<F: Scalar>(y: &Array2<F>, inv_std: &Array1<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
    let d = F::lit(y.ncols() as f64);
    let mut dx = dy.to_owned();
    for ((mut row, yr), &r) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter()) {
        let mean_dy = row.sum() / d;
        let mean_dy_y = row.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        for (v, &yv) in row.iter_mut().zip(yr.iter()) {
            *v = r * (*v - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

/// AdaLN modulation `x·(1 + scale) + shift`, broadcast over rows.
pub fn modulate<F: Scalar>(x: &Array2<F>, shift: ArrayView1<'_, F>, scale: ArrayView1<'_, F>) -> Array2<F> {
    let gain = scale.mapv(|s| F::one() + s);
    let mut y = x * &gain;
    y += &shift;
    y
}

/// Returns `(dx, dshift, dscale)`.
pub fn modulate_backward<F: Scalar>(
    x: &Array2<F>,
    scale: ArrayView1<'_, F>,
    dy: ArrayView2<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let gain = scale.mapv(|s| F::one() + s);
    let dx = &dy * &gain;
    let dshift = dy.sum_axis(Axis(0));
    let dscale = (&dy * x).sum_axis(Axis(0));
    (dx, dshift, dscale)
}

/// `x + gate ⊙ branch` (gate broadcast over rows), in place.
pub fn gated_add<F: Scalar>(x: &mut Array2<F>, gate: ArrayView1<'_, F>, branch: &Array2<F>) {
    let scaled = branch * &gate;
    *x += &scaled;
}

/// Returns `(d_branch, d_gate)` for [`gated_add`].
pub fn gated_add_backward<F: Scalar>(
    gate: ArrayView1<'_, F>,
    branch: &Array2<F>,
    dy: ArrayView2<'_, F>,
) -> (Array2<F>, Array1<F>) {
    let d_branch = &dy * &gate;
    let d_gate = (&dy * branch).sum_axis(Axis(0));
    (d_branch, d_gate)
}

pub fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; several times faster than the libm routine.
#[inline]
fn tanh_exp<F: Scalar>(u: F) -> F {
    let two = F::one() + F::one();
    F::one() - two / ((two * u).exp() + F::one())
}

/// tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + tanh_exp(inner))
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let th = tanh_exp(c * (x + a * x * x * x));
    let half = F::lit(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl_module!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    input: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::xavier(dim, hidden, rng), fc2: Linear::xavier(hidden, dim, rng) }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self { fc1: Linear::zeros(dim, hidden), fc2: Linear::zeros(hidden, dim) }
    }

    pub fn forward(&self, x: Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x.view());
        let act = pre.mapv(gelu);
        let out = self.fc2.forward(act.view());
        (out, MlpCache { input: x, pre, act })
    }

    pub fn backward(&self, cache: &MlpCache<F>, dy: ArrayView2<'_, F>, grad: &mut Mlp<F>) -> Array2<F> {
        let mut d_act = self.fc2.backward(cache.act.view(), dy, &mut grad.fc2);
        d_act.zip_mut_with(&cache.pre, |d, &p| *d *= gelu_grad(p));
        self.fc1.backward(cache.input.view(), d_act.view(), &mut grad.fc1)
    }
}

/// Sinusoidal features `[cos(t·s·f_k), sin(t·s·f_k)]` with `f_k = 10000^(-k/half)` and `s = 1000`.
pub fn timestep_features<F: Scalar>(t: f64, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[k] = F::lit(arg.cos());
        out[half + k] = F::lit(arg.sin());
    }
    out
}

/// Saved state of one multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Row-stochastic attention matrix per head (`Nq × Nk`).
    pub probs: Vec<Array2<F>>,
    pub heads: usize,
}

/// Key indices sorted by row content (key row, then value row), so the order
/// does not depend on how the keys were arranged.
fn canonical_key_order<F: Scalar>(k: &Array2<F>, v: &Array2<F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k.nrows()).collect();
    order.sort_unstable_by(|&a, &b| {
        k.row(a)
            .iter()
            .chain(v.row(a).iter())
            .zip(k.row(b).iter().chain(v.row(b).iter()))
            .map(|(x, y)| x.order_key().cmp(&y.order_key()))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Scaled dot-product attention over `heads` column blocks of already-rotated `q`, `k`.
///
/// Keys and values are first put in a content-determined order, so every
/// reduction over keys runs in the same order however the keys were
/// permuted and the output is bit-identical.
pub fn attention_forward<F: Scalar>(
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    heads: usize,
) -> (Array2<F>, AttentionCache<F>) {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    assert_eq!(k.ncols(), d);
    assert_eq!(v.dim(), (nk, d));
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let order = canonical_key_order(&k, &v);
    let k_sorted = k.select(Axis(0), &order);
    let v_sorted = v.select(Axis(0), &order);
    let mut out = Array2::zeros((nq, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k_sorted.slice(cols).t());
        p.mapv_inplace(|x| x * scale);
        for mut row in p.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let denom = row.iter().fold(F::zero(), |acc, &x| acc + x);
            row.mapv_inplace(|x| x / denom);
        }
        out.slice_mut(cols).assign(&p.dot(&v_sorted.slice(cols)));
        let mut original = Array2::zeros((nq, nk));
        for (c, &j) in order.iter().enumerate() {
            original.column_mut(j).assign(&p.column(c));
        }
        probs.push(original);
    }
    (out, AttentionCache { q, k, v, probs, heads })
}

/// Returns `(dq, dk, dv)` with respect to the rotated inputs.
pub fn attention_backward<F: Scalar>(
    cache: &AttentionCache<F>,
    d_out: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (nq, d) = cache.q.dim();
    let nk = cache.k.nrows();
    let dh = d / cache.heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut dq = Array2::zeros((nq, d));
    let mut dk = Array2::zeros((nk, d));
    let mut dv = Array2::zeros((nk, d));
    for h in 0..cache.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let doh = d_out.slice(cols);
        let mut ds = doh.dot(&cache.v.slice(cols).t());
        for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
            for (x, &pv) in dsr.iter_mut().zip(pr.iter()) {
                *x = pv * (*x - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_mat(3, 8, &mut rng);
        let w = rand_mat(3, 8, &mut rng);
        let loss = |x: &Array2<f64>| (layer_norm(x.view()).0 * &w).sum();
        let (y, inv) = layer_norm(x.view());
        let analytic = layer_norm_backward(&y, &inv, w.view());
        assert_close(&analytic, &numeric_grad(&x, loss), 1e-6);
    }

    #[test]
    fn activation_derivatives() {
        for i in -40..40 {
            let x = i as f64 * 0.15;
            let h = 1e-6;
            let ng = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((ng - gelu_grad(x)).abs() < 1e-7);
            let ns = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((ns - silu_grad(x)).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (rand_mat(4, 8, &mut rng), rand_mat(5, 8, &mut rng), rand_mat(5, 8, &mut rng));
        let w = rand_mat(4, 8, &mut rng);
        let (_, cache) = attention_forward(q.clone(), k.clone(), v.clone(), 2);
        let (dq, dk, dv) = attention_backward(&cache, w.view());
        let f = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (attention_forward(q.clone(), k.clone(), v.clone(), 2).0 * &w).sum()
        };
        assert_close(&dq, &numeric_grad(&q, |x| f(x, &k, &v)), 1e-6);
        assert_close(&dk, &numeric_grad(&k, |x| f(&q, x, &v)), 1e-6);
        assert_close(&dv, &numeric_grad(&v, |x| f(&q, &k, x)), 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Array2::from_shape_vec((1, 4), vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let k = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, -1.0, 0.0]).unwrap();
        let v = Array2::from_shape_vec((1, 4), vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let (out, cache) = attention_forward(q, k, v.clone(), 1);
        assert_eq!(out, v);
        assert_eq!(cache.probs[0][[0, 0]], 1.0);
    }

    #[test]
    fn attention_is_bitwise_key_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(6, 16, &mut rng);
        let k = rand_mat(9, 16, &mut rng);
        let v = rand_mat(9, 16, &mut rng);
        let perm = [3usize, 8, 0, 5, 1, 7, 2, 6, 4];
        let kp = Array2::from_shape_fn((9, 16), |(r, c)| k[[perm[r], c]]);
        let vp = Array2::from_shape_fn((9, 16), |(r, c)| v[[perm[r], c]]);
        let (a, _) = attention_forward(q.clone(), k, v, 4);
        let (b, _) = attention_forward(q, kp, vp, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn linear_and_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f64>::new(6, 10, &mut rng);
        let x = rand_mat(3, 6, &mut rng);
        let w = rand_mat(3, 6, &mut rng);
        let (_, cache) = mlp.forward(x.clone());
        let mut grad = Mlp::zeros(6, 10);
        let dx = mlp.backward(&cache, w.view(), &mut grad);
        assert_close(&dx, &numeric_grad(&x, |x| (mlp.forward(x.clone()).0 * &w).sum()), 1e-6);
        let f = |w1: &Array2<f64>| {
            let mut m = mlp.clone();
            m.fc1.weight = w1.clone();
            (m.forward(x.clone()).0 * &w).sum()
        };
        assert_close(&grad.fc1.weight, &numeric_grad(&mlp.fc1.weight, f), 1e-6);
    }

    #[test]
    fn modulate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(3, 5, &mut rng);
        let ss = rand_mat(2, 5, &mut rng);
        let w = rand_mat(3, 5, &mut rng);
        let f = |x: &Array2<f64>, ss: &Array2<f64>| (modulate(x, ss.row(0), ss.row(1)) * &w).sum();
        let (dx, dshift, dscale) = modulate_backward(&x, ss.row(1), w.view());
        assert_close(&dx, &numeric_grad(&x, |x| f(x, &ss)), 1e-6);
        let nss = numeric_grad(&ss, |s| f(&x, s));
        let mut stacked = Array2::zeros((2, 5));
        stacked.row_mut(0).assign(&dshift);
        stacked.row_mut(1).assign(&dscale);
        assert_close(&stacked, &nss, 1e-6);
    }

    #[test]
    fn timestep_features_layout() {
        let f = timestep_features::<f64>(0.0, 8);
        assert_eq!(f.to_vec(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
