//! Semantics Flow: AdaLN-conditioned transformer blocks over large-patch
//! tokens, with learned registers prepended. Every `m`-th block output is
//! kept as a semantic anchor for the fine stream.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::module::impl_module;
use crate::nn::{
    attention_backward, attention_forward, gated_add, gated_add_backward, layer_norm, layer_norm_backward, modulate,
    modulate_backward, silu, silu_grad, timestep_features, AttentionCache, Embedding, Linear, Mlp, MlpCache,
};
use crate::sa_rope::RotaryTable;
use crate::scalar::Scalar;
use crate::tensor::TokenSequence;

/// Fused timestep + class vector `c` that drives every modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding<F = f32> {
    pub vector: Array1<F>,
}

impl<F: Scalar> ConditionEmbedding<F> {
    /// `SiLU(c)` as a one-row matrix, the input of every AdaLN projection.
    pub fn activated(&self) -> Array2<F> {
        self.vector.mapv(silu).insert_axis(Axis(0))
    }
}

/// Sinusoidal timestep features through a two-layer MLP, plus a class table
/// whose last row is the null (unconditional) class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedder<F> {
    pub time_fc1: Linear<F>,
    pub time_fc2: Linear<F>,
    pub classes: Embedding<F>,
}

impl_module!(ConditionEmbedder { time_fc1, time_fc2, classes });

#[derive(Debug, Clone)]
pub struct ConditionCache<F> {
    freq: Array1<F>,
    pre: Array1<F>,
    act: Array1<F>,
    c: Array1<F>,
    label: usize,
}

impl<F: Scalar> ConditionEmbedder<F> {
    pub fn new<R: Rng + ?Sized>(freq_dim: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            time_fc1: Linear::normal(freq_dim, hidden, 0.02, rng),
            time_fc2: Linear::normal(hidden, hidden, 0.02, rng),
            classes: Embedding::normal(num_classes + 1, hidden, 0.02, rng),
        }
    }

    pub fn zeros(freq_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            time_fc1: Linear::zeros(freq_dim, hidden),
            time_fc2: Linear::zeros(hidden, hidden),
            classes: Embedding::zeros(num_classes + 1, hidden),
        }
    }

    pub fn null_class(&self) -> usize {
        self.classes.table.nrows() - 1
    }

    pub fn forward(&self, t: f64, label: usize) -> (ConditionEmbedding<F>, ConditionCache<F>) {
        let freq: Array1<F> = timestep_features(t, self.time_fc1.fan_in());
        let pre = self.time_fc1.forward_vec(freq.view());
        let act = pre.mapv(silu);
        let c = self.time_fc2.forward_vec(act.view()) + &self.classes.forward(label);
        let cache = ConditionCache { freq, pre, act, c: c.clone(), label };
        (ConditionEmbedding { vector: c }, cache)
    }

    /// `d_act` is the gradient with respect to `SiLU(c)`.
    pub fn backward(&self, cache: &ConditionCache<F>, d_act: &Array1<F>, grad: &mut ConditionEmbedder<F>) {
        let mut dc = d_act.clone();
        dc.zip_mut_with(&cache.c, |d, &c| *d *= silu_grad(c));
        self.classes.backward(cache.label, dc.view(), &mut grad.classes);
        let mut d_hidden = self.time_fc2.backward_vec(cache.act.view(), dc.view(), &mut grad.time_fc2);
        d_hidden.zip_mut_with(&cache.pre, |d, &p| *d *= silu_grad(p));
        self.time_fc1.backward_vec(cache.freq.view(), d_hidden.view(), &mut grad.time_fc1);
    }
}

/// AdaLN-Zero transformer block: modulated self-attention and MLP, each behind a learned gate.
#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock<F> {
    pub ada: Linear<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub mlp: Mlp<F>,
}

impl_module!(DitBlock { ada, qkv, proj, mlp });

#[derive(Debug, Clone)]
pub struct DitBlockCache<F> {
    modulation: Array1<F>,
    norm1: Array2<F>,
    inv1: Array1<F>,
    h1: Array2<F>,
    attn: AttentionCache<F>,
    mixed: Array2<F>,
    attn_out: Array2<F>,
    norm2: Array2<F>,
    inv2: Array1<F>,
    mlp: MlpCache<F>,
    mlp_out: Array2<F>,
}

impl<F: Scalar> DitBlock<F> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, mlp_hidden: usize, rng: &mut R) -> Self {
        Self {
            ada: Linear::zeros(hidden, 6 * hidden),
            qkv: Linear::xavier(hidden, 3 * hidden, rng),
            proj: Linear::xavier(hidden, hidden, rng),
            mlp: Mlp::new(hidden, mlp_hidden, rng),
        }
    }

    pub fn zeros(hidden: usize, mlp_hidden: usize) -> Self {
        Self {
            ada: Linear::zeros(hidden, 6 * hidden),
            qkv: Linear::zeros(hidden, 3 * hidden),
            proj: Linear::zeros(hidden, hidden),
            mlp: Mlp::zeros(hidden, mlp_hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.proj.fan_out()
    }

    pub fn forward(
        &self,
        x: Array2<F>,
        cond: ArrayView2<'_, F>,
        rope: &RotaryTable<F>,
        heads: usize,
    ) -> (Array2<F>, DitBlockCache<F>) {
        let d = self.hidden();
        let modulation = self.ada.forward(cond).row(0).to_owned();
        let chunk = |k: usize| modulation.slice(s![k * d..(k + 1) * d]);

        let (norm1, inv1) = layer_norm(x.view());
        let h1 = modulate(&norm1, chunk(0), chunk(1));
        let qkv = self.qkv.forward(h1.view());
        let mut q = qkv.slice(s![.., 0..d]).to_owned();
        let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
        rope.rotate(q.view_mut());
        rope.rotate(k.view_mut());
        let (mixed, attn) = attention_forward(q, k, v, heads);
        let attn_out = self.proj.forward(mixed.view());
        let mut x = x;
        gated_add(&mut x, chunk(2), &attn_out);

        let (norm2, inv2) = layer_norm(x.view());
        let h2 = modulate(&norm2, chunk(3), chunk(4));
        let (mlp_out, mlp) = self.mlp.forward(h2);
        gated_add(&mut x, chunk(5), &mlp_out);

        let cache = DitBlockCache { modulation, norm1, inv1, h1, attn, mixed, attn_out, norm2, inv2, mlp, mlp_out };
        (x, cache)
    }

    /// Returns `(dx_in, d_cond)`.
    pub fn backward(
        &self,
        cache: &DitBlockCache<F>,
        dx_out: Array2<F>,
        cond: ArrayView2<'_, F>,
        rope: &RotaryTable<F>,
        grad: &mut DitBlock<F>,
    ) -> (Array2<F>, Array1<F>) {
        let d = self.hidden();
        let chunk = |k: usize| cache.modulation.slice(s![k * d..(k + 1) * d]);
        let mut d_mod = Array1::zeros(6 * d);

        // MLP branch
        let (d_mlp_out, d_gate2) = gated_add_backward(chunk(5), &cache.mlp_out, dx_out.view());
        let d_h2 = self.mlp.backward(&cache.mlp, d_mlp_out.view(), &mut grad.mlp);
        let (d_norm2, d_shift2, d_scale2) = modulate_backward(&cache.norm2, chunk(4), d_h2.view());
        let mut dx = dx_out;
        dx += &layer_norm_backward(&cache.norm2, &cache.inv2, d_norm2.view());

        // attention branch
        let (d_attn_out, d_gate1) = gated_add_backward(chunk(2), &cache.attn_out, dx.view());
        let d_mixed = self.proj.backward(cache.mixed.view(), d_attn_out.view(), &mut grad.proj);
        let (mut dq, mut dk, dv) = attention_backward(&cache.attn, d_mixed.view());
        rope.rotate_inverse(dq.view_mut());
        rope.rotate_inverse(dk.view_mut());
        let d_qkv = concatenate(Axis(1), &[dq.view(), dk.view(), dv.view()]).expect("matching rows");
        let d_h1 = self.qkv.backward(cache.h1.view(), d_qkv.view(), &mut grad.qkv);
        let (d_norm1, d_shift1, d_scale1) = modulate_backward(&cache.norm1, chunk(1), d_h1.view());
        dx += &layer_norm_backward(&cache.norm1, &cache.inv1, d_norm1.view());

        for (k, part) in [d_shift1, d_scale1, d_gate1, d_shift2, d_scale2, d_gate2].iter().enumerate() {
            d_mod.slice_mut(s![k * d..(k + 1) * d]).assign(part);
        }
        let d_cond = self.ada.backward(cond, d_mod.insert_axis(Axis(0)).view(), &mut grad.ada);
        (dx, d_cond.row(0).to_owned())
    }
}

/// Large-patch embedding, learned registers and the DiT stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticsFlow<F> {
    pub patch_embed: Linear<F>,
    pub registers: Array2<F>,
    pub blocks: Vec<DitBlock<F>>,
}

impl_module!(SemanticsFlow { patch_embed, registers, blocks });

/// The `n` anchors `s_1..s_n` plus the final-layer register tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<F = f32> {
    pub anchors: Vec<TokenSequence<F>>,
    pub register_outputs: TokenSequence<F>,
}

impl<F: Scalar> AnchorSet<F> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SemanticsCache<F> {
    patches: Array2<F>,
    blocks: Vec<DitBlockCache<F>>,
}

/// Raw outputs of one pass: every block output (registers first) in order.
#[derive(Debug, Clone)]
pub struct SemanticsOutput<F> {
    pub block_outputs: Vec<Array2<F>>,
}

impl<F: Scalar> SemanticsFlow<F> {
    pub fn new<R: Rng + ?Sized>(
        patch_dim: usize,
        hidden: usize,
        registers: usize,
        depth: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let patch_embed = Linear::xavier(patch_dim, hidden, rng);
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let registers = Array2::from_shape_simple_fn((registers, hidden), || F::lit(dist.sample(rng)));
        let blocks = (0..depth).map(|_| DitBlock::new(hidden, mlp_hidden, rng)).collect();
        Self { patch_embed, registers, blocks }
    }

    pub fn zeros(patch_dim: usize, hidden: usize, registers: usize, depth: usize, mlp_hidden: usize) -> Self {
        Self {
            patch_embed: Linear::zeros(patch_dim, hidden),
            registers: Array2::zeros((registers, hidden)),
            blocks: (0..depth).map(|_| DitBlock::zeros(hidden, mlp_hidden)).collect(),
        }
    }

    pub fn num_registers(&self) -> usize {
        self.registers.nrows()
    }

    /// Embedded input `s_0 = concat(s_r, s_l)`.
    pub fn embed(&self, patches: &Array2<F>) -> Array2<F> {
        let spatial = self.patch_embed.forward(patches.view());
        concatenate(Axis(0), &[self.registers.view(), spatial.view()]).expect("matching width")
    }

    pub fn forward(
        &self,
        patches: Array2<F>,
        cond: ArrayView2<'_, F>,
        rope: &RotaryTable<F>,
        heads: usize,
    ) -> (SemanticsOutput<F>, SemanticsCache<F>) {
        let mut x = self.embed(&patches);
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(x, cond, rope, heads);
            block_outputs.push(y.clone());
            caches.push(cache);
            x = y;
        }
        (SemanticsOutput { block_outputs }, SemanticsCache { patches, blocks: caches })
    }

    /// `d_outputs[b]` is the gradient flowing into block `b`'s output from
    /// outside the stack (anchors, alignment loss); `None` means zero.
    pub fn backward(
        &self,
        cache: &SemanticsCache<F>,
        mut d_outputs: Vec<Option<Array2<F>>>,
        cond: ArrayView2<'_, F>,
        rope: &RotaryTable<F>,
        d_cond: &mut Array1<F>,
        grad: &mut SemanticsFlow<F>,
    ) {
        let l = self.num_registers();
        let rows = l + cache.patches.nrows();
        let width = self.patch_embed.fan_out();
        let mut dx: Array2<F> = Array2::zeros((rows, width));
        for (b, block) in self.blocks.iter().enumerate().rev() {
            if let Some(extra) = d_outputs[b].take() {
                dx += &extra;
            }
            let (d_in, dc) = block.backward(&cache.blocks[b], dx, cond, rope, &mut grad.blocks[b]);
            *d_cond += &dc;
            dx = d_in;
        }
        grad.registers += &dx.slice(s![0..l, ..]);
        self.patch_embed.backward_params(cache.patches.view(), dx.slice(s![l.., ..]), &mut grad.patch_embed);
    }
}
