//! Fine stream: small-patch tokens that cross-attend to the semantic anchors
//! through a chain of connectors, then a modulated linear head.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::module::impl_module;
use crate::nn::{
    attention_backward, attention_forward, gated_add, gated_add_backward, layer_norm, layer_norm_backward, modulate,
    modulate_backward, AttentionCache, Linear, Mlp, MlpCache,
};
use crate::sa_rope::RotaryTable;
use crate::scalar::Scalar;

/// Cross-attention from fine tokens (queries) to one anchor (keys, values),
/// with an optional gated MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorBlock<F> {
    pub ada: Linear<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub proj: Linear<F>,
    pub mlp: Option<Mlp<F>>,
}

impl_module!(ConnectorBlock { ada, query, key, value, proj, mlp });

#[derive(Debug, Clone)]
struct MlpBranch<F> {
    norm: Array2<F>,
    inv: Array1<F>,
    cache: MlpCache<F>,
    out: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ConnectorCache<F> {
    modulation: Array1<F>,
    norm: Array2<F>,
    inv: Array1<F>,
    h: Array2<F>,
    attn: AttentionCache<F>,
    mixed: Array2<F>,
    attn_out: Array2<F>,
    mlp: Option<MlpBranch<F>>,
}

impl<F: Scalar> ConnectorBlock<F> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, mlp_hidden: Option<usize>, rng: &mut R) -> Self {
        let chunks = if mlp_hidden.is_some() { 6 } else { 3 };
        Self {
            ada: Linear::zeros(hidden, chunks * hidden),
            query: Linear::xavier(hidden, hidden, rng),
            key: Linear::xavier(hidden, hidden, rng),
            value: Linear::xavier(hidden, hidden, rng),
            proj: Linear::xavier(hidden, hidden, rng),
            mlp: mlp_hidden.map(|m| Mlp::new(hidden, m, rng)),
        }
    }

    pub fn zeros(hidden: usize, mlp_hidden: Option<usize>) -> Self {
        let chunks = if mlp_hidden.is_some() { 6 } else { 3 };
        Self {
            ada: Linear::zeros(hidden, chunks * hidden),
            query: Linear::zeros(hidden, hidden),
            key: Linear::zeros(hidden, hidden),
            value: Linear::zeros(hidden, hidden),
            proj: Linear::zeros(hidden, hidden),
            mlp: mlp_hidden.map(|m| Mlp::zeros(hidden, m)),
        }
    }

    fn hidden(&self) -> usize {
        self.proj.fan_out()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        f: Array2<F>,
        anchor: ArrayView2<'_, F>,
        cond: ArrayView2<'_, F>,
        rope_query: &RotaryTable<F>,
        rope_key: &RotaryTable<F>,
        heads: usize,
    ) -> (Array2<F>, ConnectorCache<F>) {
        let d = self.hidden();
        let modulation = self.ada.forward(cond).row(0).to_owned();
        let chunk = |k: usize| modulation.slice(s![k * d..(k + 1) * d]);

        let (norm, inv) = layer_norm(f.view());
        let h = modulate(&norm, chunk(0), chunk(1));
        let mut q = self.query.forward(h.view());
        let mut k = self.key.forward(anchor);
        let v = self.value.forward(anchor);
        rope_query.rotate(q.view_mut());
        rope_key.rotate(k.view_mut());
        let (mixed, attn) = attention_forward(q, k, v, heads);
        let attn_out = self.proj.forward(mixed.view());
        let mut f = f;
        gated_add(&mut f, chunk(2), &attn_out);

        let mlp = self.mlp.as_ref().map(|mlp| {
            let (norm, inv) = layer_norm(f.view());
            let h2 = modulate(&norm, chunk(3), chunk(4));
            let (out, cache) = mlp.forward(h2);
            gated_add(&mut f, chunk(5), &out);
            MlpBranch { norm, inv, cache, out }
        });

        let cache = ConnectorCache { modulation, norm, inv, h, attn, mixed, attn_out, mlp };
        (f, cache)
    }

    /// Returns `(df_in, d_anchor, d_cond)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &ConnectorCache<F>,
        df_out: Array2<F>,
        anchor: ArrayView2<'_, F>,
        cond: ArrayView2<'_, F>,
        rope_query: &RotaryTable<F>,
        rope_key: &RotaryTable<F>,
        grad: &mut ConnectorBlock<F>,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        let d = self.hidden();
        let chunk = |k: usize| cache.modulation.slice(s![k * d..(k + 1) * d]);
        let mut d_mod = Array1::zeros(cache.modulation.len());
        let mut df = df_out;

        if let (Some(mlp), Some(branch)) = (&self.mlp, &cache.mlp) {
            let (d_out, d_gate2) = gated_add_backward(chunk(5), &branch.out, df.view());
            let d_h2 = mlp.backward(&branch.cache, d_out.view(), grad.mlp.as_mut().expect("same layout"));
            let (d_norm2, d_shift2, d_scale2) = modulate_backward(&branch.norm, chunk(4), d_h2.view());
            df += &layer_norm_backward(&branch.norm, &branch.inv, d_norm2.view());
            d_mod.slice_mut(s![3 * d..4 * d]).assign(&d_shift2);
            d_mod.slice_mut(s![4 * d..5 * d]).assign(&d_scale2);
            d_mod.slice_mut(s![5 * d..6 * d]).assign(&d_gate2);
        }

        let (d_attn_out, d_gate1) = gated_add_backward(chunk(2), &cache.attn_out, df.view());
        let d_mixed = self.proj.backward(cache.mixed.view(), d_attn_out.view(), &mut grad.proj);
        let (mut dq, mut dk, dv) = attention_backward(&cache.attn, d_mixed.view());
        rope_query.rotate_inverse(dq.view_mut());
        rope_key.rotate_inverse(dk.view_mut());
        let mut d_anchor = self.key.backward(anchor, dk.view(), &mut grad.key);
        d_anchor += &self.value.backward(anchor, dv.view(), &mut grad.value);
        let d_h = self.query.backward(cache.h.view(), dq.view(), &mut grad.query);
        let (d_norm, d_shift1, d_scale1) = modulate_backward(&cache.norm, chunk(1), d_h.view());
        df += &layer_norm_backward(&cache.norm, &cache.inv, d_norm.view());
        d_mod.slice_mut(s![0..d]).assign(&d_shift1);
        d_mod.slice_mut(s![d..2 * d]).assign(&d_scale1);
        d_mod.slice_mut(s![2 * d..3 * d]).assign(&d_gate1);

        let d_cond = self.ada.backward(cond, d_mod.insert_axis(Axis(0)).view(), &mut grad.ada);
        (df, d_anchor, d_cond.row(0).to_owned())
    }
}

/// Layer norm, AdaLN shift/scale, then a linear map back to pixel patches.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer<F> {
    pub ada: Linear<F>,
    pub head: Linear<F>,
}

impl_module!(FinalLayer { ada, head });

#[derive(Debug, Clone)]
pub struct FinalCache<F> {
    modulation: Array1<F>,
    norm: Array2<F>,
    inv: Array1<F>,
    h: Array2<F>,
}

impl<F: Scalar> FinalLayer<F> {
    pub fn new(hidden: usize, patch_dim: usize) -> Self {
        Self { ada: Linear::zeros(hidden, 2 * hidden), head: Linear::zeros(hidden, patch_dim) }
    }

    pub fn forward(&self, f: ArrayView2<'_, F>, cond: ArrayView2<'_, F>) -> (Array2<F>, FinalCache<F>) {
        let d = self.head.fan_in();
        let modulation = self.ada.forward(cond).row(0).to_owned();
        let (norm, inv) = layer_norm(f);
        let h = modulate(&norm, modulation.slice(s![0..d]), modulation.slice(s![d..2 * d]));
        let out = self.head.forward(h.view());
        (out, FinalCache { modulation, norm, inv, h })
    }

    /// Returns `(df, d_cond)`.
    pub fn backward(
        &self,
        cache: &FinalCache<F>,
        d_out: ArrayView2<'_, F>,
        cond: ArrayView2<'_, F>,
        grad: &mut FinalLayer<F>,
    ) -> (Array2<F>, Array1<F>) {
        let d = self.head.fan_in();
        let d_h = self.head.backward(cache.h.view(), d_out, &mut grad.head);
        let (d_norm, d_shift, d_scale) =
            modulate_backward(&cache.norm, cache.modulation.slice(s![d..2 * d]), d_h.view());
        let df = layer_norm_backward(&cache.norm, &cache.inv, d_norm.view());
        let mut d_mod = Array1::zeros(2 * d);
        d_mod.slice_mut(s![0..d]).assign(&d_shift);
        d_mod.slice_mut(s![d..2 * d]).assign(&d_scale);
        let d_cond = self.ada.backward(cond, d_mod.insert_axis(Axis(0)).view(), &mut grad.ada);
        (df, d_cond.row(0).to_owned())
    }
}

/// Small-patch embedding, connector chain and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct FineFlow<F> {
    pub patch_embed: Linear<F>,
    pub connectors: Vec<ConnectorBlock<F>>,
    pub final_layer: FinalLayer<F>,
}

impl_module!(FineFlow { patch_embed, connectors, final_layer });

#[derive(Debug, Clone)]
pub struct FineCache<F> {
    patches: Array2<F>,
    connectors: Vec<ConnectorCache<F>>,
    final_layer: FinalCache<F>,
}

impl<F: Scalar> FineFlow<F> {
    pub fn new<R: Rng + ?Sized>(
        patch_dim: usize,
        hidden: usize,
        connectors: usize,
        mlp_hidden: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            patch_embed: Linear::xavier(patch_dim, hidden, rng),
            connectors: (0..connectors).map(|_| ConnectorBlock::new(hidden, mlp_hidden, rng)).collect(),
            final_layer: FinalLayer::new(hidden, patch_dim),
        }
    }

    pub fn zeros(patch_dim: usize, hidden: usize, connectors: usize, mlp_hidden: Option<usize>) -> Self {
        Self {
            patch_embed: Linear::zeros(patch_dim, hidden),
            connectors: (0..connectors).map(|_| ConnectorBlock::zeros(hidden, mlp_hidden)).collect(),
            final_layer: FinalLayer::new(hidden, patch_dim),
        }
    }

    /// Maps small patches to output patches, consuming one anchor per connector.
    pub fn forward(
        &self,
        patches: Array2<F>,
        anchors: &[Array2<F>],
        cond: ArrayView2<'_, F>,
        rope_query: &RotaryTable<F>,
        rope_key: &RotaryTable<F>,
        heads: usize,
    ) -> (Array2<F>, FineCache<F>) {
        assert_eq!(anchors.len(), self.connectors.len(), "one anchor per connector");
        let mut f = self.patch_embed.forward(patches.view());
        let mut caches = Vec::with_capacity(self.connectors.len());
        for (block, anchor) in self.connectors.iter().zip(anchors) {
            let (next, cache) = block.forward(f, anchor.view(), cond, rope_query, rope_key, heads);
            caches.push(cache);
            f = next;
        }
        let (out, final_layer) = self.final_layer.forward(f.view(), cond);
        (out, FineCache { patches, connectors: caches, final_layer })
    }

    /// Returns the gradient for each anchor.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cache: &FineCache<F>,
        d_out: ArrayView2<'_, F>,
        anchors: &[Array2<F>],
        cond: ArrayView2<'_, F>,
        rope_query: &RotaryTable<F>,
        rope_key: &RotaryTable<F>,
        d_cond: &mut Array1<F>,
        grad: &mut FineFlow<F>,
    ) -> Vec<Array2<F>> {
        let (mut df, dc) = self.final_layer.backward(&cache.final_layer, d_out, cond, &mut grad.final_layer);
        *d_cond += &dc;
        let mut d_anchors = vec![Array2::zeros((0, 0)); anchors.len()];
        for (i, block) in self.connectors.iter().enumerate().rev() {
            let (d_in, d_anchor, dc) = block.backward(
                &cache.connectors[i],
                df,
                anchors[i].view(),
                cond,
                rope_query,
                rope_key,
                &mut grad.connectors[i],
            );
            *d_cond += &dc;
            d_anchors[i] = d_anchor;
            df = d_in;
        }
        self.patch_embed.backward_params(cache.patches.view(), df.view(), &mut grad.patch_embed);
        d_anchors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sa_rope::{unified_positions, RotaryBasis, UnifiedPosition};
    use crate::tensor::PatchGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    fn tables(n_fine: usize, n_anchor: usize, head_dim: usize) -> (RotaryTable<f64>, RotaryTable<f64>) {
        let basis = RotaryBasis::new(head_dim, 100.0).unwrap();
        let fine: Vec<_> = (0..n_fine).map(|k| Some(UnifiedPosition { i: k as f64 * 0.5, j: 1.5 })).collect();
        let mut anchor: Vec<_> = vec![None; 2];
        anchor.extend((2..n_anchor).map(|k| Some(UnifiedPosition { i: k as f64, j: 0.0 })));
        (RotaryTable::new(&basis, &fine), RotaryTable::new(&basis, &anchor))
    }

    #[test]
    fn zero_gates_make_connectors_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, heads) = (8, 2);
        let mut flow = FineFlow::<f64>::new(12, d, 2, Some(16), &mut rng);
        flow.final_layer.ada = Linear::normal(d, 2 * d, 0.3, &mut rng);
        flow.final_layer.head = Linear::normal(d, 12, 0.3, &mut rng);
        let (rq, rk) = tables(6, 5, 4);
        let patches = randn((6, 12), &mut rng);
        let cond = randn((1, d), &mut rng);

        let block = &flow.connectors[0];
        let f = randn((6, d), &mut rng);
        let (out, _) = block.forward(f.clone(), randn((5, d), &mut rng).view(), cond.view(), &rq, &rk, heads);
        assert_eq!(out, f);

        let anchors_a = vec![randn((5, d), &mut rng), randn((5, d), &mut rng)];
        let anchors_b = vec![randn((5, d), &mut rng), randn((5, d), &mut rng)];
        let (out_a, _) = flow.forward(patches.clone(), &anchors_a, cond.view(), &rq, &rk, heads);
        let (out_b, _) = flow.forward(patches.clone(), &anchors_b, cond.view(), &rq, &rk, heads);
        assert_eq!(out_a, out_b);
        let embedded = flow.patch_embed.forward(patches.view());
        let (direct, _) = flow.final_layer.forward(embedded.view(), cond.view());
        assert_eq!(out_a, direct);
        assert!(out_a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn single_key_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 8;
        let mut block = ConnectorBlock::<f64>::new(d, None, &mut rng);
        block.ada.bias.slice_mut(s![2 * d..3 * d]).fill(1.0);
        for lin in [&mut block.value, &mut block.proj] {
            lin.bias = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        }
        let basis = RotaryBasis::new(4, 100.0).unwrap();
        let rq = RotaryTable::new(&basis, &[Some(UnifiedPosition { i: 0.5, j: 0.5 })]);
        let rk = RotaryTable::new(&basis, &[Some(UnifiedPosition { i: 1.0, j: 1.0 })]);
        let f = randn((1, d), &mut rng);
        let anchor = randn((1, d), &mut rng);
        let cond = Array2::zeros((1, d));
        let (out, _) = block.forward(f.clone(), anchor.view(), cond.view(), &rq, &rk, 2);

        let mut expected = f.clone();
        let v: Vec<f64> = (0..d)
            .map(|c| block.value.bias[c] + (0..d).map(|r| anchor[[0, r]] * block.value.weight[[r, c]]).sum::<f64>())
            .collect();
        for c in 0..d {
            expected[[0, c]] += block.proj.bias[c] + (0..d).map(|r| v[r] * block.proj.weight[[r, c]]).sum::<f64>();
        }
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn queries_attend_to_nearest_large_patch() {
        // 16×16 image: 4×4 large patches of 4 px, 8×8 small patches of 2 px, base patch 1.
        let large = PatchGrid::for_image(16, 16, 4).unwrap();
        let small = PatchGrid::for_image(16, 16, 2).unwrap();
        let omega = std::f64::consts::PI / 14.0;
        let scaled = |p: Vec<Option<UnifiedPosition>>| -> Vec<Option<UnifiedPosition>> {
            p.into_iter().map(|u| u.map(|u| UnifiedPosition { i: u.i * omega, j: u.j * omega })).collect()
        };
        let key_pos = unified_positions(&large.positions(), 4, 1);
        let query_pos = unified_positions(&small.positions(), 2, 1);
        let basis = RotaryBasis::new(4, 100.0).unwrap();
        let rk = RotaryTable::new(&basis, &scaled(key_pos.clone()));
        let rq = RotaryTable::new(&basis, &scaled(query_pos.clone()));

        let d = 4;
        let mut block = ConnectorBlock::<f64>::zeros(d, None);
        for k in 0..d {
            block.query.weight[[k, k]] = 20.0;
            block.key.weight[[k, k]] = 1.0;
            block.value.weight[[k, k]] = 1.0;
        }
        let token = Array1::from_vec(vec![1.0, -1.0, 2.0, -2.0]);
        let (norm, _) = layer_norm(token.clone().insert_axis(Axis(0)).view());
        let f = Array2::from_shape_fn((small.len(), d), |(_, c)| token[c]);
        let anchor = Array2::from_shape_fn((large.len(), d), |(_, c)| norm[[0, c]]);
        let cond = Array2::zeros((1, d));
        let (_, cache) = block.forward(f, anchor.view(), cond.view(), &rq, &rk, 1);

        let probs = &cache.attn.probs[0];
        for (qi, q) in query_pos.iter().enumerate() {
            let q = q.unwrap();
            let nearest = (0..large.len())
                .min_by(|&a, &b| {
                    let da = key_pos[a].unwrap();
                    let db = key_pos[b].unwrap();
                    let dist = |k: UnifiedPosition| (k.i - q.i).powi(2) + (k.j - q.j).powi(2);
                    dist(da).total_cmp(&dist(db))
                })
                .unwrap();
            let top = (0..large.len()).max_by(|&a, &b| probs[[qi, a]].total_cmp(&probs[[qi, b]])).unwrap();
            assert_eq!(top, nearest, "query {qi}");
        }
    }
}
