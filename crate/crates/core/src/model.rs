//! The full dual-stream network: condition embedder, Semantics Flow, fine
//! stream and the register alignment projector.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    AnchorSet, ConditionCache, ConditionEmbedder, ConditionEmbedding, SemanticsCache, SemanticsFlow,
};
use crate::config::{ModelConfig, Parameterization};
use crate::error::{shape_err, Result};
use crate::flow_matching::xpred_to_velocity;
use crate::hyper_connector::{FineCache, FineFlow};
use crate::module::{impl_module, Module};
use crate::nn::{silu, silu_grad, Linear};
use crate::patching::{patchify_raw, unpatchify_raw, TokenMap};
use crate::sa_rope::{unified_positions, RotaryBasis, RotaryTable};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PatchGrid, TokenPosition, TokenScale, TokenSequence};

/// Three-layer SiLU MLP mapping register tokens into the external feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignProjector<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub fc3: Linear<F>,
}

impl_module!(AlignProjector { fc1, fc2, fc3 });

#[derive(Debug, Clone)]
pub struct AlignCache<F> {
    input: Array2<F>,
    pre1: Array2<F>,
    act1: Array2<F>,
    pre2: Array2<F>,
    act2: Array2<F>,
}

impl<F: Scalar> AlignProjector<F> {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::xavier(dim, hidden, rng),
            fc2: Linear::xavier(hidden, hidden, rng),
            fc3: Linear::xavier(hidden, out, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> (Array2<F>, AlignCache<F>) {
        let pre1 = self.fc1.forward(x);
        let act1 = pre1.mapv(silu);
        let pre2 = self.fc2.forward(act1.view());
        let act2 = pre2.mapv(silu);
        let out = self.fc3.forward(act2.view());
        (out, AlignCache { input: x.to_owned(), pre1, act1, pre2, act2 })
    }

    pub fn backward(&self, cache: &AlignCache<F>, dy: ArrayView2<'_, F>, grad: &mut AlignProjector<F>) -> Array2<F> {
        let mut d2 = self.fc3.backward(cache.act2.view(), dy, &mut grad.fc3);
        d2.zip_mut_with(&cache.pre2, |d, &p| *d *= silu_grad(p));
        let mut d1 = self.fc2.backward(cache.act1.view(), d2.view(), &mut grad.fc2);
        d1.zip_mut_with(&cache.pre1, |d, &p| *d *= silu_grad(p));
        self.fc1.backward(cache.input.view(), d1.view(), &mut grad.fc1)
    }
}

impl<F: Scalar> TokenMap<F> for AlignProjector<F> {
    fn map_tokens(&self, x: &Array2<F>) -> Array2<F> {
        self.forward(x.view()).0
    }
}

/// Token layouts and rotary tables fixed by the configuration.
#[derive(Debug, Clone, PartialEq)]
struct Geometry<F> {
    large: PatchGrid,
    small: PatchGrid,
    semantic_positions: Vec<TokenPosition>,
    anchor_positions: Vec<TokenPosition>,
    rope_semantic: RotaryTable<F>,
    rope_fine: RotaryTable<F>,
    rope_anchor: RotaryTable<F>,
}

impl<F: Scalar> Geometry<F> {
    fn new(config: &ModelConfig) -> Result<Self> {
        let large = PatchGrid::for_image(config.image_height, config.image_width, config.large_patch)?;
        let small = PatchGrid::for_image(config.image_height, config.image_width, config.small_patch)?;
        let base = config.resolved_base_patch()?;
        let basis = RotaryBasis::new(config.head_dim(), config.rope_theta)?;
        let mut semantic_positions = vec![TokenPosition::NonSpatial; config.registers];
        semantic_positions.extend(large.positions());
        let anchor_positions =
            if config.anchors_include_registers { semantic_positions.clone() } else { large.positions() };
        let rope_semantic = RotaryTable::new(&basis, &unified_positions(&semantic_positions, config.large_patch, base));
        let rope_anchor = RotaryTable::new(&basis, &unified_positions(&anchor_positions, config.large_patch, base));
        let rope_fine = RotaryTable::new(&basis, &unified_positions(&small.positions(), config.small_patch, base));
        Ok(Self { large, small, semantic_positions, anchor_positions, rope_semantic, rope_fine, rope_anchor })
    }
}

/// HyperDiT network over `F` (f32 for training, f64 for gradient checks).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperDit<F = f32> {
    config: ModelConfig,
    geometry: Geometry<F>,
    pub condition: ConditionEmbedder<F>,
    pub semantics: SemanticsFlow<F>,
    pub fine: FineFlow<F>,
    pub align: Option<AlignProjector<F>>,
}

impl_module!(HyperDit { condition, semantics, fine, align });

/// Outputs of a training forward pass.
#[derive(Debug, Clone)]
pub struct TrainOutput<F> {
    /// Raw network output (velocity or clean image per the parameterization).
    pub output: ImageTensor<F>,
    /// Final-layer register tokens.
    pub registers: Array2<F>,
    /// Registers mapped by the alignment projector.
    pub projected: Option<Array2<F>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache<F> {
    condition: ConditionCache<F>,
    cond_act: Array2<F>,
    semantics: SemanticsCache<F>,
    anchors: Vec<Array2<F>>,
    fine: FineCache<F>,
    align: Option<AlignCache<F>>,
}

/// Analytic parameter count for a configuration.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.hidden;
    let linear = |i: usize, o: usize| i * o + o;
    let mlp = linear(d, config.mlp_hidden()) + linear(config.mlp_hidden(), d);
    let condition = linear(config.timestep_freq_dim, d) + linear(d, d) + (config.num_classes + 1) * d;
    let block = linear(d, 6 * d) + linear(d, 3 * d) + linear(d, d) + mlp;
    let semantics = linear(config.large_patch_dim(), d) + config.registers * d + config.depth * block;
    let connector = if config.connector_mlp {
        linear(d, 6 * d) + 4 * linear(d, d) + mlp
    } else {
        linear(d, 3 * d) + 4 * linear(d, d)
    };
    let fine = linear(config.small_patch_dim(), d)
        + config.connectors * connector
        + linear(d, 2 * d)
        + linear(d, config.small_patch_dim());
    let align = if config.align_dim > 0 {
        linear(d, config.align_hidden)
            + linear(config.align_hidden, config.align_hidden)
            + linear(config.align_hidden, config.align_dim)
    } else {
        0
    };
    condition + semantics + fine + align
}

impl<F: Scalar> HyperDit<F> {
    /// Randomly initialized model; every modulation and the output head start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mlp_hidden = config.mlp_hidden();
        let condition = ConditionEmbedder::new(config.timestep_freq_dim, d, config.num_classes, &mut rng);
        let semantics =
            SemanticsFlow::new(config.large_patch_dim(), d, config.registers, config.depth, mlp_hidden, &mut rng);
        let fine = FineFlow::new(
            config.small_patch_dim(),
            d,
            config.connectors,
            config.connector_mlp.then_some(mlp_hidden),
            &mut rng,
        );
        let align =
            (config.align_dim > 0).then(|| AlignProjector::new(d, config.align_hidden, config.align_dim, &mut rng));
        let geometry = Geometry::new(&config)?;
        Ok(Self { config, geometry, condition, semantics, fine, align })
    }

    /// Same architecture with every parameter zero (gradient / moment buffers).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mlp_hidden = config.mlp_hidden();
        let condition = ConditionEmbedder::zeros(config.timestep_freq_dim, d, config.num_classes);
        let semantics = SemanticsFlow::zeros(config.large_patch_dim(), d, config.registers, config.depth, mlp_hidden);
        let fine =
            FineFlow::zeros(config.small_patch_dim(), d, config.connectors, config.connector_mlp.then_some(mlp_hidden));
        let align = (config.align_dim > 0).then(|| AlignProjector {
            fc1: Linear::zeros(d, config.align_hidden),
            fc2: Linear::zeros(config.align_hidden, config.align_hidden),
            fc3: Linear::zeros(config.align_hidden, config.align_dim),
        });
        let geometry = Geometry::new(&config)?;
        Ok(Self { config, geometry, condition, semantics, fine, align })
    }

    /// A zeroed buffer with this model's layout.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(F::zero());
        out
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Scalar>(&self) -> HyperDit<G> {
        let mut out = HyperDit::<G>::zeros(self.config.clone()).expect("config already validated");
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, s| *d = G::lit(s.as_f64()));
        }
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn null_class(&self) -> usize {
        self.condition.null_class()
    }

    fn check_input(&self, x: &ImageTensor<F>) -> Result<()> {
        let c = &self.config;
        let want = (c.channels, c.image_height, c.image_width);
        if x.dims() != want {
            return Err(shape_err(format!("{want:?}"), format!("{:?}", x.dims())));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label > self.null_class() {
            return Err(crate::error::Error::DimensionMismatch(format!(
                "label {label} exceeds null class {}",
                self.null_class()
            )));
        }
        Ok(())
    }

    pub fn condition(&self, t: f64, label: usize) -> Result<ConditionEmbedding<F>> {
        self.check_label(label)?;
        Ok(self.condition.forward(t, label).0)
    }

    fn anchor_rows(&self, block_output: &Array2<F>) -> Array2<F> {
        if self.config.anchors_include_registers {
            block_output.clone()
        } else {
            block_output.slice(s![self.config.registers.., ..]).to_owned()
        }
    }

    /// Runs the Semantics Flow and collects the `n` anchors and final registers.
    pub fn semantics_forward(&self, x_t: &ImageTensor<F>, cond: &ConditionEmbedding<F>) -> Result<AnchorSet<F>> {
        self.check_input(x_t)?;
        let (patches, _) = patchify_raw(x_t, self.config.large_patch)?;
        let act = cond.activated();
        let (out, _) = self.semantics.forward(patches, act.view(), &self.geometry.rope_semantic, self.config.heads);
        let scale = TokenScale::Patch(self.config.large_patch);
        let anchors = self
            .config
            .anchor_blocks()
            .into_iter()
            .map(|b| {
                TokenSequence::new(
                    self.anchor_rows(&out.block_outputs[b]),
                    self.geometry.anchor_positions.clone(),
                    scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let last = out.block_outputs.last().expect("depth >= 1");
        let register_outputs = TokenSequence::non_spatial(last.slice(s![..self.config.registers, ..]).to_owned());
        Ok(AnchorSet { anchors, register_outputs })
    }

    /// Runs the fine stream on `x_t` given precomputed anchors; returns the raw output image.
    pub fn fine_forward(
        &self,
        x_t: &ImageTensor<F>,
        anchors: &AnchorSet<F>,
        cond: &ConditionEmbedding<F>,
    ) -> Result<ImageTensor<F>> {
        self.check_input(x_t)?;
        if anchors.len() != self.config.connectors {
            return Err(crate::error::Error::DimensionMismatch(format!(
                "{} anchors for {} connectors",
                anchors.len(),
                self.config.connectors
            )));
        }
        let rows = self.geometry.anchor_positions.len();
        for a in &anchors.anchors {
            if a.tokens.dim() != (rows, self.config.hidden) {
                return Err(shape_err(format!("({rows}, {})", self.config.hidden), format!("{:?}", a.tokens.dim())));
            }
        }
        let (patches, grid) = patchify_raw(x_t, self.config.small_patch)?;
        let act = cond.activated();
        let arrays: Vec<Array2<F>> = anchors.anchors.iter().map(|a| a.tokens.clone()).collect();
        let (out, _) = self.fine.forward(
            patches,
            &arrays,
            act.view(),
            &self.geometry.rope_fine,
            &self.geometry.rope_anchor,
            self.config.heads,
        );
        unpatchify_raw(&out, grid, self.config.channels)
    }

    /// Raw network output at `(x_t, t, label)`.
    pub fn forward(&self, x_t: &ImageTensor<F>, t: f64, label: usize) -> Result<ImageTensor<F>> {
        Ok(self.forward_train(x_t, t, label)?.0.output)
    }

    /// Velocity at `(z, t)`, converting from the clean-image parameterization when needed.
    pub fn velocity(&self, z: &ImageTensor<F>, t: f64, label: usize, t_guard: f64) -> Result<ImageTensor<F>> {
        let out = self.forward(z, t, label)?;
        match self.config.parameterization {
            Parameterization::VPred => Ok(out),
            Parameterization::XPred => xpred_to_velocity(&out, z, t, t_guard),
        }
    }

    pub fn forward_train(&self, x_t: &ImageTensor<F>, t: f64, label: usize) -> Result<(TrainOutput<F>, ModelCache<F>)> {
        self.check_input(x_t)?;
        self.check_label(label)?;
        let cfg = &self.config;
        let (cond, condition) = self.condition.forward(t, label);
        let cond_act = cond.activated();

        let (large, _) = patchify_raw(x_t, cfg.large_patch)?;
        let (sem_out, semantics) =
            self.semantics.forward(large, cond_act.view(), &self.geometry.rope_semantic, cfg.heads);
        let anchors: Vec<Array2<F>> =
            cfg.anchor_blocks().into_iter().map(|b| self.anchor_rows(&sem_out.block_outputs[b])).collect();
        let registers = sem_out.block_outputs.last().expect("depth >= 1").slice(s![..cfg.registers, ..]).to_owned();

        let (small, grid) = patchify_raw(x_t, cfg.small_patch)?;
        let (out, fine) = self.fine.forward(
            small,
            &anchors,
            cond_act.view(),
            &self.geometry.rope_fine,
            &self.geometry.rope_anchor,
            cfg.heads,
        );
        let output = unpatchify_raw(&out, grid, cfg.channels)?;

        let (projected, align) = match (&self.align, cfg.registers > 0) {
            (Some(proj), true) => {
                let (p, c) = proj.forward(registers.view());
                (Some(p), Some(c))
            }
            _ => (None, None),
        };
        let cache = ModelCache { condition, cond_act, semantics, anchors, fine, align };
        Ok((TrainOutput { output, registers, projected }, cache))
    }

    /// Accumulates parameter gradients into `grad`.
    ///
    /// `d_output` is the loss gradient with respect to the raw output image and
    /// `d_projected` the gradient with respect to the projected registers.
    pub fn backward(
        &self,
        cache: &ModelCache<F>,
        d_output: &ImageTensor<F>,
        d_projected: Option<&Array2<F>>,
        grad: &mut HyperDit<F>,
    ) -> Result<()> {
        self.check_input(d_output)?;
        let cfg = &self.config;
        let (d_patches, _) = patchify_raw(d_output, cfg.small_patch)?;
        let mut d_cond = Array1::zeros(cfg.hidden);
        let d_anchors = self.fine.backward(
            &cache.fine,
            d_patches.view(),
            &cache.anchors,
            cache.cond_act.view(),
            &self.geometry.rope_fine,
            &self.geometry.rope_anchor,
            &mut d_cond,
            &mut grad.fine,
        );

        let rows = self.geometry.semantic_positions.len();
        let mut d_outputs: Vec<Option<Array2<F>>> = vec![None; cfg.depth];
        for (b, d_anchor) in cfg.anchor_blocks().into_iter().zip(d_anchors) {
            let full = if cfg.anchors_include_registers {
                d_anchor
            } else {
                let mut full = Array2::zeros((rows, cfg.hidden));
                full.slice_mut(s![cfg.registers.., ..]).assign(&d_anchor);
                full
            };
            d_outputs[b] = Some(full);
        }

        if let (Some(dp), Some(proj), Some(align_cache), Some(g)) =
            (d_projected, &self.align, &cache.align, grad.align.as_mut())
        {
            let d_reg = proj.backward(align_cache, dp.view(), g);
            let last = d_outputs[cfg.depth - 1].get_or_insert_with(|| Array2::zeros((rows, cfg.hidden)));
            let mut top = last.slice_mut(s![..cfg.registers, ..]);
            top += &d_reg;
        }

        self.semantics.backward(
            &cache.semantics,
            d_outputs,
            cache.cond_act.view(),
            &self.geometry.rope_semantic,
            &mut d_cond,
            &mut grad.semantics,
        );
        self.condition.backward(&cache.condition, &d_cond, &mut grad.condition);
        Ok(())
    }
}
