//! Image-level dynamic-kernel segmenter.
//!
//! A strided convolutional backbone and a two-merge pyramid neck produce one
//! position-aware feature map at stride 4. A set of learned kernels (one per
//! potential instance plus one per stuff class) is refined over several
//! decoder stages; each stage assembles per-kernel features under the
//! previous masks, gates them into the kernels, lets the kernels attend to
//! each other, and predicts new masks by inner product with the feature map.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    ensure_finite, sigmoid, sinusoidal_position_code, upsample2x, Conv2d, FeedForward, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamBuilder,
};

/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 16;
/// Stride of the position-aware feature map the kernels multiply against.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_thing_kernels: usize,
    pub num_thing_classes: usize,
    pub num_stuff_classes: usize,
    /// Kernel and feature width.
    pub channels: usize,
    /// Association embedding width.
    pub embed_dim: usize,
    pub stages: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub backbone_widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_thing_kernels: 6,
            num_thing_classes: 2,
            num_stuff_classes: 3,
            channels: 32,
            embed_dim: 32,
            stages: 3,
            heads: 4,
            ffn_hidden: 64,
            backbone_widths: [16, 32, 48, 64],
        }
    }
}

impl ModelConfig {
    pub fn num_kernels(&self) -> usize {
        self.num_thing_kernels + self.num_stuff_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return bad("model.stages must be at least 1".into());
        }
        if self.num_thing_kernels == 0 || self.num_stuff_classes == 0 {
            return bad("model needs at least one thing kernel and one stuff class".into());
        }
        if self.channels % 4 != 0 {
            return bad(format!("model.channels={} must be divisible by 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "model.channels={} must be divisible by model.heads={}",
                self.channels, self.heads
            ));
        }
        if self.embed_dim == 0 || self.ffn_hidden == 0 {
            return bad("model.embed_dim and model.ffn_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Position-aware feature map, [C, H, W].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
    pub has_pos_enc: bool,
}

impl FeatureMap {
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.values.dims3()?)
    }

    /// [C, H*W] view.
    fn flat(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims()?;
        Ok(self.values.reshape((c, h * w))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelRole {
    Thing,
    /// Fixed to one stuff class id.
    Stuff(u16),
}

/// N kernels with their roles, [N, C].
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub kernels: Tensor,
    pub roles: Arc<Vec<KernelRole>>,
}

impl KernelSet {
    pub fn new(kernels: Tensor, roles: Arc<Vec<KernelRole>>) -> Result<Self> {
        let (n, _) = kernels.dims2()?;
        if n != roles.len() {
            return Err(Error::shape(
                "KernelSet",
                format!("{n} kernel rows but {} roles", roles.len()),
            ));
        }
        Ok(Self { kernels, roles })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn num_things(&self) -> usize {
        self.roles.iter().filter(|r| **r == KernelRole::Thing).count()
    }

    pub fn with_kernels(&self, kernels: Tensor) -> Result<Self> {
        Self::new(kernels, self.roles.clone())
    }

    /// Thing rows, [N_thing, C]. Thing kernels always come first.
    pub fn things(&self) -> Result<Tensor> {
        Ok(self.kernels.narrow(0, 0, self.num_things())?)
    }
}

/// Output of one decoder stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub kernels: KernelSet,
    /// [N, H, W] at feature resolution.
    pub mask_logits: Tensor,
    /// [N_thing, num_thing_classes]. Stuff kernels carry their class by role.
    pub class_logits: Tensor,
}

/// Per-kernel features: sigmoid-gated sum of the feature map under each
/// kernel's previous mask. Returns [N, C].
pub fn assemble_group_features(kernels: &KernelSet, feat: &FeatureMap, prev_mask_logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feat.dims()?;
    let (n, mh, mw) = prev_mask_logits.dims3()?;
    let (kn, kc) = kernels.kernels.dims2()?;
    if n != kn || mh != h || mw != w || kc != c {
        return Err(Error::shape(
            "assemble_group_features",
            format!("kernels [{kn},{kc}], masks [{n},{mh},{mw}], features [{c},{h},{w}]"),
        ));
    }
    let gate = sigmoid(&prev_mask_logits.reshape((n, h * w))?)?;
    Ok(gate.matmul(&feat.flat()?.t()?)?)
}

/// Mask logits by inner product of every kernel with every feature column.
/// Returns [N, H, W].
pub fn predict_masks(kernels: &Tensor, feat: &FeatureMap) -> Result<Tensor> {
    let (c, h, w) = feat.dims()?;
    let (n, kc) = kernels.dims2()?;
    if kc != c {
        return Err(Error::shape(
            "predict_masks",
            format!("kernel width {kc} vs feature channels {c}"),
        ));
    }
    Ok(kernels.matmul(&feat.flat()?)?.reshape((n, h, w))?)
}

/// Gated kernel update: `k' = g_f * phi_f(f) + g_k * phi_k(k)` with both
/// gates computed from `f + psi(k)`. Strictly row-local.
#[derive(Clone, Debug)]
pub struct AdaptiveKernelUpdate {
    pub psi: Linear,
    pub gate_f: Linear,
    pub gate_k: Linear,
    pub phi_f: Linear,
    pub phi_k: Linear,
}

impl AdaptiveKernelUpdate {
    pub fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            psi: Linear::new(&mut pb.pp("psi"), c, c)?,
            gate_f: Linear::new(&mut pb.pp("gate_f"), c, c)?,
            gate_k: Linear::new(&mut pb.pp("gate_k"), c, c)?,
            phi_f: Linear::new(&mut pb.pp("phi_f"), c, c)?,
            phi_k: Linear::new(&mut pb.pp("phi_k"), c, c)?,
        })
    }

    pub fn forward(&self, kernels: &KernelSet, group_feats: &Tensor) -> Result<KernelSet> {
        let k = &kernels.kernels;
        if k.dims() != group_feats.dims() {
            return Err(Error::shape(
                "adaptive_kernel_update",
                format!("kernels {:?} vs group features {:?}", k.dims(), group_feats.dims()),
            ));
        }
        ensure_finite(k, "adaptive_kernel_update kernels")?;
        ensure_finite(group_feats, "adaptive_kernel_update group features")?;
        kernels.with_kernels(self.apply(k, group_feats)?)
    }

    pub(crate) fn apply(&self, k: &Tensor, f: &Tensor) -> Result<Tensor> {
        let gate_in = (f + self.psi.forward(k)?)?;
        let g_f = sigmoid(&self.gate_f.forward(&gate_in)?)?;
        let g_k = sigmoid(&self.gate_k.forward(&gate_in)?)?;
        let from_f = (g_f * self.phi_f.forward(f)?)?;
        let from_k = (g_k * self.phi_k.forward(k)?)?;
        Ok((from_f + from_k)?)
    }
}

/// Self-attention over the kernel set followed by a feed-forward block, both
/// residual with post-normalization.
#[derive(Clone, Debug)]
pub struct KernelInteraction {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl KernelInteraction {
    pub fn new(pb: &mut ParamBuilder, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), c, heads)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), c)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), c, hidden)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), c)?,
        })
    }

    pub fn forward(&self, kernels: &KernelSet) -> Result<KernelSet> {
        kernels.with_kernels(self.apply(&kernels.kernels, None)?)
    }

    /// `mask` is an additive attention mask over kernel pairs.
    pub(crate) fn apply(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let a = self.attn.forward(x, x, mask)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let y = self.ffn.forward(&x)?;
        self.norm2.forward(&(x + y)?)
    }
}

/// One iterative decoder stage.
#[derive(Clone, Debug)]
pub struct KernelUpdateStage {
    pub feat_norm: LayerNorm,
    pub update: AdaptiveKernelUpdate,
    pub interaction: KernelInteraction,
    pub cls: Linear,
}

impl KernelUpdateStage {
    fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        // focal-loss prior: initial foreground probability 0.01
        let prior_bias = -((1.0f64 - 0.01) / 0.01).ln();
        let bound = (6.0 / (c + cfg.num_thing_classes) as f64).sqrt();
        Ok(Self {
            feat_norm: LayerNorm::new(&mut pb.pp("feat_norm"), c)?,
            update: AdaptiveKernelUpdate::new(&mut pb.pp("update"), c)?,
            interaction: KernelInteraction::new(&mut pb.pp("interaction"), c, cfg.heads, cfg.ffn_hidden)?,
            cls: Linear::with_init(
                &mut pb.pp("cls"),
                c,
                cfg.num_thing_classes,
                Init::Uniform(bound),
                Init::Const(prior_bias),
            )?,
        })
    }

    /// assemble -> update -> interaction -> masks and classes.
    pub fn forward(&self, kernels: &KernelSet, feat: &FeatureMap, prev_mask_logits: &Tensor) -> Result<StageOutput> {
        let f = assemble_group_features(kernels, feat, prev_mask_logits)?;
        let f = self.feat_norm.forward(&f)?;
        let k = kernels.with_kernels(self.update.apply(&kernels.kernels, &f)?)?;
        let k = self.interaction.forward(&k)?;
        let mask_logits = predict_masks(&k.kernels, feat)?;
        let class_logits = self.classify(&k.things()?)?;
        Ok(StageOutput {
            kernels: k,
            mask_logits,
            class_logits,
        })
    }

    pub fn classify(&self, thing_kernels: &Tensor) -> Result<Tensor> {
        self.cls.forward(thing_kernels)
    }
}

#[derive(Clone, Debug)]
struct Block {
    down: Conv2d,
    conv: Conv2d,
}

/// Four stride-2 blocks; returns the stride 4, 8 and 16 activations.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    fn new(pb: &mut ParamBuilder, widths: [usize; 4]) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let mut b = pb.pp(&format!("block{i}"));
            blocks.push(Block {
                down: Conv2d::new(&mut b.pp("down"), in_ch, w, 3, 2)?,
                conv: Conv2d::new(&mut b.pp("conv"), w, w, 3, 1)?,
            });
            in_ch = w;
        }
        Ok(Self { blocks })
    }

    fn forward(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let mut x = image.clone();
        let mut outs = Vec::new();
        for b in &self.blocks {
            x = b.down.forward(&x)?.relu()?;
            x = b.conv.forward(&x)?.relu()?;
            outs.push(x.clone());
        }
        Ok([outs[1].clone(), outs[2].clone(), outs[3].clone()])
    }
}

/// Top-down pyramid: stride 16 merged into stride 8, stride 8 into stride 4.
#[derive(Clone, Debug)]
pub struct Neck {
    lat4: Conv2d,
    lat8: Conv2d,
    lat16: Conv2d,
    out: Conv2d,
}

impl Neck {
    fn new(pb: &mut ParamBuilder, widths: [usize; 4], c: usize) -> Result<Self> {
        Ok(Self {
            lat4: Conv2d::new(&mut pb.pp("lat4"), widths[1], c, 1, 1)?,
            lat8: Conv2d::new(&mut pb.pp("lat8"), widths[2], c, 1, 1)?,
            lat16: Conv2d::new(&mut pb.pp("lat16"), widths[3], c, 1, 1)?,
            out: Conv2d::new(&mut pb.pp("out"), c, c, 3, 1)?,
        })
    }

    fn forward(&self, levels: &[Tensor; 3]) -> Result<Tensor> {
        let p16 = self.lat16.forward(&levels[2])?;
        let p8 = (self.lat8.forward(&levels[1])? + upsample2x(&p16)?)?;
        let p4 = (self.lat4.forward(&levels[0])? + upsample2x(&p8)?)?;
        self.out.forward(&p4.relu()?)
    }
}

/// Everything one image produces.
#[derive(Debug, Clone)]
pub struct ImageOutput {
    pub feat: FeatureMap,
    /// Masks of the static kernels that bootstrap stage 1.
    pub init_mask_logits: Tensor,
    pub stages: Vec<StageOutput>,
    /// Kernels entering the last stage, before any cross-frame fusion.
    pub last_stage_input: KernelSet,
    /// Mask logits the last stage assembles from.
    pub last_stage_prev_masks: Tensor,
}

impl ImageOutput {
    pub fn last(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }
}

/// Hook applied to the kernels entering the last stage:
/// `(kernels, current features, current previous-stage masks) -> kernels`.
pub type LastStageHook<'a> = dyn Fn(&KernelSet, &FeatureMap, &Tensor) -> Result<KernelSet> + 'a;

#[derive(Clone, Debug)]
pub struct KNet {
    cfg: ModelConfig,
    backbone: Backbone,
    neck: Neck,
    pub init_kernels: Var,
    pub stages: Vec<KernelUpdateStage>,
    roles: Arc<Vec<KernelRole>>,
}

impl KNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, stuff_ids: &[u16]) -> Result<Self> {
        cfg.validate()?;
        if stuff_ids.len() != cfg.num_stuff_classes {
            return Err(Error::Config(format!(
                "{} stuff classes in the class table but model.num_stuff_classes={}",
                stuff_ids.len(),
                cfg.num_stuff_classes
            )));
        }
        let mut roles = vec![KernelRole::Thing; cfg.num_thing_kernels];
        roles.extend(stuff_ids.iter().map(|&id| KernelRole::Stuff(id)));
        let backbone = Backbone::new(&mut pb.pp("backbone"), cfg.backbone_widths)?;
        let neck = Neck::new(&mut pb.pp("neck"), cfg.backbone_widths, cfg.channels)?;
        let init_kernels = pb.var(
            "init_kernels",
            &[cfg.num_kernels(), cfg.channels],
            Init::Normal(1.0 / (cfg.channels as f64).sqrt()),
        )?;
        let mut stages = Vec::new();
        for s in 0..cfg.stages {
            stages.push(KernelUpdateStage::new(&mut pb.pp(&format!("stage{s}")), cfg)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            neck,
            init_kernels,
            stages,
            roles: Arc::new(roles),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn roles(&self) -> &Arc<Vec<KernelRole>> {
        &self.roles
    }

    pub fn dtype(&self) -> DType {
        self.init_kernels.dtype()
    }

    pub fn device(&self) -> &Device {
        self.init_kernels.device()
    }

    /// Backbone, neck and positional code.
    pub fn features(&self, image: &Tensor) -> Result<FeatureMap> {
        let (ch, h, w) = image.dims3()?;
        if ch != 3 || h == 0 || w == 0 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::ImageSize {
                height: h,
                width: w,
                stride: BACKBONE_STRIDE,
            });
        }
        let x = image.to_dtype(self.dtype())?.unsqueeze(0)?;
        let levels = self.backbone.forward(&x)?;
        let f = self.neck.forward(&levels)?.squeeze(0)?;
        let (c, fh, fw) = f.dims3()?;
        let pos = sinusoidal_position_code(c, fh, fw, self.dtype(), self.device())?;
        Ok(FeatureMap {
            values: (f + pos)?,
            stride: FEATURE_STRIDE,
            has_pos_enc: true,
        })
    }

    pub fn forward_image(&self, image: &Tensor) -> Result<ImageOutput> {
        self.forward_image_with(image, None)
    }

    /// Full decoder with an optional hook on the kernels entering the last
    /// stage (cross-frame fusion plugs in here).
    pub fn forward_image_with(
        &self,
        image: &Tensor,
        last_stage_hook: Option<&LastStageHook<'_>>,
    ) -> Result<ImageOutput> {
        let feat = self.features(image)?;
        let init = KernelSet::new(self.init_kernels.as_tensor().clone(), self.roles.clone())?;
        let init_masks = predict_masks(&init.kernels, &feat)?;
        let mut kernels = init;
        let mut masks = init_masks.clone();
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut last_in = None;
        for (s, stage) in self.stages.iter().enumerate() {
            if s + 1 == self.stages.len() {
                last_in = Some((kernels.clone(), masks.clone()));
                if let Some(hook) = last_stage_hook {
                    kernels = hook(&kernels, &feat, &masks)?;
                }
            }
            let out = stage.forward(&kernels, &feat, &masks)?;
            kernels = out.kernels.clone();
            masks = out.mask_logits.clone();
            outs.push(out);
        }
        let (last_stage_input, last_stage_prev_masks) = last_in.expect("stages >= 1");
        Ok(ImageOutput {
            feat,
            init_mask_logits: init_masks,
            stages: outs,
            last_stage_input,
            last_stage_prev_masks,
        })
    }
}

/// RGB bytes (interleaved, row-major) to a normalized [3, H, W] tensor.
pub fn image_tensor(rgb: &[u8], height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if rgb.len() != height * width * 3 {
        return Err(Error::shape(
            "image_tensor",
            format!("{} bytes for {height}x{width}x3", rgb.len()),
        ));
    }
    let mut planar = vec![0f32; rgb.len()];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * height * width + p] = (px[c] as f32 / 255.0 - 0.5) / 0.25;
        }
    }
    Ok(Tensor::from_vec(planar, (3, height, width), device)?.to_dtype(dtype)?)
}
