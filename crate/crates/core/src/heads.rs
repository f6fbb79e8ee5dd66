//! Video extensions over kernels: association embeddings, cross-frame
//! linking, cross-frame fusion and the clip-level temporal fusion stack.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::{assemble_group_features, AdaptiveKernelUpdate, FeatureMap, KernelSet};
use crate::nn::{attention_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

/// Per-kernel association embeddings, [N, D].
#[derive(Debug, Clone)]
pub struct KernelEmbeddings {
    pub embeddings: Tensor,
    pub source_frame: usize,
}

/// Key-frame kernels after attending to reference-frame kernels.
#[derive(Debug, Clone)]
pub struct LinkedKernels {
    pub kernels: KernelSet,
}

/// Lightweight embedding head: two hidden ReLU layers then a linear output.
#[derive(Clone, Debug)]
pub struct EmbedHead {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl EmbedHead {
    pub fn new(pb: &mut ParamBuilder, c: usize, d: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&mut pb.pp("l1"), c, d)?,
            l2: Linear::new(&mut pb.pp("l2"), d, d)?,
            out: Linear::new(&mut pb.pp("out"), d, d)?,
        })
    }

    /// [N, C] -> [N, D]
    pub fn forward(&self, kernels: &Tensor) -> Result<Tensor> {
        let x = self.l1.forward(kernels)?.relu()?;
        let x = self.l2.forward(&x)?.relu()?;
        self.out.forward(&x)
    }

    pub fn embed_kernels(&self, kernels: &KernelSet, source_frame: usize) -> Result<KernelEmbeddings> {
        Ok(KernelEmbeddings {
            embeddings: self.forward(&kernels.kernels)?,
            source_frame,
        })
    }
}

/// `K_l = FFN(MHSA(K_key, K_ref, K_ref) + K_key)`.
#[derive(Clone, Debug)]
pub struct KernelLinker {
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl KernelLinker {
    pub fn new(pb: &mut ParamBuilder, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), c, heads)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), c, hidden)?,
        })
    }

    pub fn link_kernels(&self, key: &KernelSet, reference: &KernelSet) -> Result<LinkedKernels> {
        let (nk, ck) = key.kernels.dims2()?;
        let (nr, cr) = reference.kernels.dims2()?;
        if nk != nr || ck != cr {
            return Err(Error::shape(
                "link_kernels",
                format!("key [{nk},{ck}] vs reference [{nr},{cr}]"),
            ));
        }
        let out = self.link(&key.kernels, &reference.kernels, None)?;
        Ok(LinkedKernels {
            kernels: key.with_kernels(out)?,
        })
    }

    /// Linking with only the reference rows flagged in `ref_valid` visible to
    /// the attention. With no visible reference rows the attention term is zero.
    pub fn link(&self, key: &Tensor, reference: &Tensor, ref_valid: Option<&[bool]>) -> Result<Tensor> {
        let (nk, _) = key.dims2()?;
        let attended = match ref_valid {
            Some(valid) if !valid.iter().any(|&v| v) => key.zeros_like()?,
            Some(valid) => {
                let (nr, _) = reference.dims2()?;
                if valid.len() != nr {
                    return Err(Error::shape(
                        "link_kernels",
                        format!("{} validity flags for {nr} reference rows", valid.len()),
                    ));
                }
                let mask = attention_mask(nk, valid, key.dtype(), key.device())?;
                self.attn.forward(key, reference, Some(&mask))?
            }
            None => self.attn.forward(key, reference, None)?,
        };
        self.ffn.forward(&(attended + key)?)
    }
}

/// Switches for the fusion ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionOptions {
    /// Re-weight previous kernels with current-frame features first.
    pub update: bool,
    /// Hide previous-frame rows from the joint attention.
    pub mask_previous: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            update: true,
            mask_previous: false,
        }
    }
}

/// Cross-frame kernel fusion at the start of the last decoder stage.
#[derive(Clone, Debug)]
pub struct KernelFuser {
    pub feat_norm: LayerNorm,
    pub update: AdaptiveKernelUpdate,
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl KernelFuser {
    pub fn new(pb: &mut ParamBuilder, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            feat_norm: LayerNorm::new(&mut pb.pp("feat_norm"), c)?,
            update: AdaptiveKernelUpdate::new(&mut pb.pp("update"), c)?,
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), c, heads)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), c)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), c, hidden)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), c)?,
        })
    }

    /// Updates `prev_kernels` with features the current masks assemble from
    /// `cur_feat`, attends jointly over `[prev ; cur]` and returns the rows at
    /// the current-frame positions.
    pub fn fuse_kernels(
        &self,
        prev_kernels: &KernelSet,
        cur_feat: &FeatureMap,
        cur_prev_mask_logits: &Tensor,
        cur_kernels: &KernelSet,
        opts: FusionOptions,
    ) -> Result<KernelSet> {
        let (np, cp) = prev_kernels.kernels.dims2()?;
        let (nc, cc) = cur_kernels.kernels.dims2()?;
        if np != nc || cp != cc {
            return Err(Error::shape(
                "fuse_kernels",
                format!("previous [{np},{cp}] vs current [{nc},{cc}]"),
            ));
        }
        let prev = if opts.update {
            let with_cur_roles = cur_kernels.with_kernels(prev_kernels.kernels.clone())?;
            let f = assemble_group_features(&with_cur_roles, cur_feat, cur_prev_mask_logits)?;
            let f = self.feat_norm.forward(&f)?;
            self.update.apply(&prev_kernels.kernels, &f)?
        } else {
            prev_kernels.kernels.clone()
        };
        let out = self.joint_attend(&prev, &cur_kernels.kernels, opts.mask_previous)?;
        cur_kernels.with_kernels(out)
    }

    fn joint_attend(&self, prev: &Tensor, cur: &Tensor, mask_previous: bool) -> Result<Tensor> {
        let n = cur.dims2()?.0;
        let x = Tensor::cat(&[prev, cur], 0)?;
        let mask = if mask_previous {
            let allowed: Vec<bool> = (0..2 * n).map(|i| i >= n).collect();
            Some(attention_mask(2 * n, &allowed, x.dtype(), x.device())?)
        } else {
            None
        };
        let a = self.attn.forward(&x, &x, mask.as_ref())?;
        let x = self.norm1.forward(&(x + a)?)?;
        let y = self.ffn.forward(&x)?;
        let x = self.norm2.forward(&(x + y)?)?;
        Ok(x.narrow(0, n, n)?)
    }
}

/// Pre-norm temporal self-attention layer over the T*N clip tokens.
#[derive(Clone, Debug)]
pub struct TemporalLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TemporalLayer {
    fn new(pb: &mut ParamBuilder, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), c)?,
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), c, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), c)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), c, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }

    /// Makes the layer an exact identity (zero residual branches).
    pub fn set_pass_through(&self) -> Result<()> {
        self.attn.o.set_zero()?;
        self.ffn.l2.set_zero()
    }
}

pub const CLIP_FUSION_LAYERS: usize = 3;

/// Three unshared temporal fusion layers for clip-level decoding.
#[derive(Clone, Debug)]
pub struct ClipFuser {
    pub layers: Vec<TemporalLayer>,
}

impl ClipFuser {
    pub fn new(pb: &mut ParamBuilder, c: usize, heads: usize, hidden: usize) -> Result<Self> {
        let layers = (0..CLIP_FUSION_LAYERS)
            .map(|i| TemporalLayer::new(&mut pb.pp(&format!("layer{i}")), c, heads, hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Returns the clip kernels (mean over time of the refined kernels) and
    /// the refined per-frame kernels. Kernel index is the clip identity.
    pub fn fuse_clip_kernels(&self, per_frame: &[KernelSet]) -> Result<(KernelSet, Vec<KernelSet>)> {
        let first = per_frame
            .first()
            .ok_or_else(|| Error::shape("fuse_clip_kernels", "empty clip"))?;
        let tensors: Vec<Tensor> = per_frame.iter().map(|k| k.kernels.clone()).collect();
        let (clip, refined) = self.fuse(&tensors)?;
        let refined = refined
            .into_iter()
            .map(|t| first.with_kernels(t))
            .collect::<Result<Vec<_>>>()?;
        Ok((first.with_kernels(clip)?, refined))
    }

    pub fn fuse(&self, per_frame: &[Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
        let t = per_frame.len();
        if t == 0 {
            return Err(Error::shape("fuse_clip_kernels", "empty clip"));
        }
        let (n, c) = per_frame[0].dims2()?;
        for (i, k) in per_frame.iter().enumerate() {
            if k.dims2()? != (n, c) {
                return Err(Error::shape(
                    "fuse_clip_kernels",
                    format!("frame {i} has kernels {:?}, frame 0 has [{n},{c}]", k.dims()),
                ));
            }
        }
        let mut x = Tensor::cat(per_frame, 0)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let refined: Vec<Tensor> = (0..t)
            .map(|i| x.narrow(0, i * n, n))
            .collect::<candle_core::Result<_>>()?;
        let clip = (x.reshape((t, n, c))?.sum(0)? / t as f64)?;
        Ok((clip, refined))
    }
}
