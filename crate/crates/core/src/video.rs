//! The full video model: image segmenter plus association, linking, fusion
//! and clip heads, with the pairwise training objective.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{ClipFuser, EmbedHead, FusionOptions, KernelFuser, KernelLinker};
use crate::losses::{
    assign_track_pairs, clip_segmentation_losses, segmentation_losses, total_loss, track_aux_loss,
    track_contrastive_loss, FrameTargets, LossConfig, SegmentationLosses, TotalLoss, TrackPairLabels,
};
use crate::model::{image_tensor, ImageOutput, KNet, KernelSet, ModelConfig};
use crate::nn::{ParamStore, Upsampler};
use crate::panoptic::ClassTable;
use crate::synth::RgbImage;

/// Switches for the ablation axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureFlags {
    /// Learn association embeddings; without it raw kernels are compared.
    pub kae: bool,
    /// Link key kernels to reference kernels before embedding.
    pub link: bool,
    /// Fuse previous-frame kernels into the last decoder stage.
    pub fuse: bool,
    /// Update previous kernels with current features before fusing.
    pub fuse_update: bool,
    /// Clip-level decoding with temporal kernel fusion.
    pub clip_mode: bool,
    /// Decoder stage whose kernels feed linking and embedding; `None` = last.
    pub link_stage: Option<usize>,
    /// Apply segmentation losses to the reference frame as well.
    pub joint_training: bool,
    /// Label every thing kernel by IoU instead of only matched ones.
    pub dense_sampling: bool,
    /// Embed linked kernels at inference (otherwise the pre-link kernels).
    pub embed_linked: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self {
            kae: true,
            link: true,
            fuse: true,
            fuse_update: true,
            clip_mode: false,
            link_stage: None,
            joint_training: true,
            dense_sampling: false,
            embed_linked: true,
        }
    }
}

impl FeatureFlags {
    pub fn baseline() -> Self {
        Self {
            kae: false,
            link: false,
            fuse: false,
            fuse_update: false,
            ..Default::default()
        }
    }

    pub fn fusion(&self) -> FusionOptions {
        FusionOptions {
            update: self.fuse_update,
            mask_previous: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoKNet {
    pub knet: KNet,
    pub embed: EmbedHead,
    pub linker: KernelLinker,
    pub fuser: KernelFuser,
    pub clip: ClipFuser,
    pub flags: FeatureFlags,
    pub classes: ClassTable,
}

/// Diagnostics of one training pair.
#[derive(Debug, Clone, Default)]
pub struct PairStats {
    pub labels: TrackPairLabels,
    pub no_positives: bool,
    pub zero_norm_pairs: usize,
}

/// Per-frame state carried between frames by online inference.
#[derive(Debug, Clone)]
pub struct FrameState {
    /// Kernels entering the last stage (fusion memory).
    pub last_stage_input: KernelSet,
    /// Thing kernels of the linking stage.
    pub link_kernels: Tensor,
}

impl VideoKNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, classes: &ClassTable, flags: FeatureFlags) -> Result<Self> {
        if classes.thing_ids().len() != cfg.num_thing_classes {
            return Err(Error::Config(format!(
                "class table has {} thing classes, model expects {}",
                classes.thing_ids().len(),
                cfg.num_thing_classes
            )));
        }
        if let Some(s) = flags.link_stage {
            if s >= cfg.stages {
                return Err(Error::Config(format!("link_stage {s} but only {} stages", cfg.stages)));
            }
        }
        let mut root = store.root();
        let (c, heads, hidden) = (cfg.channels, cfg.heads, cfg.ffn_hidden);
        Ok(Self {
            knet: KNet::new(&mut root.pp("knet"), cfg, &classes.stuff_ids())?,
            embed: EmbedHead::new(&mut root.pp("embed"), c, cfg.embed_dim)?,
            linker: KernelLinker::new(&mut root.pp("linker"), c, heads, hidden)?,
            fuser: KernelFuser::new(&mut root.pp("fuser"), c, heads, hidden)?,
            clip: ClipFuser::new(&mut root.pp("clip"), c, heads, hidden)?,
            flags,
            classes: classes.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.knet.config()
    }

    pub fn dtype(&self) -> DType {
        self.knet.dtype()
    }

    pub fn link_stage(&self) -> usize {
        self.flags.link_stage.unwrap_or(self.config().stages - 1)
    }

    pub fn image(&self, img: &RgbImage) -> Result<Tensor> {
        image_tensor(&img.data, img.height, img.width, self.dtype(), self.knet.device())
    }

    pub fn upsampler(&self, out: &ImageOutput, height: usize, width: usize) -> Result<Upsampler> {
        let (_, h, w) = out.feat.dims()?;
        Upsampler::new(h, w, height, width, self.dtype(), self.knet.device())
    }

    /// Image forward, fusing `prev` (kernels that entered the previous
    /// frame's last stage) into the last stage when fusion is enabled.
    pub fn forward_frame(&self, image: &Tensor, prev: Option<&KernelSet>) -> Result<ImageOutput> {
        match (self.flags.fuse, prev) {
            (true, Some(prev)) => {
                let opts = self.flags.fusion();
                let hook = |k: &KernelSet, feat: &crate::model::FeatureMap, masks: &Tensor| {
                    self.fuser.fuse_kernels(prev, feat, masks, k, opts)
                };
                self.knet.forward_image_with(image, Some(&hook))
            }
            _ => self.knet.forward_image(image),
        }
    }

    /// Thing kernels of the linking stage.
    pub fn link_kernels(&self, out: &ImageOutput) -> Result<Tensor> {
        out.stages[self.link_stage()].kernels.things()
    }

    pub fn frame_state(&self, out: &ImageOutput) -> Result<FrameState> {
        Ok(FrameState {
            last_stage_input: out.last_stage_input.clone(),
            link_kernels: self.link_kernels(out)?,
        })
    }

    /// Memory-side association embeddings of thing kernels [N_thing, D].
    pub fn memory_embeddings(&self, things: &Tensor) -> Result<Tensor> {
        if self.flags.kae {
            self.embed.forward(things)
        } else {
            Ok(things.clone())
        }
    }

    /// Query-side association embeddings: linked to the previous frame's
    /// kernels (restricted to `prev_valid`) when linking is on.
    pub fn query_embeddings(&self, things: &Tensor, prev: Option<(&Tensor, &[bool])>) -> Result<Tensor> {
        if !self.flags.kae {
            return Ok(things.clone());
        }
        match prev {
            Some((prev_things, valid)) if self.flags.link && self.flags.embed_linked => {
                self.embed.forward(&self.linker.link(things, prev_things, Some(valid))?)
            }
            _ => self.embed.forward(things),
        }
    }

    /// Loss of one (key, reference) training pair. The reference frame is
    /// decoded first; the key frame fuses the reference kernels.
    pub fn pair_loss(
        &self,
        key_img: &RgbImage,
        ref_img: &RgbImage,
        key_gt: &FrameTargets,
        ref_gt: &FrameTargets,
        cfg: &LossConfig,
    ) -> Result<(TotalLoss, PairStats)> {
        let ref_out = self.knet.forward_image(&self.image(ref_img)?)?;
        let key_out = self.forward_frame(&self.image(key_img)?, Some(&ref_out.last_stage_input))?;
        let up = self.upsampler(&key_out, key_img.height, key_img.width)?;
        let key_seg = segmentation_losses(&key_out.stages, &up, key_gt, cfg)?;
        let ref_seg = segmentation_losses(&ref_out.stages, &up, ref_gt, cfg)?;
        let mut stats = PairStats::default();
        let (mut track, mut aux) = (None, None);
        if self.flags.kae {
            let labels = assign_track_pairs(
                &key_seg.last_thing_masks,
                &ref_seg.last_thing_masks,
                key_gt,
                ref_gt,
                &key_seg.last_match,
                &ref_seg.last_match,
                crate::losses::total::sampling_mode(self.flags.dense_sampling),
                &cfg.thresholds(),
            )?;
            let key_things = self.link_kernels(&key_out)?;
            let ref_things = self.link_kernels(&ref_out)?;
            let emb_key = if self.flags.link {
                let mut valid = vec![false; ref_things.dims2()?.0];
                for &r in &labels.ref_samples {
                    valid[r] = true;
                }
                self.embed
                    .forward(&self.linker.link(&key_things, &ref_things, Some(&valid))?)?
            } else {
                self.embed.forward(&key_things)?
            };
            let emb_ref = self.embed.forward(&ref_things)?;
            let (l_track, none) = track_contrastive_loss(&emb_key, &emb_ref, &labels)?;
            let (l_aux, zero_norm) = track_aux_loss(&emb_key, &emb_ref, &labels)?;
            track = Some(l_track);
            aux = Some(l_aux);
            stats = PairStats {
                labels,
                no_positives: none,
                zero_norm_pairs: zero_norm,
            };
        }
        let frames: Vec<&SegmentationLosses> = if self.flags.joint_training {
            vec![&key_seg, &ref_seg]
        } else {
            vec![&key_seg]
        };
        let total = total_loss(&frames, track.as_ref(), aux.as_ref(), cfg.weights)?;
        Ok((total, stats))
    }

    /// Loss of a clip decoded jointly: per-frame image losses plus the clip
    /// kernels' losses under a single clip-wide assignment.
    pub fn clip_loss(&self, images: &[&RgbImage], targets: &[FrameTargets], cfg: &LossConfig) -> Result<TotalLoss> {
        let frames: Vec<RgbImage> = images.iter().map(|&i| i.clone()).collect();
        let co = crate::tracker::forward_clip(self, &frames)?;
        let (h, w) = (targets[0].height, targets[0].width);
        let up = self.upsampler(&co.per_frame[0], h, w)?;
        let mut segs = Vec::with_capacity(frames.len() + 1);
        let mut masks = Vec::with_capacity(frames.len());
        for ((o, k), t) in co.per_frame.iter().zip(&co.refined).zip(targets) {
            segs.push(segmentation_losses(&o.stages, &up, t, cfg)?);
            let m = up.forward(&crate::model::predict_masks(&k.kernels, &o.feat)?)?;
            let (n, _, _) = m.dims3()?;
            masks.push(m.reshape((n, h * w))?);
        }
        let last = self.knet.stages.last().expect("at least one stage");
        let cls = last.classify(&co.clip_kernels.things()?)?;
        segs.push(clip_segmentation_losses(&masks, &cls, targets, cfg)?);
        let refs: Vec<&SegmentationLosses> = segs.iter().collect();
        total_loss(&refs, None, None, cfg.weights)
    }
}
