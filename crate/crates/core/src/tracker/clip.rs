//! Clip-level decoding: kernel index is the track identity within a clip.

use super::assoc::TrackerConfig;
use super::online::{TrackLogEntry, TrackedVideo};
use super::stitch::{panoptic_stitch, FramePrediction};
use crate::error::{Error, Result};
use crate::model::{predict_masks, ImageOutput, KernelSet};
use crate::nn::{ensure_finite, to_f64_vec};
use crate::synth::RgbImage;
use crate::video::VideoKNet;

/// Decoded clip before stitching.
pub struct ClipOutput {
    pub per_frame: Vec<ImageOutput>,
    /// Temporal mean of the refined kernels.
    pub clip_kernels: KernelSet,
    pub refined: Vec<KernelSet>,
}

pub fn forward_clip(model: &VideoKNet, frames: &[RgbImage]) -> Result<ClipOutput> {
    if frames.is_empty() {
        return Err(Error::Data("empty clip".into()));
    }
    let per_frame = frames
        .iter()
        .map(|f| model.knet.forward_image(&model.image(f)?))
        .collect::<Result<Vec<_>>>()?;
    let kernels: Vec<KernelSet> = per_frame.iter().map(|o| o.last().kernels.clone()).collect();
    let (clip_kernels, refined) = model.clip.fuse_clip_kernels(&kernels)?;
    Ok(ClipOutput {
        per_frame,
        clip_kernels,
        refined,
    })
}

/// Decodes a whole clip at once. Masks come from the refined per-frame
/// kernels, classes from the clip kernels through the last-stage classifier.
pub fn decode_clip(model: &VideoKNet, frames: &[RgbImage], cfg: &TrackerConfig) -> Result<TrackedVideo> {
    let co = forward_clip(model, frames)?;
    let cls = model
        .knet
        .stages
        .last()
        .expect("at least one stage")
        .classify(&co.clip_kernels.things()?)?;
    let class_logits = to_f64_vec(&cls)?;
    let mut out = TrackedVideo {
        frames: Vec::with_capacity(frames.len()),
        log: Vec::new(),
    };
    for (t, (img, (o, k))) in frames.iter().zip(co.per_frame.iter().zip(&co.refined)).enumerate() {
        let up = model.upsampler(o, img.height, img.width)?;
        let masks = up.forward(&predict_masks(&k.kernels, &o.feat)?)?;
        ensure_finite(&masks, "clip mask logits")?;
        let pred = FramePrediction {
            height: img.height,
            width: img.width,
            roles: k.roles.as_ref().clone(),
            mask_logits: to_f64_vec(&masks)?,
            class_logits: class_logits.clone(),
            num_thing_classes: model.config().num_thing_classes,
        };
        let st = panoptic_stitch(
            &pred,
            &model.classes,
            cfg.score_thresh,
            cfg.overlap_keep,
            cfg.stitch_order,
            t,
        );
        out.log.extend(st.preserved.iter().map(|p| TrackLogEntry {
            frame: t,
            track_id: (p.kernel + 1) as u16,
            class_id: p.class_id,
            score: p.score,
            mask_area: p.area,
        }));
        out.frames.push(st.frame);
    }
    Ok(out)
}
