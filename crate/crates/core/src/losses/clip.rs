//! Clip-level supervision: one assignment of thing kernels to tracks for a
//! whole clip, with matching costs summed over frames.

use candle_core::Tensor;

use super::functions::{ce_mask_loss, dice_loss, focal_loss};
use super::hungarian::CostMatrix;
use super::matching::{matching_costs, MatchResult, ThingPredictions};
use super::targets::{FrameTargets, ThingTarget};
use super::total::{LossConfig, SegmentationLosses};
use crate::error::{Error, Result};

/// Re-expresses every frame's targets over the union of clip tracks (in
/// order of first appearance). Tracks absent from a frame get an empty mask.
pub fn align_clip_targets(frames: &[FrameTargets]) -> Result<Vec<FrameTargets>> {
    let mut tracks: Vec<ThingTarget> = Vec::new();
    for f in frames {
        for t in &f.things {
            match tracks.iter().find(|u| u.track_id == t.track_id) {
                Some(u) if u.class_id != t.class_id => {
                    return Err(Error::Data(format!(
                        "track {} changes class from {} to {} within a clip",
                        t.track_id, u.class_id, t.class_id
                    )))
                }
                Some(_) => {}
                None => tracks.push(t.clone()),
            }
        }
    }
    frames
        .iter()
        .map(|f| {
            let hw = f.height * f.width;
            let mut things = Vec::with_capacity(tracks.len());
            let mut masks = Vec::with_capacity(tracks.len());
            for u in &tracks {
                match f.index_of_track(u.track_id) {
                    Some(j) => {
                        things.push(f.things[j].clone());
                        masks.push(f.thing_masks[j].clone());
                    }
                    None => {
                        things.push(ThingTarget { area: 0, ..u.clone() });
                        masks.push(vec![false; hw]);
                    }
                }
            }
            let thing_tensor = if tracks.is_empty() {
                None
            } else {
                let flat: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&b| b as u8 as f32)).collect();
                let dev = f.stuff_tensor.device();
                Some(Tensor::from_vec(flat, (tracks.len(), hw), dev)?.to_dtype(f.stuff_tensor.dtype())?)
            };
            Ok(FrameTargets {
                height: f.height,
                width: f.width,
                things,
                thing_masks: masks,
                thing_tensor,
                stuff_tensor: f.stuff_tensor.clone(),
                stuff_present: f.stuff_present.clone(),
            })
        })
        .collect()
}

/// Losses of clip kernels: `masks[t]` are full-resolution mask logits of
/// frame `t` ([N, H*W]), `class_logits` are shared by the clip.
pub fn clip_segmentation_losses(
    masks: &[Tensor],
    class_logits: &Tensor,
    targets: &[FrameTargets],
    cfg: &LossConfig,
) -> Result<SegmentationLosses> {
    if masks.is_empty() || masks.len() != targets.len() {
        return Err(Error::shape(
            "clip_segmentation_losses",
            format!("{} mask frames for {} target frames", masks.len(), targets.len()),
        ));
    }
    let aligned = align_clip_targets(targets)?;
    let preds = masks
        .iter()
        .map(|m| ThingPredictions::from_tensors(m, class_logits))
        .collect::<Result<Vec<_>>>()?;
    let n_thing = preds[0].num_kernels;
    let g = aligned[0].num_things();
    if g > n_thing {
        return Err(Error::Config(format!(
            "{g} clip tracks but only {n_thing} thing kernels"
        )));
    }
    let mut sum = vec![0.0; n_thing * g];
    for (p, t) in preds.iter().zip(&aligned) {
        let c = matching_costs(p, t, &cfg.cost_weights())?;
        for (s, v) in sum.iter_mut().zip(&c.data) {
            *s += v;
        }
    }
    let m = MatchResult::from_costs(CostMatrix::new(n_thing, g, sum)?)?;
    let mut cls_targets = vec![None; n_thing];
    for &(k, j) in &m.pairs {
        cls_targets[k] = Some(aligned[0].things[j].class_index);
    }
    let cls = focal_loss(class_logits, &cls_targets, cfg.focal())?;
    let mut ce = Vec::new();
    let mut dice = Vec::new();
    for (full, t) in masks.iter().zip(&aligned) {
        let n = full.dims2()?.0;
        let stuff_logits = full.narrow(0, n_thing, n - n_thing)?;
        let (logits, gts) = match (&t.thing_tensor, m.pairs.is_empty()) {
            (Some(gt_things), false) => {
                let dev = full.device();
                let ks: Vec<u32> = m.pairs.iter().map(|p| p.0 as u32).collect();
                let js: Vec<u32> = m.pairs.iter().map(|p| p.1 as u32).collect();
                let len = ks.len();
                let tl = full.index_select(&Tensor::from_vec(ks, len, dev)?, 0)?;
                let tg = gt_things.index_select(&Tensor::from_vec(js, len, dev)?, 0)?;
                (
                    Tensor::cat(&[&tl, &stuff_logits], 0)?,
                    Tensor::cat(&[&tg, &t.stuff_tensor], 0)?,
                )
            }
            _ => (stuff_logits, t.stuff_tensor.clone()),
        };
        ce.push(ce_mask_loss(&logits, &gts)?);
        dice.push(dice_loss(&logits, &gts, cfg.dice_eps)?);
    }
    let k = masks.len() as f64;
    Ok(SegmentationLosses {
        cls,
        ce: (Tensor::stack(&ce, 0)?.sum(0)? / k)?,
        dice: (Tensor::stack(&dice, 0)?.sum(0)? / k)?,
        last_match: m,
        last_thing_masks: preds[0].binary_masks(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panoptic::{ClassTable, PanopticFrame};
    use candle_core::{DType, Device};

    fn frame(inst: Vec<u16>) -> FrameTargets {
        let sem = inst.iter().map(|&i| if i == 0 { 0 } else { 3 }).collect();
        let f = PanopticFrame {
            height: 1,
            width: inst.len(),
            semantic: sem,
            instance: inst,
            frame_index: 0,
        };
        FrameTargets::from_frame(&f, &ClassTable::synthetic(), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn alignment_covers_the_union_of_tracks() {
        let a = align_clip_targets(&[frame(vec![1, 0, 0]), frame(vec![0, 2, 2])]).unwrap();
        assert_eq!(a[0].things.iter().map(|t| t.track_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(a[1].things.iter().map(|t| t.area).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(a[0].thing_masks[1], vec![false; 3]);
    }

    #[test]
    fn summed_cost_prefers_the_kernel_that_follows_the_track() {
        let t = [frame(vec![1, 1, 0, 0]), frame(vec![0, 0, 1, 1])];
        let dev = Device::Cpu;
        let stuff = [-9.0; 12];
        let mk = |k0: [f64; 4], k1: [f64; 4]| {
            let v: Vec<f64> = k0.iter().chain(&k1).chain(&stuff).cloned().collect();
            Tensor::from_vec(v, (5, 4), &dev).unwrap()
        };
        // kernel 0 stays put, kernel 1 moves with the object
        let masks = [
            mk([9., 9., -9., -9.], [9., 9., -9., -9.]),
            mk([9., 9., -9., -9.], [-9., -9., 9., 9.]),
        ];
        let cls = Tensor::from_vec(vec![5.0, -5.0, 5.0, -5.0], (2, 2), &dev).unwrap();
        let r = clip_segmentation_losses(&masks, &cls, &t, &LossConfig::default()).unwrap();
        assert_eq!(r.last_match.pairs, vec![(1, 0)]);
        assert!(r.ce.to_scalar::<f64>().unwrap().is_finite());
    }
}
