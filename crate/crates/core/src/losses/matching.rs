//! Target assignment: Hungarian matching of thing kernels to ground-truth
//! things, and labelling of cross-frame kernel pairs for the tracking losses.

use std::collections::BTreeSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::hungarian::{min_cost_assignment, CostMatrix};
use super::targets::{mask_iou, FrameTargets};
use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

/// Host copy of the thing-kernel predictions of one stage at full resolution.
#[derive(Debug, Clone)]
pub struct ThingPredictions {
    pub num_kernels: usize,
    pub num_pixels: usize,
    pub num_classes: usize,
    /// [N_thing * H*W]
    pub mask_logits: Vec<f64>,
    /// [N_thing * num_classes]
    pub class_logits: Vec<f64>,
}

impl ThingPredictions {
    /// `full_masks`: [N, H*W] (all kernels), `class_logits`: [N_thing, K].
    pub fn from_tensors(full_masks: &Tensor, class_logits: &Tensor) -> Result<Self> {
        let (n_thing, k) = class_logits.dims2()?;
        let (_, hw) = full_masks.dims2()?;
        Ok(Self {
            num_kernels: n_thing,
            num_pixels: hw,
            num_classes: k,
            mask_logits: to_f64_vec(&full_masks.narrow(0, 0, n_thing)?)?,
            class_logits: to_f64_vec(class_logits)?,
        })
    }

    pub fn mask(&self, i: usize) -> &[f64] {
        &self.mask_logits[i * self.num_pixels..(i + 1) * self.num_pixels]
    }

    /// Mask binarized at probability 0.5 (logit 0).
    pub fn binary_mask(&self, i: usize) -> Vec<bool> {
        self.mask(i).iter().map(|&x| x > 0.0).collect()
    }

    pub fn binary_masks(&self) -> Vec<Vec<bool>> {
        (0..self.num_kernels).map(|i| self.binary_mask(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
    pub dice_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// (kernel index, ground-truth thing index)
    pub pairs: Vec<(usize, usize)>,
    /// [N_thing, G]
    pub cost_matrix: CostMatrix,
    pub unmatched_kernels: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    pub fn from_costs(cost: CostMatrix) -> Result<Self> {
        let pairs = min_cost_assignment(&cost)?;
        let matched: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        Ok(Self {
            unmatched_kernels: (0..cost.rows).filter(|i| !matched.contains(i)).collect(),
            total_cost: cost.total(&pairs),
            pairs,
            cost_matrix: cost,
        })
    }

    pub fn gt_of(&self, kernel: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == kernel).map(|p| p.1)
    }

    pub fn kernel_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Matching cost of every (thing kernel, ground-truth thing) pair:
/// `w_cls * (-p(class)) + w_ce * mean BCE + w_dice * dice`.
pub fn matching_costs(pred: &ThingPredictions, gt: &FrameTargets, w: &CostWeights) -> Result<CostMatrix> {
    let g = gt.num_things();
    let n = pred.num_kernels;
    let hw = pred.num_pixels;
    if gt.height * gt.width != hw {
        return Err(Error::shape(
            "hungarian_match",
            format!("{hw} predicted pixels vs {}x{} target", gt.height, gt.width),
        ));
    }
    let mut data = vec![0.0; n * g];
    for i in 0..n {
        let m = pred.mask(i);
        let sp_sum: f64 = m.iter().map(|&x| softplus(x)).sum();
        let prob: Vec<f64> = m.iter().map(|&x| sig(x)).collect();
        let p2_sum: f64 = prob.iter().map(|p| p * p).sum();
        for (j, t) in gt.things.iter().enumerate() {
            let mask = &gt.thing_masks[j];
            let (mut xg, mut pg) = (0.0, 0.0);
            for p in 0..hw {
                if mask[p] {
                    xg += m[p];
                    pg += prob[p];
                }
            }
            let ce = (sp_sum - xg) / hw as f64;
            let dice = 1.0 - (2.0 * pg + w.dice_eps) / (p2_sum + t.area as f64 + w.dice_eps);
            let cls = -sig(pred.class_logits[i * pred.num_classes + t.class_index]);
            data[i * g + j] = w.cls * cls + w.ce * ce + w.dice * dice;
        }
    }
    CostMatrix::new(n, g, data)
}

/// One-to-one assignment of thing kernels to ground-truth things minimizing
/// the total matching cost.
pub fn hungarian_match(pred: &ThingPredictions, gt: &FrameTargets, w: &CostWeights) -> Result<MatchResult> {
    if gt.num_things() > pred.num_kernels {
        return Err(Error::Config(format!(
            "{} ground-truth things but only {} thing kernels",
            gt.num_things(),
            pred.num_kernels
        )));
    }
    MatchResult::from_costs(matching_costs(pred, gt, w)?)
}

/// Which kernels may act as tracking samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Only Hungarian-matched kernels.
    Matched,
    /// Every thing kernel, labelled by mask IoU alone.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    /// Positive when IoU is strictly above this.
    pub alpha1: f64,
    /// Negative when IoU is strictly below this.
    pub alpha2: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            alpha1: 0.7,
            alpha2: 0.3,
        }
    }
}

/// Positive/negative (key kernel, reference kernel) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackPairLabels {
    pub positives: BTreeSet<(usize, usize)>,
    pub negatives: BTreeSet<(usize, usize)>,
    /// Key-frame kernels used as training samples (V of them).
    pub key_samples: Vec<usize>,
    /// Reference-frame kernels used as contrastive targets (K of them).
    pub ref_samples: Vec<usize>,
}

impl TrackPairLabels {
    pub fn v(&self) -> usize {
        self.key_samples.len()
    }

    pub fn k(&self) -> usize {
        self.ref_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// A sample kernel together with the track id it stands for.
fn samples(
    masks: &[Vec<bool>],
    gt: &FrameTargets,
    matches: &MatchResult,
    mode: SamplingMode,
    th: &PairThresholds,
) -> Vec<(usize, u16)> {
    match mode {
        SamplingMode::Matched => matches
            .pairs
            .iter()
            .filter(|&&(k, j)| mask_iou(&masks[k], &gt.thing_masks[j]) > th.alpha1)
            .map(|&(k, j)| (k, gt.things[j].track_id))
            .collect(),
        SamplingMode::Dense => masks
            .iter()
            .enumerate()
            .filter_map(|(k, m)| {
                gt.thing_masks
                    .iter()
                    .enumerate()
                    .map(|(j, g)| (j, mask_iou(m, g)))
                    .filter(|&(_, iou)| iou > th.alpha1)
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, _)| (k, gt.things[j].track_id))
            })
            .collect(),
    }
}

/// Labels kernel pairs across two frames. A kernel is a sample when its mask
/// overlaps its object with IoU > alpha1 (and, in matched mode, it is the
/// Hungarian match of that object). A pair of samples is positive when both
/// stand for the same track; otherwise it is negative provided the reference
/// kernel's mask overlaps the key sample's object with IoU < alpha2.
pub fn assign_track_pairs(
    key_masks: &[Vec<bool>],
    ref_masks: &[Vec<bool>],
    gt_key: &FrameTargets,
    gt_ref: &FrameTargets,
    match_key: &MatchResult,
    match_ref: &MatchResult,
    mode: SamplingMode,
    th: &PairThresholds,
) -> Result<TrackPairLabels> {
    for (name, gt) in [("key", gt_key), ("reference", gt_ref)] {
        if gt.things.iter().any(|t| t.track_id == 0) {
            return Err(Error::Data(format!("{name} frame has a thing without track id")));
        }
    }
    let key = samples(key_masks, gt_key, match_key, mode, th);
    let refs: Vec<(usize, u16)> = match mode {
        SamplingMode::Matched => samples(ref_masks, gt_ref, match_ref, mode, th),
        SamplingMode::Dense => (0..ref_masks.len())
            .map(|k| {
                let best = gt_ref
                    .thing_masks
                    .iter()
                    .enumerate()
                    .map(|(j, g)| (j, mask_iou(&ref_masks[k], g)))
                    .filter(|&(_, iou)| iou > th.alpha1)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                (k, best.map_or(0, |(j, _)| gt_ref.things[j].track_id))
            })
            .collect(),
    };
    let mut labels = TrackPairLabels {
        key_samples: key.iter().map(|s| s.0).collect(),
        ref_samples: refs.iter().map(|s| s.0).collect(),
        ..Default::default()
    };
    for &(a, track_a) in &key {
        let object_in_ref = gt_ref.index_of_track(track_a);
        for &(b, track_b) in &refs {
            if track_b != 0 && track_b == track_a {
                labels.positives.insert((a, b));
                continue;
            }
            let overlap = object_in_ref.map_or(0.0, |j| mask_iou(&ref_masks[b], &gt_ref.thing_masks[j]));
            if overlap < th.alpha2 {
                labels.negatives.insert((a, b));
            }
        }
    }
    Ok(labels)
}
