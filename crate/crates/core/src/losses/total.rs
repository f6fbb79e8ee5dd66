use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::functions::{ce_mask_loss, dice_loss, focal_loss, FocalParams};
use super::matching::{hungarian_match, CostWeights, MatchResult, PairThresholds, SamplingMode, ThingPredictions};
use super::targets::FrameTargets;
use crate::error::Result;
use crate::model::StageOutput;
use crate::nn::Upsampler;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
    pub track: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            ce: 1.0,
            dice: 4.0,
            track: 0.25,
            aux: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            alpha1: 0.7,
            alpha2: 0.3,
        }
    }
}

impl LossConfig {
    /// Matching reuses the loss weights.
    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            cls: self.weights.cls,
            ce: self.weights.ce,
            dice: self.weights.dice,
            dice_eps: self.dice_eps,
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }

    pub fn thresholds(&self) -> PairThresholds {
        PairThresholds {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }
}

/// Segmentation terms of one frame, averaged over decoder stages.
#[derive(Debug, Clone)]
pub struct SegmentationLosses {
    pub cls: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
    /// Matching of the last stage.
    pub last_match: MatchResult,
    /// Binarized full-resolution thing masks of the last stage.
    pub last_thing_masks: Vec<Vec<bool>>,
}

/// Full-resolution mask logits of a stage, [N, H*W].
pub fn full_resolution_masks(stage: &StageOutput, up: &Upsampler) -> Result<Tensor> {
    let m = up.forward(&stage.mask_logits)?;
    let (n, h, w) = m.dims3()?;
    Ok(m.reshape((n, h * w))?)
}

/// Deep supervision of every stage against one frame: Hungarian matching of
/// thing kernels, focal classification, and CE/dice on matched thing masks
/// plus every stuff mask.
pub fn segmentation_losses(
    stages: &[StageOutput],
    up: &Upsampler,
    targets: &FrameTargets,
    cfg: &LossConfig,
) -> Result<SegmentationLosses> {
    let mut cls = Vec::new();
    let mut ce = Vec::new();
    let mut dice = Vec::new();
    let mut last = None;
    for stage in stages {
        let full = full_resolution_masks(stage, up)?;
        let pred = ThingPredictions::from_tensors(&full, &stage.class_logits)?;
        let m = hungarian_match(&pred, targets, &cfg.cost_weights())?;
        let n_thing = pred.num_kernels;
        let mut cls_targets = vec![None; n_thing];
        for &(k, j) in &m.pairs {
            cls_targets[k] = Some(targets.things[j].class_index);
        }
        cls.push(focal_loss(&stage.class_logits, &cls_targets, cfg.focal())?);

        let n = full.dims2()?.0;
        let stuff_logits = full.narrow(0, n_thing, n - n_thing)?;
        let (logits, gts) = match (&targets.thing_tensor, m.pairs.is_empty()) {
            (Some(gt_things), false) => {
                let dev = full.device();
                let ks: Vec<u32> = m.pairs.iter().map(|p| p.0 as u32).collect();
                let js: Vec<u32> = m.pairs.iter().map(|p| p.1 as u32).collect();
                let len = ks.len();
                let thing_logits = full.index_select(&Tensor::from_vec(ks, len, dev)?, 0)?;
                let thing_gt = gt_things.index_select(&Tensor::from_vec(js, len, dev)?, 0)?;
                (
                    Tensor::cat(&[&thing_logits, &stuff_logits], 0)?,
                    Tensor::cat(&[&thing_gt, &targets.stuff_tensor], 0)?,
                )
            }
            _ => (stuff_logits, targets.stuff_tensor.clone()),
        };
        ce.push(ce_mask_loss(&logits, &gts)?);
        dice.push(dice_loss(&logits, &gts, cfg.dice_eps)?);
        last = Some((m, pred.binary_masks()));
    }
    let mean = |v: Vec<Tensor>| -> Result<Tensor> {
        let k = v.len() as f64;
        Ok((Tensor::stack(&v, 0)?.sum(0)? / k)?)
    };
    let (last_match, last_thing_masks) = last.expect("at least one stage");
    Ok(SegmentationLosses {
        cls: mean(cls)?,
        ce: mean(ce)?,
        dice: mean(dice)?,
        last_match,
        last_thing_masks,
    })
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_track: f64,
    pub l_aux: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn from_terms(l: [f64; 5], w: LossWeights) -> Self {
        Self {
            l_cls: l[0],
            l_ce: l[1],
            l_dice: l[2],
            l_track: l[3],
            l_aux: l[4],
            total: w.cls * l[0] + w.ce * l[1] + w.dice * l[2] + w.track * l[3] + w.aux * l[4],
            weights: w,
        }
    }
}

/// Differentiable total plus its scalar breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub bundle: LossBundle,
}

/// Weighted sum. Segmentation terms are averaged over the supervised frames
/// (key, and reference under joint training); track/aux come from last-stage
/// embeddings of the key/reference pair.
pub fn total_loss(
    frames: &[&SegmentationLosses],
    track: Option<&Tensor>,
    aux: Option<&Tensor>,
    weights: LossWeights,
) -> Result<TotalLoss> {
    let first = frames.first().expect("at least one supervised frame");
    let zero = first.cls.zeros_like()?;
    let avg = |get: fn(&SegmentationLosses) -> &Tensor| -> Result<Tensor> {
        let mut s = zero.clone();
        for f in frames {
            s = (s + get(f))?;
        }
        Ok((s / frames.len() as f64)?)
    };
    let terms = [
        avg(|f| &f.cls)?,
        avg(|f| &f.ce)?,
        avg(|f| &f.dice)?,
        track.cloned().unwrap_or_else(|| zero.clone()),
        aux.cloned().unwrap_or_else(|| zero.clone()),
    ];
    let w = [weights.cls, weights.ce, weights.dice, weights.track, weights.aux];
    let mut total = zero.clone();
    let mut values = [0.0; 5];
    for i in 0..5 {
        total = (total + terms[i].affine(w[i], 0.0)?)?;
        values[i] = terms[i].to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(TotalLoss {
        total,
        bundle: LossBundle::from_terms(values, weights),
    })
}

/// Sampling mode for the tracking losses.
pub fn sampling_mode(dense: bool) -> SamplingMode {
    if dense {
        SamplingMode::Dense
    } else {
        SamplingMode::Matched
    }
}
