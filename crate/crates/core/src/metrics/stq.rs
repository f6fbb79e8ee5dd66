//! Segmentation and tracking quality: STQ = sqrt(AQ * SQ).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pq::check_same_length;
use crate::error::Result;
use crate::panoptic::{ClassTable, PanopticFrame, VideoAnnotation};

/// Pooled per-class intersection and union pixel counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: BTreeMap<u16, u64>,
    pub union: BTreeMap<u16, u64>,
}

impl IouAccumulator {
    /// Void ground-truth pixels are skipped; a void prediction on a labelled
    /// pixel only enlarges the ground-truth class union.
    pub fn add_frame(&mut self, pred: &PanopticFrame, gt: &PanopticFrame, classes: &ClassTable) {
        let void = classes.ignore_label;
        for (&p, &g) in pred.semantic.iter().zip(&gt.semantic) {
            if g == void {
                continue;
            }
            *self.union.entry(g).or_default() += 1;
            if p == g {
                *self.intersection.entry(g).or_default() += 1;
            } else if p != void {
                *self.union.entry(p).or_default() += 1;
            }
        }
    }

    pub fn merge(&mut self, o: &IouAccumulator) {
        for (k, v) in &o.intersection {
            *self.intersection.entry(*k).or_default() += v;
        }
        for (k, v) in &o.union {
            *self.union.entry(*k).or_default() += v;
        }
    }

    /// Mean IoU over classes with a non-empty union; 1 when nothing is
    /// labelled.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = self
            .union
            .iter()
            .filter(|(_, &u)| u > 0)
            .map(|(c, &u)| *self.intersection.get(c).unwrap_or(&0) as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Association quality terms, summed over ground-truth tracks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AqAccumulator {
    pub aq_sum: f64,
    pub gt_tracks: u64,
    pub pred_tracks: u64,
}

impl AqAccumulator {
    pub fn merge(&mut self, o: &AqAccumulator) {
        self.aq_sum += o.aq_sum;
        self.gt_tracks += o.gt_tracks;
        self.pred_tracks += o.pred_tracks;
    }

    /// Mean over ground-truth tracks. Without ground-truth tracks AQ is 1 if
    /// nothing was predicted either, else 0.
    pub fn aq(&self) -> f64 {
        if self.gt_tracks == 0 {
            if self.pred_tracks == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.aq_sum / self.gt_tracks as f64
        }
    }
}

type TrackKey = (u16, u16);

/// Adds one video: for every ground-truth track g,
/// `(1/|g|) * sum_p TPA(p,g) * IoU(p,g)` where tracks are keyed by
/// (class, instance) over thing pixels with a non-zero instance id.
pub fn accumulate_aq(pred: &VideoAnnotation, gt: &VideoAnnotation, acc: &mut AqAccumulator) {
    let classes = &gt.classes;
    let void = classes.ignore_label;
    let mut gt_size: BTreeMap<TrackKey, u64> = BTreeMap::new();
    let mut pred_size: BTreeMap<TrackKey, u64> = BTreeMap::new();
    let mut tpa: BTreeMap<(TrackKey, TrackKey), u64> = BTreeMap::new();
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        for px in 0..g.len() {
            let gs = g.semantic[px];
            if gs == void {
                continue;
            }
            let gk = (classes.is_thing(gs) && g.instance[px] > 0).then_some((gs, g.instance[px]));
            let ps = p.semantic[px];
            let pk = (classes.is_thing(ps) && p.instance[px] > 0).then_some((ps, p.instance[px]));
            if let Some(gk) = gk {
                *gt_size.entry(gk).or_default() += 1;
            }
            if let Some(pk) = pk {
                *pred_size.entry(pk).or_default() += 1;
            }
            if let (Some(gk), Some(pk)) = (gk, pk) {
                *tpa.entry((gk, pk)).or_default() += 1;
            }
        }
    }
    for (&gk, &gsize) in &gt_size {
        let mut s = 0.0;
        for (&(_, pk), &t) in tpa.range((gk, (0, 0))..=(gk, (u16::MAX, u16::MAX))) {
            let iou = t as f64 / (gsize + pred_size[&pk] - t) as f64;
            s += t as f64 * iou;
        }
        acc.aq_sum += s / gsize as f64;
    }
    acc.gt_tracks += gt_size.len() as u64;
    acc.pred_tracks += pred_size.len() as u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StqResult {
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
}

impl StqResult {
    pub fn from_parts(aq: f64, sq: f64) -> Self {
        Self {
            stq: (aq * sq).sqrt(),
            aq,
            sq,
        }
    }
}

pub fn compute_stq(pred: &VideoAnnotation, gt: &VideoAnnotation) -> Result<StqResult> {
    check_same_length(pred, gt)?;
    let mut iou = IouAccumulator::default();
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        iou.add_frame(p, g, &gt.classes);
    }
    let mut aq = AqAccumulator::default();
    accumulate_aq(pred, gt, &mut aq);
    Ok(StqResult::from_parts(aq.aq(), iou.mean_iou()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(frames: Vec<(Vec<u16>, Vec<u16>)>, w: usize) -> VideoAnnotation {
        VideoAnnotation {
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(t, (s, i))| PanopticFrame {
                    height: s.len() / w,
                    width: w,
                    semantic: s,
                    instance: i,
                    frame_index: t,
                })
                .collect(),
            classes: ClassTable::synthetic(),
        }
    }

    #[test]
    fn perfect_prediction_is_one() {
        let v = video(vec![(vec![0, 3, 3, 1], vec![0, 1, 1, 0]); 3], 2);
        let r = compute_stq(&v, &v).unwrap();
        assert_eq!((r.stq, r.aq, r.sq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn id_switch_halves_association() {
        // one gt track over two frames, predicted with a new id in frame 2
        let gt = video(vec![(vec![3, 0], vec![1, 0]), (vec![3, 0], vec![1, 0])], 2);
        let pred = video(vec![(vec![3, 0], vec![1, 0]), (vec![3, 0], vec![2, 0])], 2);
        let r = compute_stq(&pred, &gt).unwrap();
        // each pred track: TPA 1, IoU 1/2 -> (1*0.5 + 1*0.5) / 2
        assert!((r.aq - 0.5).abs() < 1e-15);
        assert_eq!(r.sq, 1.0);
    }

    #[test]
    fn composition_spot_check() {
        let r = StqResult::from_parts(0.70, 0.71);
        assert_eq!(format!("{:.2}", r.stq), "0.70");
        assert!((r.stq - 0.704982269).abs() < 1e-9);
    }
}
