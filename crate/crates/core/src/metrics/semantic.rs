//! Semantic-only video metrics: pooled mIoU and mean video consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pq::check_same_length;
use super::stq::IouAccumulator;
use crate::error::Result;
use crate::panoptic::VideoAnnotation;

pub fn compute_miou(pred: &VideoAnnotation, gt: &VideoAnnotation) -> Result<f64> {
    check_same_length(pred, gt)?;
    let mut acc = IouAccumulator::default();
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        acc.add_frame(p, g, &gt.classes);
    }
    Ok(acc.mean_iou())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MvcAccumulator {
    pub ratio_sum: f64,
    pub clips: u64,
    /// Videos shorter than the clip length.
    pub skipped_videos: u64,
}

impl MvcAccumulator {
    pub fn merge(&mut self, o: &MvcAccumulator) {
        self.ratio_sum += o.ratio_sum;
        self.clips += o.clips;
        self.skipped_videos += o.skipped_videos;
    }

    /// `None` when no clip could be evaluated.
    pub fn value(&self) -> Option<f64> {
        (self.clips > 0).then(|| self.ratio_sum / self.clips as f64)
    }
}

/// For every run of `c` consecutive frames: among pixels whose ground-truth
/// class stays the same (and non-void) across the whole clip, the fraction
/// whose predicted class also stays the same. Clips without such pixels are
/// not counted.
pub fn accumulate_mvc(pred: &VideoAnnotation, gt: &VideoAnnotation, c: usize, acc: &mut MvcAccumulator) {
    let t = gt.len();
    if c == 0 || t < c {
        log::warn!("mVC_{c}: video of {t} frames is shorter than the clip, skipped");
        acc.skipped_videos += 1;
        return;
    }
    let void = gt.classes.ignore_label;
    let n = gt.frames[0].len();
    for s in 0..=t - c {
        let (mut common, mut consistent) = (0u64, 0u64);
        for px in 0..n {
            let g0 = gt.frames[s].semantic[px];
            if g0 == void {
                continue;
            }
            let gt_same = (s + 1..s + c).all(|j| gt.frames[j].semantic[px] == g0);
            if !gt_same {
                continue;
            }
            common += 1;
            let p0 = pred.frames[s].semantic[px];
            if (s + 1..s + c).all(|j| pred.frames[j].semantic[px] == p0) {
                consistent += 1;
            }
        }
        if common > 0 {
            acc.ratio_sum += consistent as f64 / common as f64;
            acc.clips += 1;
        }
    }
}

pub fn compute_mvc(
    pred: &VideoAnnotation,
    gt: &VideoAnnotation,
    clip_lengths: &[usize],
) -> Result<BTreeMap<usize, Option<f64>>> {
    check_same_length(pred, gt)?;
    Ok(clip_lengths
        .iter()
        .map(|&c| {
            let mut acc = MvcAccumulator::default();
            accumulate_mvc(pred, gt, c, &mut acc);
            (c, acc.value())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panoptic::{ClassTable, PanopticFrame};

    fn video(sems: Vec<Vec<u16>>) -> VideoAnnotation {
        VideoAnnotation {
            frames: sems
                .into_iter()
                .enumerate()
                .map(|(t, s)| PanopticFrame {
                    height: 1,
                    width: s.len(),
                    instance: vec![0; s.len()],
                    semantic: s,
                    frame_index: t,
                })
                .collect(),
            classes: ClassTable::synthetic(),
        }
    }

    #[test]
    fn half_correct_single_class() {
        let gt = video(vec![vec![0, 0, 0, 0]]);
        let pred = video(vec![vec![0, 0, 1, 1]]);
        // class 0: 2/4, class 1: 0/2 -> union over present classes
        let acc = compute_miou(&pred, &gt).unwrap();
        assert!((acc - 0.25).abs() < 1e-15);
        let only_void_wrong = video(vec![vec![0, 0, 255, 255]]);
        assert!((compute_miou(&only_void_wrong, &gt).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn consistency_counts() {
        let gt = video(vec![vec![0, 0, 1], vec![0, 0, 2], vec![0, 0, 2]]);
        let pred = video(vec![vec![0, 1, 1], vec![0, 2, 1], vec![0, 2, 1]]);
        let m = compute_mvc(&pred, &gt, &[2, 3, 4]).unwrap();
        // c=2: clip0 common {0,1} consistent {0} -> 0.5; clip1 common {0,1,2} consistent all -> 1
        assert!((m[&2].unwrap() - 0.75).abs() < 1e-15);
        assert!((m[&3].unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m[&4], None);
    }
}
