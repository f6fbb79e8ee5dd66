//! Panoptic quality over frames and over temporal tubes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{ClassTable, PanopticFrame, VideoAnnotation};

/// Per-class matching counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassStats {
    pub fn merge(&mut self, o: &ClassStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn pq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.iou_sum / den
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqResult {
    pub pq: f64,
    /// `None` when no thing class has any segment.
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub per_class: BTreeMap<u16, ClassStats>,
}

fn class_mean<'a>(it: impl Iterator<Item = &'a ClassStats>) -> Option<f64> {
    let v: Vec<f64> = it.filter(|s| !s.is_empty()).map(|s| s.pq()).collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl PqResult {
    /// Class-mean PQ over classes that have at least one segment. With no
    /// segments at all (every pixel void) PQ is defined as 1.
    pub fn from_stats(per_class: BTreeMap<u16, ClassStats>, classes: &ClassTable) -> Self {
        let pick = |thing: bool| {
            class_mean(
                per_class
                    .iter()
                    .filter(|(&c, _)| classes.is_thing(c) == thing)
                    .map(|(_, s)| s),
            )
        };
        Self {
            pq: class_mean(per_class.values()).unwrap_or(1.0),
            pq_thing: pick(true),
            pq_stuff: pick(false),
            per_class,
        }
    }
}

pub(crate) fn check_same_shape(pred: &PanopticFrame, gt: &PanopticFrame) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width || pred.len() != gt.len() {
        return Err(Error::shape(
            "metrics",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    Ok(())
}

pub(crate) fn check_same_length(pred: &VideoAnnotation, gt: &VideoAnnotation) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len()),
        ));
    }
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        check_same_shape(p, g)?;
    }
    Ok(())
}

/// Segment key: stuff pixels collapse to instance 0.
fn key(classes: &ClassTable, s: u16, i: u16) -> (u16, u16) {
    (s, if classes.is_thing(s) { i } else { 0 })
}

/// Matches segments jointly over all given frames (one frame for image PQ,
/// a span of frames for tube PQ). Pixels that are void in the ground truth
/// are ignored; void predictions form no segment.
pub(crate) fn segment_stats(
    pred: &[&PanopticFrame],
    gt: &[&PanopticFrame],
    classes: &ClassTable,
) -> BTreeMap<u16, ClassStats> {
    let void = classes.ignore_label;
    let mut pred_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    let mut inter: BTreeMap<((u16, u16), (u16, u16)), u64> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        for px in 0..g.len() {
            let gs = g.semantic[px];
            if gs == void {
                continue;
            }
            let gk = key(classes, gs, g.instance[px]);
            *gt_area.entry(gk).or_default() += 1;
            let ps = p.semantic[px];
            if ps == void {
                continue;
            }
            let pk = key(classes, ps, p.instance[px]);
            *pred_area.entry(pk).or_default() += 1;
            if ps == gs {
                *inter.entry((pk, gk)).or_default() += 1;
            }
        }
    }
    let mut stats: BTreeMap<u16, ClassStats> = BTreeMap::new();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    for (&(pk, gk), &i) in &inter {
        let union = pred_area[&pk] + gt_area[&gk] - i;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            let s = stats.entry(gk.0).or_default();
            s.tp += 1;
            s.iou_sum += iou;
            matched_pred.insert(pk);
            matched_gt.insert(gk);
        }
    }
    for gk in gt_area.keys().filter(|k| !matched_gt.contains(k)) {
        stats.entry(gk.0).or_default().fn_ += 1;
    }
    for pk in pred_area.keys().filter(|k| !matched_pred.contains(k)) {
        stats.entry(pk.0).or_default().fp += 1;
    }
    stats
}

/// Image panoptic quality; a segment pair matches iff IoU > 0.5.
pub fn compute_pq(pred: &PanopticFrame, gt: &PanopticFrame, classes: &ClassTable) -> Result<PqResult> {
    check_same_shape(pred, gt)?;
    Ok(PqResult::from_stats(segment_stats(&[pred], &[gt], classes), classes))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VpqAccumulator {
    pub spans: u64,
    pub pq_sum: f64,
    pub thing_sum: f64,
    pub thing_spans: u64,
    pub stuff_sum: f64,
    pub stuff_spans: u64,
}

impl VpqAccumulator {
    pub fn add(&mut self, r: &PqResult) {
        self.spans += 1;
        self.pq_sum += r.pq;
        if let Some(t) = r.pq_thing {
            self.thing_sum += t;
            self.thing_spans += 1;
        }
        if let Some(s) = r.pq_stuff {
            self.stuff_sum += s;
            self.stuff_spans += 1;
        }
    }

    pub fn merge(&mut self, o: &VpqAccumulator) {
        self.spans += o.spans;
        self.pq_sum += o.pq_sum;
        self.thing_sum += o.thing_sum;
        self.thing_spans += o.thing_spans;
        self.stuff_sum += o.stuff_sum;
        self.stuff_spans += o.stuff_spans;
    }

    pub fn entry(&self) -> VpqEntry {
        let avg = |s: f64, n: u64| if n == 0 { None } else { Some(s / n as f64) };
        VpqEntry {
            vpq: avg(self.pq_sum, self.spans).unwrap_or(0.0),
            vpq_thing: avg(self.thing_sum, self.thing_spans),
            vpq_stuff: avg(self.stuff_sum, self.stuff_spans),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpqEntry {
    pub vpq: f64,
    pub vpq_thing: Option<f64>,
    pub vpq_stuff: Option<f64>,
}

/// Span start indices and exclusive ends for window `k`: every run of `k+1`
/// consecutive frames; a window longer than the video is clipped to one span
/// covering the whole video.
pub fn spans(len: usize, k: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    if k + 1 >= len {
        return vec![(0, len)];
    }
    (0..len - k).map(|s| (s, s + k + 1)).collect()
}

pub(crate) fn accumulate_vpq(pred: &VideoAnnotation, gt: &VideoAnnotation, k: usize, acc: &mut VpqAccumulator) {
    let classes = &gt.classes;
    for (s, e) in spans(gt.len(), k) {
        let p: Vec<&PanopticFrame> = pred.frames[s..e].iter().collect();
        let g: Vec<&PanopticFrame> = gt.frames[s..e].iter().collect();
        acc.add(&PqResult::from_stats(segment_stats(&p, &g, classes), classes));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpqResult {
    pub per_window: BTreeMap<usize, VpqEntry>,
    /// Mean VPQ over the window list.
    pub mean: f64,
}

/// Video panoptic quality: PQ over tube segments of each `(k+1)`-frame span,
/// averaged over spans, for every window `k`.
pub fn compute_vpq(pred: &VideoAnnotation, gt: &VideoAnnotation, windows: &[usize]) -> Result<VpqResult> {
    check_same_length(pred, gt)?;
    let mut per_window = BTreeMap::new();
    for &k in windows {
        let mut acc = VpqAccumulator::default();
        accumulate_vpq(pred, gt, k, &mut acc);
        per_window.insert(k, acc.entry());
    }
    Ok(VpqResult {
        mean: mean_vpq(&per_window),
        per_window,
    })
}

pub(crate) fn mean_vpq(per_window: &BTreeMap<usize, VpqEntry>) -> f64 {
    if per_window.is_empty() {
        0.0
    } else {
        per_window.values().map(|e| e.vpq).sum::<f64>() / per_window.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(sem: &[u16], inst: &[u16], w: usize) -> PanopticFrame {
        PanopticFrame {
            height: sem.len() / w,
            width: w,
            semantic: sem.to_vec(),
            instance: inst.to_vec(),
            frame_index: 0,
        }
    }

    #[test]
    fn identical_frames_score_one() {
        let c = ClassTable::synthetic();
        let f = frame(&[0, 0, 3, 3, 1, 4, 4, 1], &[0, 0, 1, 1, 0, 2, 2, 0], 4);
        assert_eq!(compute_pq(&f, &f, &c).unwrap().pq, 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let c = ClassTable::synthetic();
        let gt = frame(&[3, 3, 4, 4], &[1, 1, 2, 2], 4);
        let pred = frame(&[255; 4], &[0; 4], 4);
        assert_eq!(compute_pq(&pred, &gt, &c).unwrap().pq, 0.0);
    }

    #[test]
    fn one_match_at_iou_point_six_and_one_miss() {
        // class 3: gt A covers 5 px, pred covers 3 of them (IoU 0.6);
        // gt B (2 px) is predicted as background class 0 -> FN; background
        // class 0 is a separate class and is excluded by only looking at class 3.
        let c = ClassTable::synthetic();
        let gt = frame(&[3, 3, 3, 3, 3, 3, 3], &[1, 1, 1, 1, 1, 2, 2], 7);
        let pred = frame(&[3, 3, 3, 255, 255, 255, 255], &[1, 1, 1, 0, 0, 0, 0], 7);
        let r = compute_pq(&pred, &gt, &c).unwrap();
        assert!((r.per_class[&3].pq() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn window_spans_are_clipped() {
        assert_eq!(spans(4, 0).len(), 4);
        assert_eq!(spans(4, 1), vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(spans(3, 10), vec![(0, 3)]);
    }
}
