//! Panoptic stitching of kernel masks into one non-overlapping frame.

use serde::{Deserialize, Serialize};

use crate::model::KernelRole;
use crate::panoptic::{ClassTable, PanopticFrame};

/// Host copy of a decoded frame: full-resolution mask logits for every
/// kernel and class logits for the thing kernels.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub height: usize,
    pub width: usize,
    pub roles: Vec<KernelRole>,
    /// [N * H*W]
    pub mask_logits: Vec<f64>,
    /// [N_thing * K]
    pub class_logits: Vec<f64>,
    pub num_thing_classes: usize,
}

impl FramePrediction {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn mask(&self, k: usize) -> &[f64] {
        let n = self.num_pixels();
        &self.mask_logits[k * n..(k + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreservedThing {
    pub kernel: usize,
    pub class_id: u16,
    pub score: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchResult {
    /// Instance ids are `kernel index + 1` of the preserved thing kernels.
    pub frame: PanopticFrame,
    pub preserved: Vec<PreservedThing>,
    /// Painting score of every kernel.
    pub scores: Vec<f64>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Thing score: highest class probability. Stuff score: mean probability
/// inside its binarized mask (0 for an empty mask).
pub fn kernel_scores(pred: &FramePrediction, classes: &ClassTable) -> Vec<(f64, u16)> {
    let thing_ids = classes.thing_ids();
    let k = pred.num_thing_classes;
    pred.roles
        .iter()
        .enumerate()
        .map(|(i, role)| match role {
            KernelRole::Thing => {
                let row = &pred.class_logits[i * k..(i + 1) * k];
                let (best, logit) =
                    row.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (c, &l)| if l > acc.1 { (c, l) } else { acc },
                    );
                (sig(logit), thing_ids[best])
            }
            KernelRole::Stuff(id) => {
                let (mut s, mut n) = (0.0, 0usize);
                for &x in pred.mask(i) {
                    if x > 0.0 {
                        s += sig(x);
                        n += 1;
                    }
                }
                (if n == 0 { 0.0 } else { s / n as f64 }, *id)
            }
        })
        .collect()
}

/// Painting order of [`panoptic_stitch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchOrder {
    /// Things in descending score, then stuff by per-pixel argmax.
    #[default]
    ThingsFirst,
    /// Things and stuff together in descending score; leftover pixels take
    /// the stuff argmax.
    Global,
}

/// Paints binarized masks (probability > 0.5) in descending score order onto
/// an empty canvas. A thing is dropped if its score is below `score_thresh`
/// or less than `overlap_keep` of its mask is still free. Unclaimed pixels
/// take the class of the stuff kernel with the highest logit there.
pub fn panoptic_stitch(
    pred: &FramePrediction,
    classes: &ClassTable,
    score_thresh: f64,
    overlap_keep: f64,
    order_rule: StitchOrder,
    frame_index: usize,
) -> StitchResult {
    let n_px = pred.num_pixels();
    let scored = kernel_scores(pred, classes);
    let mut order: Vec<usize> = (0..pred.roles.len())
        .filter(|&k| order_rule == StitchOrder::Global || pred.roles[k] == KernelRole::Thing)
        .collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut semantic = vec![u16::MAX; n_px];
    let mut instance = vec![0u16; n_px];
    let mut preserved = Vec::new();
    for k in order {
        let (score, class_id) = scored[k];
        let mask = pred.mask(k);
        let free: Vec<usize> = (0..n_px)
            .filter(|&p| mask[p] > 0.0 && semantic[p] == u16::MAX)
            .collect();
        if let KernelRole::Stuff(_) = pred.roles[k] {
            for &p in &free {
                semantic[p] = class_id;
            }
            continue;
        }
        if score < score_thresh {
            continue;
        }
        let area = mask.iter().filter(|&&x| x > 0.0).count();
        if free.is_empty() || (free.len() as f64) < overlap_keep * area as f64 {
            continue;
        }
        for &p in &free {
            semantic[p] = class_id;
            instance[p] = (k + 1) as u16;
        }
        preserved.push(PreservedThing {
            kernel: k,
            class_id,
            score,
            area: free.len(),
        });
    }
    let stuff: Vec<(usize, u16)> = pred
        .roles
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match r {
            KernelRole::Stuff(id) => Some((i, *id)),
            KernelRole::Thing => None,
        })
        .collect();
    for p in 0..n_px {
        if semantic[p] == u16::MAX {
            semantic[p] = stuff
                .iter()
                .map(|&(i, id)| (pred.mask(i)[p], id))
                .fold(
                    (f64::NEG_INFINITY, classes.ignore_label),
                    |a, b| {
                        if b.0 > a.0 {
                            b
                        } else {
                            a
                        }
                    },
                )
                .1;
        }
    }
    preserved.sort_by_key(|p| p.kernel);
    StitchResult {
        frame: PanopticFrame {
            height: pred.height,
            width: pred.width,
            semantic,
            instance,
            frame_index,
        },
        preserved,
        scores: scored.iter().map(|s| s.0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(masks: Vec<Vec<f64>>, roles: Vec<KernelRole>, cls: Vec<f64>, w: usize) -> FramePrediction {
        FramePrediction {
            height: masks[0].len() / w,
            width: w,
            roles,
            mask_logits: masks.concat(),
            class_logits: cls,
            num_thing_classes: 2,
        }
    }

    #[test]
    fn identical_masks_keep_the_higher_score() {
        let m = vec![5.0, 5.0, -5.0, -5.0];
        let stuff = vec![1.0; 4];
        let p = pred(
            vec![m.clone(), m, stuff],
            vec![KernelRole::Thing, KernelRole::Thing, KernelRole::Stuff(0)],
            // 0.9 vs 0.8 class probability
            vec![(0.9f64 / 0.1).ln(), -9.0, (0.8f64 / 0.2).ln(), -9.0],
            2,
        );
        let r = panoptic_stitch(&p, &ClassTable::synthetic(), 0.3, 0.5, StitchOrder::ThingsFirst, 0);
        assert_eq!(r.preserved.len(), 1);
        assert_eq!(r.preserved[0].kernel, 0);
        assert_eq!(r.frame.instance, vec![1, 1, 0, 0]);
        assert_eq!(r.frame.semantic, vec![3, 3, 0, 0]);
        r.frame.validate(&ClassTable::synthetic()).unwrap();
    }

    #[test]
    fn global_order_lets_confident_stuff_cover_things() {
        let thing = vec![5.0, 5.0, -5.0, -5.0];
        let stuff = vec![9.0, -9.0, -9.0, -9.0];
        let other = vec![-9.0, -9.0, 1.0, 1.0];
        let p = pred(
            vec![thing, stuff, other],
            vec![KernelRole::Thing, KernelRole::Stuff(0), KernelRole::Stuff(1)],
            vec![(0.6f64 / 0.4).ln(), -9.0],
            2,
        );
        let c = ClassTable::synthetic();
        let a = panoptic_stitch(&p, &c, 0.3, 0.4, StitchOrder::ThingsFirst, 0);
        assert_eq!(a.frame.semantic, vec![3, 3, 1, 1]);
        let b = panoptic_stitch(&p, &c, 0.3, 0.4, StitchOrder::Global, 0);
        assert_eq!(b.frame.semantic, vec![0, 3, 1, 1]);
        assert_eq!(b.preserved[0].area, 1);
    }
}
