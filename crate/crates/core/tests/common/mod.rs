//! Brute-force reference implementations and random fixtures shared by the
//! integration tests. Everything here recounts pixels directly from the label
//! maps instead of reusing the library's accumulators.

#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vknet::panoptic::{ClassTable, PanopticFrame, VideoAnnotation, VOID};

pub type Segment = (u16, u16);

/// Segment of a pixel, `None` for void; stuff collapses to instance 0.
fn seg_of(classes: &ClassTable, sem: u16, inst: u16) -> Option<Segment> {
    if sem == VOID {
        None
    } else if classes.is_thing(sem) {
        Some((sem, inst))
    } else {
        Some((sem, 0))
    }
}

/// Pixels of a video span flattened into one long frame.
pub struct Flat {
    pub pred: Vec<(u16, u16)>,
    pub gt: Vec<(u16, u16)>,
}

pub fn flatten(pred: &[PanopticFrame], gt: &[PanopticFrame]) -> Flat {
    let mut f = Flat {
        pred: Vec::new(),
        gt: Vec::new(),
    };
    for (p, g) in pred.iter().zip(gt) {
        for px in 0..g.len() {
            f.pred.push((p.semantic[px], p.instance[px]));
            f.gt.push((g.semantic[px], g.instance[px]));
        }
    }
    f
}

/// Every one-to-one matching between `a` and `b` (as index pairs), including
/// partial ones.
fn all_matchings(a: usize, b: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        i: usize,
        a: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if i == a {
            out.push(cur.clone());
            return;
        }
        rec(i + 1, a, used, cur, out);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, a, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, a, &mut vec![false; b], &mut Vec::new(), &mut out);
    out
}

/// Per-class (iou_sum, tp, fp, fn) by exhaustive search for the largest
/// matching whose pairs all have IoU > 0.5; GT-void pixels are dropped.
pub fn oracle_pq_stats(flat: &Flat, classes: &ClassTable) -> Vec<(u16, f64, usize, usize, usize)> {
    let keep: Vec<usize> = (0..flat.gt.len()).filter(|&i| flat.gt[i].0 != VOID).collect();
    let pseg = |i: usize| seg_of(classes, flat.pred[i].0, flat.pred[i].1);
    let gseg = |i: usize| seg_of(classes, flat.gt[i].0, flat.gt[i].1);
    let pred_segs: BTreeSet<Segment> = keep.iter().filter_map(|&i| pseg(i)).collect();
    let gt_segs: BTreeSet<Segment> = keep.iter().filter_map(|&i| gseg(i)).collect();
    let class_ids: BTreeSet<u16> = pred_segs.iter().chain(&gt_segs).map(|s| s.0).collect();
    let mut out = Vec::new();
    for c in class_ids {
        let ps: Vec<Segment> = pred_segs.iter().filter(|s| s.0 == c).copied().collect();
        let gs: Vec<Segment> = gt_segs.iter().filter(|s| s.0 == c).copied().collect();
        let iou = |p: Segment, g: Segment| {
            let inter = keep
                .iter()
                .filter(|&&i| pseg(i) == Some(p) && gseg(i) == Some(g))
                .count();
            let union = keep
                .iter()
                .filter(|&&i| pseg(i) == Some(p) || gseg(i) == Some(g))
                .count();
            inter as f64 / union as f64
        };
        let mut best: (usize, f64) = (0, 0.0);
        for m in all_matchings(ps.len(), gs.len()) {
            let ious: Vec<f64> = m.iter().map(|&(i, j)| iou(ps[i], gs[j])).collect();
            if ious.iter().all(|&v| v > 0.5) && m.len() > best.0 {
                best = (m.len(), ious.iter().sum());
            }
        }
        out.push((c, best.1, best.0, ps.len() - best.0, gs.len() - best.0));
    }
    out
}

/// Class-mean PQ over classes with any segment; 1 when there are none.
pub fn oracle_pq(flat: &Flat, classes: &ClassTable) -> f64 {
    let stats = oracle_pq_stats(flat, classes);
    if stats.is_empty() {
        return 1.0;
    }
    let pqs: Vec<f64> = stats
        .iter()
        .map(|&(_, iou, tp, fp, fneg)| {
            let den = tp as f64 + 0.5 * fp as f64 + 0.5 * fneg as f64;
            if den == 0.0 {
                0.0
            } else {
                iou / den
            }
        })
        .collect();
    pqs.iter().sum::<f64>() / pqs.len() as f64
}

pub fn oracle_frame_pq(pred: &PanopticFrame, gt: &PanopticFrame, classes: &ClassTable) -> f64 {
    oracle_pq(&flatten(std::slice::from_ref(pred), std::slice::from_ref(gt)), classes)
}

/// Tube PQ of every `(k+1)`-frame span, averaged; a window longer than the
/// video is one span over the whole video.
pub fn oracle_vpq(pred: &VideoAnnotation, gt: &VideoAnnotation, k: usize) -> f64 {
    let t = gt.len();
    let len = (k + 1).min(t);
    let starts = t - len + 1;
    let total: f64 = (0..starts)
        .map(|s| oracle_pq(&flatten(&pred.frames[s..s + len], &gt.frames[s..s + len]), &gt.classes))
        .sum();
    total / starts as f64
}

/// Class-mean IoU over the whole video from pixel sets.
pub fn oracle_sq(pred: &VideoAnnotation, gt: &VideoAnnotation) -> f64 {
    let f = flatten(&pred.frames, &gt.frames);
    let labelled: Vec<usize> = (0..f.gt.len()).filter(|&i| f.gt[i].0 != VOID).collect();
    let classes: BTreeSet<u16> = labelled
        .iter()
        .flat_map(|&i| [f.gt[i].0, f.pred[i].0])
        .filter(|&c| c != VOID)
        .collect();
    let ious: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let inter = labelled.iter().filter(|&&i| f.gt[i].0 == c && f.pred[i].0 == c).count();
            let union = labelled.iter().filter(|&&i| f.gt[i].0 == c || f.pred[i].0 == c).count();
            inter as f64 / union as f64
        })
        .collect();
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// `(1/|G|) sum_g (1/|g|) sum_p TPA(p,g) IoU(p,g)` over thing tracks with a
/// non-zero instance id, enumerating every (pred, gt) track pair.
pub fn oracle_aq(pred: &VideoAnnotation, gt: &VideoAnnotation) -> f64 {
    let classes = &gt.classes;
    let f = flatten(&pred.frames, &gt.frames);
    let labelled: Vec<usize> = (0..f.gt.len()).filter(|&i| f.gt[i].0 != VOID).collect();
    let track = |l: (u16, u16)| (classes.is_thing(l.0) && l.1 > 0).then_some(l);
    let gts: BTreeSet<(u16, u16)> = labelled.iter().filter_map(|&i| track(f.gt[i])).collect();
    let preds: BTreeSet<(u16, u16)> = labelled.iter().filter_map(|&i| track(f.pred[i])).collect();
    if gts.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sum = 0.0;
    for &g in &gts {
        let gsize = labelled.iter().filter(|&&i| track(f.gt[i]) == Some(g)).count() as f64;
        let mut s = 0.0;
        for &p in &preds {
            let psize = labelled.iter().filter(|&&i| track(f.pred[i]) == Some(p)).count() as f64;
            let tpa = labelled
                .iter()
                .filter(|&&i| track(f.gt[i]) == Some(g) && track(f.pred[i]) == Some(p))
                .count() as f64;
            if tpa > 0.0 {
                s += tpa * tpa / (gsize + psize - tpa);
            }
        }
        sum += s / gsize;
    }
    sum / gts.len() as f64
}

pub fn oracle_stq(pred: &VideoAnnotation, gt: &VideoAnnotation) -> f64 {
    (oracle_aq(pred, gt) * oracle_sq(pred, gt)).sqrt()
}

/// Per-clip recount: a pixel counts when its GT class sequence over the
/// clip is one non-void value; it is consistent when the predicted class
/// sequence is one value as well.
pub fn oracle_mvc(pred: &VideoAnnotation, gt: &VideoAnnotation, c: usize) -> Option<f64> {
    let t = gt.len();
    if c == 0 || t < c {
        return None;
    }
    let n = gt.frames[0].len();
    let mut ratios = Vec::new();
    for s in 0..=t - c {
        let mut common = 0;
        let mut good = 0;
        for px in 0..n {
            let gseq: BTreeSet<u16> = (s..s + c).map(|j| gt.frames[j].semantic[px]).collect();
            if gseq.len() != 1 || gseq.contains(&VOID) {
                continue;
            }
            common += 1;
            let pseq: BTreeSet<u16> = (s..s + c).map(|j| pred.frames[j].semantic[px]).collect();
            if pseq.len() == 1 {
                good += 1;
            }
        }
        if common > 0 {
            ratios.push(good as f64 / common as f64);
        }
    }
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Minimum assignment cost by enumerating every matching of size
/// `min(rows, cols)`.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    let k = rows.min(cols);
    all_matchings(rows, cols)
        .into_iter()
        .filter(|m| m.len() == k)
        .map(|m| m.iter().map(|&(i, j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, t: usize, cls: &[u16; 5]) -> PanopticFrame {
    let mut semantic = vec![0u16; h * w];
    let mut instance = vec![0u16; h * w];
    let bands = rng.random_range(1..=3);
    for (px, s) in semantic.iter_mut().enumerate() {
        *s = ((px / w) * bands / h) as u16;
    }
    let things = rng.random_range(0..=4u16);
    for id in 1..=things {
        let class = cls[id as usize];
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                semantic[y * w + x] = class;
                instance[y * w + x] = id;
            }
        }
    }
    for _ in 0..rng.random_range(0..4) {
        semantic[rng.random_range(0..h * w)] = VOID;
    }
    for px in 0..h * w {
        if semantic[px] == VOID || semantic[px] < 3 {
            instance[px] = 0;
        }
    }
    PanopticFrame {
        height: h,
        width: w,
        semantic,
        instance,
        frame_index: t,
    }
}

/// A prediction derived from the ground truth by id permutation, pixel
/// flips, an id switch and spurious blobs.
fn perturb(rng: &mut ChaCha8Rng, gt: &PanopticFrame, perm: &[u16; 5], cls: &[u16; 5]) -> PanopticFrame {
    let mut inv = [0u16; 5];
    for (i, &q) in perm.iter().enumerate() {
        inv[q as usize] = i as u16;
    }
    let mut p = gt.clone();
    for px in 0..p.len() {
        if p.semantic[px] == VOID {
            p.semantic[px] = rng.random_range(0..3);
        }
        if p.instance[px] > 0 {
            p.instance[px] = perm[p.instance[px] as usize];
        }
        if rng.random_bool(0.12) {
            if rng.random_bool(0.5) {
                let q = rng.random_range(1..=4u16);
                p.semantic[px] = cls[inv[q as usize] as usize];
                p.instance[px] = q;
            } else {
                p.semantic[px] = rng.random_range(0..3);
                p.instance[px] = 0;
            }
        }
    }
    if rng.random_bool(0.1) {
        let px = rng.random_range(0..p.len());
        p.semantic[px] = VOID;
        p.instance[px] = 0;
    }
    p
}

/// Random (prediction, ground truth) video pair of `t` frames of `h x w`
/// with at most four instance ids per video.
pub fn random_video_pair(seed: u64, h: usize, w: usize, t: usize) -> (VideoAnnotation, VideoAnnotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ClassTable::synthetic();
    let mut perm = [0u16, 1, 2, 3, 4];
    let mut cls = [0u16; 5];
    for c in cls.iter_mut().skip(1) {
        *c = 3 + rng.random_range(0..2u16);
    }
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let base = random_frame(&mut rng, h, w, 0, &cls);
    for f in 0..t {
        let g = if rng.random_bool(0.6) {
            PanopticFrame {
                frame_index: f,
                ..base.clone()
            }
        } else {
            random_frame(&mut rng, h, w, f, &cls)
        };
        if rng.random_bool(0.3) {
            let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
            perm.swap(a, b);
        }
        pred.push(perturb(&mut rng, &g, &perm, &cls));
        gt.push(g);
    }
    (
        VideoAnnotation {
            frames: pred,
            classes: classes.clone(),
        },
        VideoAnnotation { frames: gt, classes },
    )
}

/// Decoder output that reproduces `gt` exactly, with the ground-truth
/// instances placed on randomly chosen thing slots, plus per-slot embeddings
/// that encode the ground-truth id (one-hot, small noise).
pub fn fixture_prediction(
    gt: &PanopticFrame,
    classes: &ClassTable,
    thing_slots: usize,
    rng: &mut ChaCha8Rng,
) -> (vknet::tracker::FramePrediction, Vec<Vec<f64>>) {
    use vknet::model::KernelRole;
    const DIM: usize = 8;
    let ids = gt.instance_ids();
    assert!(ids.len() <= thing_slots);
    let mut slots: Vec<usize> = (0..thing_slots).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let mut roles = vec![KernelRole::Thing; thing_slots];
    roles.extend(classes.stuff_ids().into_iter().map(KernelRole::Stuff));
    let n = gt.len();
    let k = classes.thing_ids().len();
    let mut masks = vec![-4.0; roles.len() * n];
    let mut logits = vec![-6.0; thing_slots * k];
    let mut emb: Vec<Vec<f64>> = (0..thing_slots)
        .map(|_| (0..DIM).map(|_| rng.random_range(-0.05..0.05)).collect())
        .collect();
    for (&id, &slot) in ids.iter().zip(&slots) {
        let mut class = 0;
        for px in 0..n {
            if gt.instance[px] == id {
                masks[slot * n + px] = 4.0;
                class = gt.semantic[px];
            }
        }
        let ci = classes.thing_index(class).unwrap();
        for c in 0..k {
            logits[slot * k + c] = if c == ci { 4.0 } else { -4.0 };
        }
        emb[slot][(id as usize - 1) % DIM] += 3.0;
    }
    for (r, role) in roles.iter().enumerate() {
        if let KernelRole::Stuff(s) = role {
            for px in 0..n {
                if gt.semantic[px] == *s {
                    masks[r * n + px] = 4.0;
                }
            }
        }
    }
    let pred = vknet::tracker::FramePrediction {
        height: gt.height,
        width: gt.width,
        roles,
        mask_logits: masks,
        class_logits: logits,
        num_thing_classes: k,
    };
    (pred, emb)
}

/// Runs the association state machine over fixture predictions of `gt`.
pub fn track_fixture(gt: &VideoAnnotation, cfg: vknet::tracker::TrackerConfig, seed: u64) -> Vec<PanopticFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = vknet::tracker::TrackAssigner::new(cfg);
    gt.frames
        .iter()
        .map(|g| {
            let (pred, emb) = fixture_prediction(g, &gt.classes, 6, &mut rng);
            tr.step(&pred, &gt.classes, &emb, &emb).unwrap().0.frame
        })
        .collect()
}

/// Predicted id with the largest overlap with every ground-truth track in
/// every frame (`None` when the track is absent or uncovered).
pub fn matched_ids(pred: &[PanopticFrame], gt: &VideoAnnotation) -> std::collections::BTreeMap<u16, Vec<Option<u16>>> {
    let mut out = std::collections::BTreeMap::new();
    let ids: BTreeSet<u16> = gt.frames.iter().flat_map(|f| f.instance_ids()).collect();
    for id in ids {
        let seq = pred
            .iter()
            .zip(&gt.frames)
            .map(|(p, g)| {
                let mut votes: std::collections::BTreeMap<u16, usize> = std::collections::BTreeMap::new();
                for px in 0..g.len() {
                    if g.instance[px] == id && p.instance[px] > 0 {
                        *votes.entry(p.instance[px]).or_default() += 1;
                    }
                }
                votes
                    .into_iter()
                    .max_by_key(|&(pid, c)| (c, std::cmp::Reverse(pid)))
                    .map(|(pid, _)| pid)
            })
            .collect();
        out.insert(id, seq);
    }
    out
}

/// Changes of the matched predicted id between consecutive frames in which
/// a ground-truth track is matched.
pub fn id_switches(pred: &[PanopticFrame], gt: &VideoAnnotation) -> usize {
    matched_ids(pred, gt)
        .values()
        .map(|seq| {
            let seen: Vec<u16> = seq.iter().flatten().copied().collect();
            seen.windows(2).filter(|w| w[0] != w[1]).count()
        })
        .sum()
}

/// Two boxes of class 3 on background 0; `hidden` frames omit box A.
pub fn occlusion_fixture(frames: usize, hidden: &[usize]) -> VideoAnnotation {
    let (h, w) = (32, 32);
    let frames = (0..frames)
        .map(|t| {
            let mut semantic = vec![0u16; h * w];
            let mut instance = vec![0u16; h * w];
            let mut paint = |y0: usize, x0: usize, id: u16| {
                for y in y0..y0 + 6 {
                    for x in x0..x0 + 6 {
                        semantic[y * w + x] = 3;
                        instance[y * w + x] = id;
                    }
                }
            };
            if !hidden.contains(&t) {
                paint(4, 4 + t, 1);
            }
            paint(20, 20 - t, 2);
            PanopticFrame {
                height: h,
                width: w,
                semantic,
                instance,
                frame_index: t,
            }
        })
        .collect();
    VideoAnnotation {
        frames,
        classes: ClassTable::synthetic(),
    }
}
