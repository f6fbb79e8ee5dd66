//! Track memory and greedy bi-softmax association.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stitch::StitchOrder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub score_thresh: f64,
    pub overlap_keep: f64,
    pub match_thresh: f64,
    /// Weight of the stored embedding in the moving average.
    pub momentum: f64,
    /// Frames a track may go unseen and still be matched.
    pub ttl: usize,
    pub stitch_order: StitchOrder,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.3,
            overlap_keep: 0.5,
            match_thresh: 0.2,
            momentum: 0.5,
            ttl: 2,
            stitch_order: StitchOrder::ThingsFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub embedding: Vec<f64>,
    pub class_id: u16,
    pub last_seen: usize,
    pub active: bool,
}

/// Ids are handed out in increasing order and never reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackStore {
    pub tracks: BTreeMap<u16, Track>,
    pub next_id: u16,
}

impl Default for TrackStore {
    fn default() -> Self {
        Self {
            tracks: BTreeMap::new(),
            next_id: 1,
        }
    }
}

impl TrackStore {
    /// Tracks that may still be matched at `frame`.
    pub fn candidates(&self, frame: usize, ttl: usize) -> Vec<u16> {
        self.tracks
            .iter()
            .filter(|(_, t)| t.active && frame.saturating_sub(t.last_seen) <= ttl)
            .map(|(&id, _)| id)
            .collect()
    }

    fn spawn(&mut self, embedding: Vec<f64>, class_id: u16, frame: usize) -> u16 {
        let id = self.next_id;
        self.next_id = self.next_id.checked_add(1).expect("track id space exhausted");
        self.tracks.insert(
            id,
            Track {
                embedding,
                class_id,
                last_seen: frame,
                active: true,
            },
        );
        id
    }

    /// Permanently retires tracks unseen for more than `ttl` frames.
    pub fn expire(&mut self, frame: usize, ttl: usize) {
        for t in self.tracks.values_mut() {
            if frame.saturating_sub(t.last_seen) > ttl {
                t.active = false;
            }
        }
    }
}

fn softmax_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, |r| r.len());
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// `0.5 * (row_softmax(S) + col_softmax(S))` with `S = cur . prev^T`.
pub fn bi_softmax_scores(cur: &[Vec<f64>], prev: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if cur.is_empty() || prev.is_empty() {
        return vec![Vec::new(); cur.len()];
    }
    let sim: Vec<Vec<f64>> = cur
        .iter()
        .map(|a| prev.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let rows = softmax_rows(&sim);
    let cols = transpose(&softmax_rows(&transpose(&sim)));
    rows.iter()
        .zip(&cols)
        .map(|(r, c)| r.iter().zip(c).map(|(a, b)| 0.5 * (a + b)).collect())
        .collect()
}

/// Current-frame instance to associate.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: u16,
    /// Query-side embedding, scored against the track memory.
    pub query: Vec<f64>,
    /// Memory-side embedding, blended into the matched track.
    pub memory: Vec<f64>,
}

/// Greedy association in descending score order, gated by class and by
/// `match_thresh`. Unmatched detections open new tracks; matched tracks blend
/// their embedding as `momentum * old + (1 - momentum) * new`. Returns the
/// track id of every detection.
pub fn associate(detections: &[Detection], store: &mut TrackStore, frame: usize, cfg: &TrackerConfig) -> Vec<u16> {
    let cand = store.candidates(frame, cfg.ttl);
    let mem: Vec<Vec<f64>> = cand.iter().map(|id| store.tracks[id].embedding.clone()).collect();
    let queries: Vec<Vec<f64>> = detections.iter().map(|d| d.query.clone()).collect();
    let scores = bi_softmax_scores(&queries, &mem);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            if s >= cfg.match_thresh && store.tracks[&cand[j]].class_id == detections[i].class_id {
                pairs.push((s, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ids: Vec<Option<u16>> = vec![None; detections.len()];
    let mut used = vec![false; cand.len()];
    for (_, i, j) in pairs {
        if ids[i].is_some() || used[j] {
            continue;
        }
        used[j] = true;
        let id = cand[j];
        ids[i] = Some(id);
        let t = store.tracks.get_mut(&id).expect("candidate track");
        for (e, n) in t.embedding.iter_mut().zip(&detections[i].memory) {
            *e = cfg.momentum * *e + (1.0 - cfg.momentum) * n;
        }
        t.last_seen = frame;
    }
    let out = ids
        .into_iter()
        .zip(detections)
        .map(|(id, d)| id.unwrap_or_else(|| store.spawn(d.memory.clone(), d.class_id, frame)))
        .collect();
    store.expire(frame, cfg.ttl);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(v: Vec<f64>, class_id: u16) -> Detection {
        Detection {
            class_id,
            query: v.clone(),
            memory: v,
        }
    }

    #[test]
    fn single_pair_scores_one() {
        let s = bi_softmax_scores(&[vec![0.3, -1.0]], &[vec![2.0, 1.0]]);
        assert!((s[0][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_by_three_hand_values() {
        // S = [[1, 0, 2], [0, 1, 0]]
        let cur = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let prev = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]];
        let s = bi_softmax_scores(&cur, &prev);
        let e = std::f64::consts::E;
        let r0 = [
            e / (e + 1.0 + e * e),
            1.0 / (e + 1.0 + e * e),
            e * e / (e + 1.0 + e * e),
        ];
        let r1 = [1.0 / (2.0 + e), e / (2.0 + e), 1.0 / (2.0 + e)];
        let c = [
            [e / (e + 1.0), 1.0 / (e + 1.0)],
            [1.0 / (1.0 + e), e / (1.0 + e)],
            [e * e / (e * e + 1.0), 1.0 / (e * e + 1.0)],
        ];
        for j in 0..3 {
            assert!((s[0][j] - 0.5 * (r0[j] + c[j][0])).abs() < 1e-9);
            assert!((s[1][j] - 0.5 * (r1[j] + c[j][1])).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_store_opens_dense_ids() {
        let mut store = TrackStore::default();
        let ids = associate(
            &[det(vec![1.0], 3), det(vec![2.0], 4)],
            &mut store,
            0,
            &TrackerConfig::default(),
        );
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(store.next_id, 3);
    }

    #[test]
    fn class_gating_and_gap_survival() {
        let cfg = TrackerConfig::default();
        let mut store = TrackStore::default();
        let a = det(vec![10.0, 0.0], 3);
        let b = det(vec![0.0, 10.0], 4);
        assert_eq!(associate(&[a.clone(), b.clone()], &mut store, 0, &cfg), vec![1, 2]);
        // frame 1: only b visible
        assert_eq!(associate(&[b.clone()], &mut store, 1, &cfg), vec![2]);
        // frame 2: a back after a 1-frame gap
        assert_eq!(associate(&[a.clone(), b.clone()], &mut store, 2, &cfg), vec![1, 2]);
        // same embedding but a class no track has never matches
        let c = det(vec![10.0, 0.0], 7);
        let ids = associate(&[c], &mut store, 3, &cfg);
        assert_eq!(ids, vec![3]);
    }

    #[test]
    fn tracks_expire_after_ttl() {
        let cfg = TrackerConfig {
            ttl: 1,
            ..Default::default()
        };
        let mut store = TrackStore::default();
        let a = det(vec![1.0], 3);
        associate(&[a.clone()], &mut store, 0, &cfg);
        associate(&[], &mut store, 1, &cfg);
        associate(&[], &mut store, 2, &cfg);
        assert!(!store.tracks[&1].active);
        assert_eq!(associate(&[a], &mut store, 3, &cfg), vec![2]);
    }
}
