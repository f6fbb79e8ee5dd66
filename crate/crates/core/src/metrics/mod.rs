//! Video panoptic segmentation metrics. Every metric keeps mergeable
//! accumulators so several videos can be evaluated independently and merged.

pub mod pq;
pub mod semantic;
pub mod stq;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pq::{compute_pq, compute_vpq, spans, ClassStats, PqResult, VpqAccumulator, VpqEntry, VpqResult};
pub use semantic::{compute_miou, compute_mvc, MvcAccumulator};
pub use stq::{compute_stq, AqAccumulator, IouAccumulator, StqResult};

use crate::error::{Error, Result};
use crate::panoptic::{ClassTable, VideoAnnotation};

/// Window and clip-length selections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub vpq_windows: Vec<usize>,
    pub mvc_clips: Vec<usize>,
}

impl MetricConfig {
    /// Short-clip windows {0, 5, 10, 15}.
    pub fn cityscapes_windows() -> Vec<usize> {
        vec![0, 5, 10, 15]
    }

    /// Long-sequence windows {1, 2, 3, 4}.
    pub fn kitti_windows() -> Vec<usize> {
        vec![1, 2, 3, 4]
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            vpq_windows: Self::kitti_windows(),
            mvc_clips: vec![8, 16],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulators {
    pub videos: u64,
    pub frames: u64,
    /// Sum of per-frame PQ.
    pub frame_pq_sum: f64,
    /// Per-class counts pooled over all frames.
    pub frame_pq_stats: BTreeMap<u16, ClassStats>,
    pub vpq: BTreeMap<usize, VpqAccumulator>,
    pub semantic_iou: IouAccumulator,
    pub aq: AqAccumulator,
    pub mvc: BTreeMap<usize, MvcAccumulator>,
}

impl MetricAccumulators {
    pub fn merge(&mut self, o: &MetricAccumulators) {
        self.videos += o.videos;
        self.frames += o.frames;
        self.frame_pq_sum += o.frame_pq_sum;
        for (c, s) in &o.frame_pq_stats {
            self.frame_pq_stats.entry(*c).or_default().merge(s);
        }
        for (k, a) in &o.vpq {
            self.vpq.entry(*k).or_default().merge(a);
        }
        self.semantic_iou.merge(&o.semantic_iou);
        self.aq.merge(&o.aq);
        for (c, a) in &o.mvc {
            self.mvc.entry(*c).or_default().merge(a);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
    /// Frame-averaged image PQ.
    pub pq: f64,
    pub vpq_per_window: BTreeMap<usize, VpqEntry>,
    pub vpq: f64,
    pub miou: f64,
    pub mvc_per_c: BTreeMap<usize, Option<f64>>,
    pub accumulators: MetricAccumulators,
    /// Hash of the run configuration that produced the predictions, if any.
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl MetricReport {
    pub fn from_accumulators(acc: MetricAccumulators) -> Self {
        let stq = StqResult::from_parts(acc.aq.aq(), acc.semantic_iou.mean_iou());
        let vpq_per_window: BTreeMap<usize, VpqEntry> = acc.vpq.iter().map(|(k, a)| (*k, a.entry())).collect();
        Self {
            stq: stq.stq,
            aq: stq.aq,
            sq: stq.sq,
            pq: if acc.frames == 0 {
                0.0
            } else {
                acc.frame_pq_sum / acc.frames as f64
            },
            vpq: pq::mean_vpq(&vpq_per_window),
            vpq_per_window,
            miou: acc.semantic_iou.mean_iou(),
            mvc_per_c: acc.mvc.iter().map(|(c, a)| (*c, a.value())).collect(),
            accumulators: acc,
            config_hash: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&crate::error::read_input_string(path)?)
    }
}

/// Accumulates every metric over a set of videos.
#[derive(Debug, Clone)]
pub struct MetricEvaluator {
    classes: ClassTable,
    cfg: MetricConfig,
    acc: MetricAccumulators,
}

impl MetricEvaluator {
    pub fn new(classes: ClassTable, cfg: MetricConfig) -> Self {
        Self {
            classes,
            cfg,
            acc: MetricAccumulators::default(),
        }
    }

    /// Metrics of one video alone.
    pub fn video_accumulators(
        pred: &VideoAnnotation,
        gt: &VideoAnnotation,
        cfg: &MetricConfig,
    ) -> Result<MetricAccumulators> {
        pq::check_same_length(pred, gt)?;
        let classes = &gt.classes;
        let mut acc = MetricAccumulators {
            videos: 1,
            frames: gt.len() as u64,
            ..Default::default()
        };
        for (p, g) in pred.frames.iter().zip(&gt.frames) {
            let r = compute_pq(p, g, classes)?;
            acc.frame_pq_sum += r.pq;
            for (c, s) in &r.per_class {
                acc.frame_pq_stats.entry(*c).or_default().merge(s);
            }
            acc.semantic_iou.add_frame(p, g, classes);
        }
        for &k in &cfg.vpq_windows {
            pq::accumulate_vpq(pred, gt, k, acc.vpq.entry(k).or_default());
        }
        stq::accumulate_aq(pred, gt, &mut acc.aq);
        for &c in &cfg.mvc_clips {
            semantic::accumulate_mvc(pred, gt, c, acc.mvc.entry(c).or_default());
        }
        Ok(acc)
    }

    pub fn add_video(&mut self, pred: &VideoAnnotation, gt: &VideoAnnotation) -> Result<()> {
        if gt.classes != self.classes {
            return Err(Error::Data(
                "ground-truth class table differs from the evaluator's".into(),
            ));
        }
        let a = Self::video_accumulators(pred, gt, &self.cfg)?;
        self.acc.merge(&a);
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::from_accumulators(self.acc.clone())
    }
}

/// All metrics of a single video.
pub fn evaluate_video(pred: &VideoAnnotation, gt: &VideoAnnotation, cfg: &MetricConfig) -> Result<MetricReport> {
    Ok(MetricReport::from_accumulators(MetricEvaluator::video_accumulators(
        pred, gt, cfg,
    )?))
}
