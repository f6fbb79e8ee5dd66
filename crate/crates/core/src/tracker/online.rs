//! Frame-by-frame inference: decode, stitch, embed, associate.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::assoc::{associate, Detection, TrackStore, TrackerConfig};
use super::stitch::{panoptic_stitch, FramePrediction, StitchResult};
use crate::error::{Error, Result};
use crate::model::{ImageOutput, KernelSet};
use crate::nn::{ensure_finite, to_f64_vec};
use crate::panoptic::{ClassTable, PanopticFrame};
use crate::synth::RgbImage;
use crate::video::VideoKNet;

/// One line of the track log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLogEntry {
    pub frame: usize,
    pub track_id: u16,
    pub class_id: u16,
    pub score: f64,
    pub mask_area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedVideo {
    pub frames: Vec<PanopticFrame>,
    pub log: Vec<TrackLogEntry>,
}

impl TrackedVideo {
    /// JSON-lines rendering of the log.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Association state independent of the network: takes decoded predictions
/// and per-thing-kernel embeddings.
#[derive(Debug, Clone, Default)]
pub struct TrackAssigner {
    pub cfg: TrackerConfig,
    pub store: TrackStore,
    frame: usize,
}

impl TrackAssigner {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            store: TrackStore::default(),
            frame: 0,
        }
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Stitches `pred`, associates the surviving thing kernels and rewrites
    /// their instance ids to track ids. `query[k]` / `memory[k]` are the
    /// embeddings of thing kernel `k`.
    pub fn step(
        &mut self,
        pred: &FramePrediction,
        classes: &ClassTable,
        query: &[Vec<f64>],
        memory: &[Vec<f64>],
    ) -> Result<(StitchResult, Vec<TrackLogEntry>)> {
        let mut st = panoptic_stitch(
            pred,
            classes,
            self.cfg.score_thresh,
            self.cfg.overlap_keep,
            self.cfg.stitch_order,
            self.frame,
        );
        for p in &st.preserved {
            if p.kernel >= query.len() || p.kernel >= memory.len() {
                return Err(Error::shape(
                    "track step",
                    format!("no embedding for thing kernel {}", p.kernel),
                ));
            }
        }
        let dets: Vec<Detection> = st
            .preserved
            .iter()
            .map(|p| Detection {
                class_id: p.class_id,
                query: query[p.kernel].clone(),
                memory: memory[p.kernel].clone(),
            })
            .collect();
        let ids = associate(&dets, &mut self.store, self.frame, &self.cfg);
        let mut remap = vec![0u16; pred.roles.len() + 1];
        for (p, &id) in st.preserved.iter().zip(&ids) {
            remap[p.kernel + 1] = id;
        }
        for v in st.frame.instance.iter_mut() {
            *v = remap[*v as usize];
        }
        let log = st
            .preserved
            .iter()
            .zip(&ids)
            .map(|(p, &id)| TrackLogEntry {
                frame: self.frame,
                track_id: id,
                class_id: p.class_id,
                score: p.score,
                mask_area: p.area,
            })
            .collect();
        self.frame += 1;
        Ok((st, log))
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = t.dims2()?;
    let v = to_f64_vec(t)?;
    Ok((0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect())
}

/// Host copy of the last-stage prediction at full resolution.
pub fn frame_prediction(model: &VideoKNet, out: &ImageOutput, height: usize, width: usize) -> Result<FramePrediction> {
    let up = model.upsampler(out, height, width)?;
    let last = out.last();
    let masks = up.forward(&last.mask_logits)?;
    ensure_finite(&masks, "mask logits")?;
    Ok(FramePrediction {
        height,
        width,
        roles: last.kernels.roles.as_ref().clone(),
        mask_logits: to_f64_vec(&masks)?,
        class_logits: to_f64_vec(&last.class_logits)?,
        num_thing_classes: model.config().num_thing_classes,
    })
}

struct Carry {
    last_stage_input: KernelSet,
    link_kernels: Tensor,
    preserved: Vec<bool>,
}

/// Online tracker over a model. Frame `t` only sees frames `0..=t`.
pub struct OnlineTracker<'a> {
    model: &'a VideoKNet,
    pub assigner: TrackAssigner,
    carry: Option<Carry>,
}

impl<'a> OnlineTracker<'a> {
    pub fn new(model: &'a VideoKNet, cfg: TrackerConfig) -> Self {
        Self {
            model,
            assigner: TrackAssigner::new(cfg),
            carry: None,
        }
    }

    pub fn step(&mut self, img: &RgbImage) -> Result<(PanopticFrame, Vec<TrackLogEntry>)> {
        let m = self.model;
        let x = m.image(img)?;
        let out = m.forward_frame(&x, self.carry.as_ref().map(|c| &c.last_stage_input))?;
        let pred = frame_prediction(m, &out, img.height, img.width)?;
        let things = m.link_kernels(&out)?;
        let query = m.query_embeddings(
            &things,
            self.carry.as_ref().map(|c| (&c.link_kernels, c.preserved.as_slice())),
        )?;
        let memory = m.memory_embeddings(&things)?;
        let (st, log) = self.assigner.step(&pred, &m.classes, &rows(&query)?, &rows(&memory)?)?;
        let mut preserved = vec![false; things.dims2()?.0];
        for p in &st.preserved {
            preserved[p.kernel] = true;
        }
        self.carry = Some(Carry {
            last_stage_input: out.last_stage_input.clone(),
            link_kernels: things,
            preserved,
        });
        Ok((st.frame, log))
    }
}

/// Runs the online tracker over a whole video.
pub fn step_video(model: &VideoKNet, frames: &[RgbImage], cfg: &TrackerConfig) -> Result<TrackedVideo> {
    let mut tr = OnlineTracker::new(model, *cfg);
    let mut out = TrackedVideo {
        frames: Vec::with_capacity(frames.len()),
        log: Vec::new(),
    };
    for img in frames {
        let (f, log) = tr.step(img)?;
        out.frames.push(f);
        out.log.extend(log);
    }
    Ok(out)
}
