use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::panoptic::{ClassTable, PanopticFrame};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThingTarget {
    pub track_id: u16,
    pub class_id: u16,
    /// Index into the thing-class logits.
    pub class_index: usize,
    pub area: usize,
}

/// Full-resolution supervision derived from one ground-truth frame.
#[derive(Debug, Clone)]
pub struct FrameTargets {
    pub height: usize,
    pub width: usize,
    pub things: Vec<ThingTarget>,
    /// One binary mask per thing segment, row-major.
    pub thing_masks: Vec<Vec<bool>>,
    /// [G, H*W]; `None` when the frame has no things.
    pub thing_tensor: Option<Tensor>,
    /// [N_stuff, H*W] in stuff-kernel order.
    pub stuff_tensor: Tensor,
    pub stuff_present: Vec<bool>,
}

impl FrameTargets {
    /// Void pixels are background for every target.
    pub fn from_frame(frame: &PanopticFrame, classes: &ClassTable, dtype: DType, device: &Device) -> Result<Self> {
        let hw = frame.height * frame.width;
        let mut things: Vec<ThingTarget> = Vec::new();
        let mut thing_masks: Vec<Vec<bool>> = Vec::new();
        for (p, (&s, &i)) in frame.semantic.iter().zip(&frame.instance).enumerate() {
            if !classes.is_thing(s) {
                continue;
            }
            if i == 0 {
                return Err(Error::Data(format!(
                    "frame {}: thing pixel {p} of class {s} has no track id",
                    frame.frame_index
                )));
            }
            let idx = match things.iter().position(|t| t.track_id == i) {
                Some(idx) => idx,
                None => {
                    things.push(ThingTarget {
                        track_id: i,
                        class_id: s,
                        class_index: classes.thing_index(s).expect("thing class"),
                        area: 0,
                    });
                    thing_masks.push(vec![false; hw]);
                    things.len() - 1
                }
            };
            things[idx].area += 1;
            thing_masks[idx][p] = true;
        }
        let to_tensor = |masks: &[Vec<bool>]| -> Result<Tensor> {
            let flat: Vec<f32> = masks
                .iter()
                .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect();
            Ok(Tensor::from_vec(flat, (masks.len(), hw), device)?.to_dtype(dtype)?)
        };
        let stuff_ids = classes.stuff_ids();
        let stuff_masks: Vec<Vec<bool>> = stuff_ids
            .iter()
            .map(|&id| frame.semantic.iter().map(|&s| s == id).collect())
            .collect();
        let stuff_present = stuff_masks.iter().map(|m| m.iter().any(|&b| b)).collect();
        Ok(Self {
            height: frame.height,
            width: frame.width,
            thing_tensor: if things.is_empty() {
                None
            } else {
                Some(to_tensor(&thing_masks)?)
            },
            things,
            thing_masks,
            stuff_tensor: to_tensor(&stuff_masks)?,
            stuff_present,
        })
    }

    pub fn num_things(&self) -> usize {
        self.things.len()
    }

    pub fn index_of_track(&self, track_id: u16) -> Option<usize> {
        self.things.iter().position(|t| t.track_id == track_id)
    }
}

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
