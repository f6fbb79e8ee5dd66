pub mod assoc;
pub mod clip;
pub mod online;
pub mod stitch;

pub use assoc::{associate, bi_softmax_scores, Detection, Track, TrackStore, TrackerConfig};
pub use clip::{decode_clip, forward_clip, ClipOutput};
pub use online::{frame_prediction, step_video, OnlineTracker, TrackAssigner, TrackLogEntry, TrackedVideo};
pub use stitch::{kernel_scores, panoptic_stitch, FramePrediction, PreservedThing, StitchOrder, StitchResult};

use crate::error::Result;
use crate::synth::RgbImage;
use crate::video::VideoKNet;

/// Online tracking, or clip decoding when the model runs in clip mode.
pub fn track_video(model: &VideoKNet, frames: &[RgbImage], cfg: &TrackerConfig) -> Result<TrackedVideo> {
    if model.flags.clip_mode {
        decode_clip(model, frames, cfg)
    } else {
        step_video(model, frames, cfg)
    }
}
