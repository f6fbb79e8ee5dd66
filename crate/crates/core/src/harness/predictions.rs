//! Prediction directories written by `track` and read by `evaluate`:
//!
//! ```text
//! out_dir/predictions.json          {config_hash, videos: [{name, num_frames}]}
//! out_dir/<video>/frame_TTTT.pan    same two-channel 16-bit format as the dataset
//! out_dir/<video>/tracks.jsonl      one {frame, track_id, class_id, score, mask_area} per line
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{ClassTable, VideoAnnotation};
use crate::synth::io::{frame_paths, video_dir};
use crate::synth::{read_panoptic, write_panoptic, VideoData};
use crate::tracker::TrackedVideo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedVideoEntry {
    pub name: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub config_hash: String,
    pub videos: Vec<PredictedVideoEntry>,
}

pub fn write_predictions(
    out_dir: &Path,
    videos: &[VideoData],
    preds: &[TrackedVideo],
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (v, p) in videos.iter().zip(preds) {
        fs::create_dir_all(video_dir(out_dir, &v.name))?;
        for (t, f) in p.frames.iter().enumerate() {
            write_panoptic(&frame_paths(out_dir, &v.name, t).1, f)?;
        }
        fs::write(video_dir(out_dir, &v.name).join("tracks.jsonl"), p.log_jsonl()?)?;
        entries.push(PredictedVideoEntry {
            name: v.name.clone(),
            num_frames: p.frames.len(),
        });
    }
    let meta = PredictionMeta {
        config_hash: config_hash.to_string(),
        videos: entries,
    };
    fs::write(out_dir.join("predictions.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_prediction_meta(dir: &Path) -> Result<PredictionMeta> {
    let path = dir.join("predictions.json");
    let text = crate::error::read_input_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        offset: 0,
        msg: e.to_string(),
    })
}

/// Reads the predicted maps for `name` as an annotation over `classes`.
pub fn read_predicted_video(dir: &Path, entry: &PredictedVideoEntry, classes: &ClassTable) -> Result<VideoAnnotation> {
    let frames = (0..entry.num_frames)
        .map(|t| read_panoptic(&frame_paths(dir, &entry.name, t).1, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoAnnotation {
        frames,
        classes: classes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, ScenePreset};

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_dataset(&ScenePreset::Static.specs(1, 3)).unwrap();
        let preds = vec![TrackedVideo {
            frames: videos[0].gt.frames.clone(),
            log: Vec::new(),
        }];
        write_predictions(dir.path(), &videos, &preds, "abc").unwrap();
        let meta = read_prediction_meta(dir.path()).unwrap();
        assert_eq!(meta.config_hash, "abc");
        let back = read_predicted_video(dir.path(), &meta.videos[0], &videos[0].gt.classes).unwrap();
        assert_eq!(back.frames, videos[0].gt.frames);
    }
}
