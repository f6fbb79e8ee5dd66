//! Model evaluation and overlay rendering.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulators, MetricConfig, MetricEvaluator, MetricReport};
use crate::panoptic::{ClassTable, PanopticFrame, VideoAnnotation};
use crate::synth::{RgbImage, VideoData};
use crate::tracker::{track_video, TrackedVideo, TrackerConfig};
use crate::video::VideoKNet;

/// Predictions of the model on every video, in input order. Videos run on
/// separate threads unless `sequential`.
pub fn predict_videos(
    model: &VideoKNet,
    videos: &[VideoData],
    tracker: &TrackerConfig,
    sequential: bool,
) -> Result<Vec<TrackedVideo>> {
    if sequential || videos.len() < 2 {
        return videos.iter().map(|v| track_video(model, &v.frames, tracker)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .iter()
            .map(|v| s.spawn(move || track_video(model, &v.frames, tracker)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

/// Metrics of predicted videos against their ground truth, merged in
/// video order.
pub fn score_predictions(
    preds: &[TrackedVideo],
    videos: &[VideoData],
    classes: &ClassTable,
    metrics: &MetricConfig,
) -> Result<MetricReport> {
    let mut ev = MetricEvaluator::new(classes.clone(), metrics.clone());
    for (p, v) in preds.iter().zip(videos) {
        let pred = VideoAnnotation {
            frames: p.frames.clone(),
            classes: classes.clone(),
        };
        ev.add_video(&pred, &v.gt)?;
    }
    Ok(ev.report())
}

pub fn evaluate_model(
    model: &VideoKNet,
    videos: &[VideoData],
    tracker: &TrackerConfig,
    metrics: &MetricConfig,
    sequential: bool,
    config_hash: Option<String>,
) -> Result<MetricReport> {
    if videos.iter().any(|v| v.gt.classes != model.classes) {
        return Err(Error::Data("dataset class table differs from the checkpoint's".into()));
    }
    let preds = predict_videos(model, videos, tracker, sequential)?;
    let mut r = score_predictions(&preds, videos, &model.classes, metrics)?;
    r.config_hash = config_hash;
    Ok(r)
}

/// Folds per-video accumulators into one report (used to pool seeds).
pub fn pooled_report(accs: &[MetricAccumulators]) -> MetricReport {
    let mut a = MetricAccumulators::default();
    for x in accs {
        a.merge(x);
    }
    MetricReport::from_accumulators(a)
}

/// Distinct colour per track id (golden-angle hue walk).
pub fn track_color(id: u16) -> [u8; 3] {
    let h = (id as f64 * 137.507_764) % 360.0;
    hsv(h, 0.85, 0.95)
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Blends track colours over thing pixels and a grey per stuff class.
pub fn render_overlay(img: &RgbImage, pan: &PanopticFrame, classes: &ClassTable) -> RgbImage {
    let mut data = img.data.clone();
    for p in 0..pan.len() {
        let color = if classes.is_thing(pan.semantic[p]) && pan.instance[p] > 0 {
            track_color(pan.instance[p])
        } else {
            let g = 40u8.saturating_add((pan.semantic[p] as u8).wrapping_mul(50));
            [g, g, g]
        };
        for c in 0..3 {
            let a = data[3 * p + c] as u16;
            data[3 * p + c] = ((a + 3 * color[c] as u16) / 4) as u8;
        }
    }
    RgbImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Binary PPM with the config hash in a header comment.
pub fn write_ppm(path: &Path, img: &RgbImage, config_hash: &str) -> Result<()> {
    let mut out = format!("P6\n# config_hash {config_hash}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `frame_TTTT.ppm` overlays for a tracked video.
pub fn render_video(
    out_dir: &Path,
    frames: &[RgbImage],
    tracked: &TrackedVideo,
    classes: &ClassTable,
    config_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for (t, (img, pan)) in frames.iter().zip(&tracked.frames).enumerate() {
        write_ppm(
            &out_dir.join(format!("frame_{t:04}.ppm")),
            &render_overlay(img, pan, classes),
            config_hash,
        )?;
    }
    Ok(())
}
