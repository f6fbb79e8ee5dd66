//! Deterministic synthetic video panoptic data: tinted boxes and discs moving
//! along piecewise-linear paths over layered stuff backgrounds.
//!
//! Geometry is integer-only. Positions are kept in 1/16 pixel units and pixel
//! `(x, y)` is sampled at `(16x + 8, 16y + 8)`, so rasterization and therefore
//! every ground-truth mask is bit-reproducible across platforms.

pub mod io;
pub mod sampling;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{ClassTable, PanopticFrame, VideoAnnotation};

pub use io::{
    read_dataset, read_image, read_panoptic, write_dataset, write_image, write_panoptic, Dataset, DatasetMeta,
};
pub use sampling::{sample_reference_frame, ReferenceSample};

pub const SKY: u16 = 0;
pub const GROUND: u16 = 1;
pub const WALL: u16 = 2;
pub const BOX: u16 = 3;
pub const DISC: u16 = 4;

/// Sub-pixel units per pixel.
pub const SUB: i64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuffLayout {
    /// Sky above a wall band above ground.
    Horizon,
    /// Vertical stripes cycling through the stuff classes.
    Stripes,
    /// Concentric rings around a random centre.
    Radial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingShape {
    Box,
    Disc,
}

impl ThingShape {
    pub fn class_id(self) -> u16 {
        match self {
            ThingShape::Box => BOX,
            ThingShape::Disc => DISC,
        }
    }

    /// Whether the pixel centre `(px, py)` (sub-pixel units) is covered.
    pub fn covers(self, cx: i64, cy: i64, half: i64, px: i64, py: i64) -> bool {
        let h = SUB * half;
        match self {
            ThingShape::Box => cx - h <= px && px < cx + h && cy - h <= py && py < cy + h,
            ThingShape::Disc => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= h * h
            }
        }
    }
}

/// Object with a fixed path: linear interpolation between `(frame, x, y)`
/// waypoints in sub-pixel units, constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedObject {
    pub shape: ThingShape,
    /// Half side (box) or radius (disc) in pixels.
    pub half_size: u32,
    pub color: [u8; 3],
    pub waypoints: Vec<(usize, i64, i64)>,
}

impl ScriptedObject {
    pub fn position(&self, t: usize) -> (i64, i64) {
        let w = &self.waypoints;
        if t <= w[0].0 {
            return (w[0].1, w[0].2);
        }
        for pair in w.windows(2) {
            let ((t0, x0, y0), (t1, x1, y1)) = (pair[0], pair[1]);
            if t <= t1 {
                let (num, den) = ((t - t0) as i64, (t1 - t0).max(1) as i64);
                return (x0 + (x1 - x0) * num / den, y0 + (y1 - y0) * num / den);
            }
        }
        let last = w[w.len() - 1];
        (last.1, last.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Randomly generated things (scripted objects come on top of these).
    pub num_things: usize,
    pub shapes: Vec<ThingShape>,
    /// Inclusive half-size range in pixels.
    pub size_range: (u32, u32),
    /// Speed range in pixels per frame before scaling by `motion_magnitude`.
    pub speed_range: (f64, f64),
    pub motion_magnitude: f64,
    /// Number of linear pieces per trajectory.
    pub path_segments: usize,
    pub allow_occlusion: bool,
    pub allow_entry_exit: bool,
    /// `None` picks a layout from the seed.
    pub layout: Option<StuffLayout>,
    pub scripted: Vec<ScriptedObject>,
    pub max_retries: usize,
    /// Amplitude of the per-pixel colour noise.
    pub noise: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 8,
            height: 64,
            width: 64,
            num_things: 2,
            shapes: vec![ThingShape::Box, ThingShape::Disc],
            size_range: (6, 9),
            speed_range: (1.0, 2.0),
            motion_magnitude: 1.0,
            path_segments: 2,
            allow_occlusion: false,
            allow_entry_exit: false,
            layout: None,
            scripted: Vec::new(),
            max_retries: 200,
            noise: 6,
        }
    }
}

/// Named scene families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    /// Small, slow, non-overlapping scenes for memorization runs.
    Overfit,
    /// Several look-alike objects moving several pixels per frame.
    FastMotion,
    /// Objects crossing and hiding each other.
    Occlusion,
    /// Nothing moves.
    Static,
}

impl ScenePreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "overfit" => Ok(Self::Overfit),
            "fast_motion" | "fast-motion" => Ok(Self::FastMotion),
            "occlusion" => Ok(Self::Occlusion),
            "static" => Ok(Self::Static),
            _ => Err(Error::Config(format!("unknown scene preset '{name}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Overfit => "overfit",
            Self::FastMotion => "fast_motion",
            Self::Occlusion => "occlusion",
            Self::Static => "static",
        }
    }

    pub fn spec(self, seed: u64) -> SceneSpec {
        let base = SceneSpec {
            seed,
            ..Default::default()
        };
        match self {
            Self::Overfit => SceneSpec {
                height: 128,
                width: 128,
                size_range: (12, 18),
                speed_range: (2.0, 4.0),
                ..base
            },
            Self::FastMotion => SceneSpec {
                num_things: 3,
                shapes: vec![ThingShape::Box],
                size_range: (8, 11),
                speed_range: (4.0, 6.0),
                path_segments: 3,
                allow_occlusion: true,
                ..base
            },
            Self::Occlusion => SceneSpec {
                num_things: 3,
                size_range: (6, 9),
                speed_range: (1.5, 3.0),
                allow_occlusion: true,
                ..base
            },
            Self::Static => SceneSpec {
                motion_magnitude: 0.0,
                ..base
            },
        }
    }

    /// `count` scenes with consecutive seeds starting at `base_seed`.
    pub fn specs(self, count: usize, base_seed: u64) -> Vec<SceneSpec> {
        (0..count).map(|i| self.spec(base_seed + i as u64)).collect()
    }
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Frames plus ground truth of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoData {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub gt: VideoAnnotation,
}

impl VideoData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Object {
    shape: ThingShape,
    half: i64,
    color: [u8; 3],
    /// Centre per frame in sub-pixel units.
    path: Vec<(i64, i64)>,
}

fn stuff_color(class: u16) -> [u8; 3] {
    match class {
        SKY => [96, 150, 220],
        GROUND => [128, 96, 56],
        _ => [150, 150, 150],
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

#[derive(Debug, Clone)]
enum Layout {
    Horizon { sky_end: usize, wall_end: usize },
    Stripes { offset: usize, width: usize },
    Radial { cx: i64, cy: i64, r1: i64, r2: i64 },
}

impl Layout {
    fn random(kind: StuffLayout, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            StuffLayout::Horizon => {
                let sky_end = rng.random_range(h / 4..=h / 2);
                let wall_end = rng.random_range(sky_end + h / 8..=sky_end + h / 4).min(h);
                Layout::Horizon { sky_end, wall_end }
            }
            StuffLayout::Stripes => Layout::Stripes {
                offset: rng.random_range(0..w),
                width: rng.random_range((w / 6).max(2)..=(w / 3).max(2)),
            },
            StuffLayout::Radial => {
                let m = (h.min(w) as i64) * SUB;
                Layout::Radial {
                    cx: rng.random_range(0..w as i64 * SUB),
                    cy: rng.random_range(0..h as i64 * SUB),
                    r1: rng.random_range(m / 6..=m / 4),
                    r2: rng.random_range(m / 3..=m / 2),
                }
            }
        }
    }

    fn class_at(&self, x: usize, y: usize) -> u16 {
        match *self {
            Layout::Horizon { sky_end, wall_end } => {
                if y < sky_end {
                    SKY
                } else if y < wall_end {
                    WALL
                } else {
                    GROUND
                }
            }
            Layout::Stripes { offset, width } => [WALL, GROUND, SKY][((x + offset) / width) % 3],
            Layout::Radial { cx, cy, r1, r2 } => {
                let (dx, dy) = (SUB * x as i64 + 8 - cx, SUB * y as i64 + 8 - cy);
                let d2 = dx * dx + dy * dy;
                if d2 <= r1 * r1 {
                    GROUND
                } else if d2 <= r2 * r2 {
                    WALL
                } else {
                    SKY
                }
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "scene needs at least one frame and a non-empty canvas".into(),
            ));
        }
        if self.num_things > 0 && self.shapes.is_empty() {
            return Err(Error::Config("scene has things but no allowed shapes".into()));
        }
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi || 2 * hi as usize >= self.height.min(self.width) {
            return Err(Error::Config(format!("size range {lo}..={hi} does not fit the canvas")));
        }
        if self.speed_range.0 < 0.0 || self.speed_range.0 > self.speed_range.1 || self.motion_magnitude < 0.0 {
            return Err(Error::Config("invalid speed range or motion magnitude".into()));
        }
        if self.num_things + self.scripted.len() > u16::MAX as usize - 1 {
            return Err(Error::Config("too many objects".into()));
        }
        if self.scripted.iter().any(|o| o.waypoints.is_empty()) {
            return Err(Error::Config("scripted object without waypoints".into()));
        }
        Ok(())
    }
}

fn random_path(spec: &SceneSpec, half: i64, rng: &mut ChaCha8Rng) -> Vec<(i64, i64)> {
    let (w, h) = (spec.width as i64 * SUB, spec.height as i64 * SUB);
    let m = half * SUB;
    let mut x = rng.random_range(m..=w - m);
    let mut y = rng.random_range(m..=h - m);
    let t = spec.num_frames;
    let pieces = spec.path_segments.clamp(1, t.max(1));
    let mut breaks: Vec<usize> = (0..pieces - 1).map(|_| rng.random_range(1..t.max(2))).collect();
    breaks.sort_unstable();
    let velocity = |rng: &mut ChaCha8Rng| -> (i64, i64) {
        let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1) * spec.motion_magnitude;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        (
            (speed * angle.cos() * SUB as f64).round() as i64,
            (speed * angle.sin() * SUB as f64).round() as i64,
        )
    };
    let (mut vx, mut vy) = velocity(rng);
    let mut path = Vec::with_capacity(t);
    for f in 0..t {
        if f > 0 {
            if breaks.contains(&f) {
                (vx, vy) = velocity(rng);
            }
            x += vx;
            y += vy;
            if !spec.allow_entry_exit {
                if x < m || x > w - m {
                    vx = -vx;
                    x = if x < m { 2 * m - x } else { 2 * (w - m) - x }.clamp(m, w - m);
                }
                if y < m || y > h - m {
                    vy = -vy;
                    y = if y < m { 2 * m - y } else { 2 * (h - m) - y }.clamp(m, h - m);
                }
            }
        }
        path.push((x, y));
    }
    path
}

/// Conservative separation test on bounding squares (with one pixel gap).
fn overlaps(a: &Object, b: &Object) -> bool {
    let gap = (a.half + b.half + 1) * SUB;
    a.path
        .iter()
        .zip(&b.path)
        .any(|(p, q)| (p.0 - q.0).abs() < gap && (p.1 - q.1).abs() < gap)
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let mut objects: Vec<Object> = Vec::new();
    for i in 0..spec.num_things {
        let mut placed = None;
        for _ in 0..spec.max_retries.max(1) {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let half = rng.random_range(spec.size_range.0..=spec.size_range.1) as i64;
            let hue = rng.random_range(0.0..1.0);
            let color = hsv(hue, rng.random_range(0.65..0.95), rng.random_range(0.75..1.0));
            let obj = Object {
                shape,
                half,
                color,
                path: random_path(spec, half, rng),
            };
            if spec.allow_occlusion || objects.iter().all(|o| !overlaps(o, &obj)) {
                placed = Some(obj);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Data(format!(
                    "could not place object {i} of {} without overlap after {} attempts",
                    spec.num_things, spec.max_retries
                )))
            }
        }
    }
    for s in &spec.scripted {
        objects.push(Object {
            shape: s.shape,
            half: s.half_size as i64,
            color: s.color,
            path: (0..spec.num_frames).map(|t| s.position(t)).collect(),
        });
    }
    Ok(objects)
}

/// Renders one video. Later objects are drawn on top of earlier ones; the
/// instance id of object `i` is `i + 1` in every frame it is visible in.
pub fn generate_video(spec: &SceneSpec) -> Result<VideoData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kind = spec
        .layout
        .unwrap_or_else(|| [StuffLayout::Horizon, StuffLayout::Stripes, StuffLayout::Radial][rng.random_range(0..3)]);
    let (h, w) = (spec.height, spec.width);
    let layout = Layout::random(kind, h, w, &mut rng);
    let objects = place_objects(spec, &mut rng)?;
    let mut background = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            background[y * w + x] = layout.class_at(x, y);
        }
    }
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut gt = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut semantic = background.clone();
        let mut instance = vec![0u16; h * w];
        let mut color_of: Vec<[u8; 3]> = semantic.iter().map(|&c| stuff_color(c)).collect();
        for (i, o) in objects.iter().enumerate() {
            let (cx, cy) = o.path[t];
            let r = o.half * SUB;
            if cx + r < 0 || cy + r < 0 {
                continue;
            }
            let x0 = ((cx - r) / SUB - 1).max(0) as usize;
            let y0 = ((cy - r) / SUB - 1).max(0) as usize;
            let x1 = (((cx + r) / SUB + 1) as usize).min(w - 1);
            let y1 = (((cy + r) / SUB + 1) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (px, py) = (SUB * x as i64 + 8, SUB * y as i64 + 8);
                    if o.shape.covers(cx, cy, o.half, px, py) {
                        let p = y * w + x;
                        semantic[p] = o.shape.class_id();
                        instance[p] = (i + 1) as u16;
                        color_of[p] = o.color;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for c in color_of {
            for ch in c {
                let n = if spec.noise > 0 {
                    rng.random_range(-(spec.noise as i16)..=spec.noise as i16)
                } else {
                    0
                };
                data.push((ch as i16 + n).clamp(0, 255) as u8);
            }
        }
        frames.push(RgbImage {
            height: h,
            width: w,
            data,
        });
        gt.push(PanopticFrame {
            height: h,
            width: w,
            semantic,
            instance,
            frame_index: t,
        });
    }
    Ok(VideoData {
        name: format!("seed{}", spec.seed),
        frames,
        gt: VideoAnnotation {
            frames: gt,
            classes: ClassTable::synthetic(),
        },
    })
}

/// Generates every spec, naming videos `video_0000`, `video_0001`, ...
pub fn generate_dataset(specs: &[SceneSpec]) -> Result<Vec<VideoData>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = generate_video(s)?;
            v.name = format!("video_{i:04}");
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scenes_have_identical_masks() {
        let v = generate_video(&ScenePreset::Static.spec(3)).unwrap();
        for f in &v.gt.frames[1..] {
            assert_eq!(f.semantic, v.gt.frames[0].semantic);
            assert_eq!(f.instance, v.gt.frames[0].instance);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = ScenePreset::FastMotion.spec(11);
        assert_eq!(generate_video(&s).unwrap(), generate_video(&s).unwrap());
    }

    #[test]
    fn ground_truth_is_valid_and_ids_persist() {
        for p in [ScenePreset::Overfit, ScenePreset::FastMotion, ScenePreset::Occlusion] {
            for seed in 0..5 {
                let v = generate_video(&p.spec(seed)).unwrap();
                v.gt.validate().unwrap();
                for f in &v.gt.frames {
                    for (&s, &i) in f.semantic.iter().zip(&f.instance) {
                        if i > 0 {
                            assert!(s == BOX || s == DISC);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn box_coverage_is_half_open() {
        // half size 1 at centre (16, 16): covers pixel centres 8 and 24 on each axis
        let s = ThingShape::Box;
        assert!(s.covers(16, 16, 1, 8, 8));
        assert!(!s.covers(16, 16, 1, 32 + 8, 8));
        assert!(s.covers(16, 16, 1, 24, 24));
    }

    #[test]
    fn crowded_scenes_fail_to_place() {
        let spec = SceneSpec {
            num_things: 40,
            size_range: (8, 9),
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(generate_video(&spec), Err(Error::Data(_))));
    }
}
