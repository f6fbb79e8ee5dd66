//! On-disk dataset layout:
//!
//! ```text
//! out_dir/meta.json
//! out_dir/video_XXXX/frame_TTTT.img   "VKIM" u16 version, u16 channels=3, u32 width, u32 height, RGB bytes
//! out_dir/video_XXXX/frame_TTTT.pan   "VKPN" u16 version, u16 channels=2, u32 width, u32 height, (u16 semantic, u16 instance) pairs
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RgbImage, VideoData};
use crate::error::{read_input, read_input_string, Error, Result};
use crate::panoptic::{ClassTable, PanopticFrame, VideoAnnotation};

pub const FORMAT_VERSION: u16 = 1;
pub const META_VERSION: u32 = 1;
const IMG_MAGIC: &[u8; 4] = b"VKIM";
const PAN_MAGIC: &[u8; 4] = b"VKPN";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub classes: ClassTable,
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: ClassTable,
    pub videos: Vec<VideoData>,
}

fn header(magic: &[u8; 4], channels: u16, width: usize, height: usize) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(magic);
    h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    h.extend_from_slice(&channels.to_le_bytes());
    h.extend_from_slice(&(width as u32).to_le_bytes());
    h.extend_from_slice(&(height as u32).to_le_bytes());
    h
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Validates a header and returns `(width, height, payload)`.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 4], channels: u16) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != magic {
        return Err(parse_err(
            path,
            0,
            format!("bad magic {:?}, expected {:?}", &bytes[0..4], magic),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version as u32,
            expected: FORMAT_VERSION as u32,
        });
    }
    let ch = u16::from_le_bytes([bytes[6], bytes[7]]);
    if ch != channels {
        return Err(parse_err(path, 6, format!("{ch} channels, expected {channels}")));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let bytes_per_px = if channels == 3 { 3 } else { 4 };
    let need = width * height * bytes_per_px;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != need {
        return Err(parse_err(
            path,
            HEADER_LEN + payload.len().min(need),
            format!(
                "payload of {} bytes, expected {need} for {width}x{height}",
                payload.len()
            ),
        ));
    }
    Ok((width, height, payload))
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let mut b = header(IMG_MAGIC, 3, img.width, img.height);
    b.extend_from_slice(&img.data);
    fs::write(path, b)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = read_input(path)?;
    let (width, height, payload) = parse_header(path, &bytes, IMG_MAGIC, 3)?;
    Ok(RgbImage {
        height,
        width,
        data: payload.to_vec(),
    })
}

pub fn write_panoptic(path: &Path, f: &PanopticFrame) -> Result<()> {
    let mut b = header(PAN_MAGIC, 2, f.width, f.height);
    for (s, i) in f.semantic.iter().zip(&f.instance) {
        b.extend_from_slice(&s.to_le_bytes());
        b.extend_from_slice(&i.to_le_bytes());
    }
    fs::write(path, b)?;
    Ok(())
}

pub fn read_panoptic(path: &Path, frame_index: usize) -> Result<PanopticFrame> {
    let bytes = read_input(path)?;
    let (width, height, payload) = parse_header(path, &bytes, PAN_MAGIC, 2)?;
    let mut semantic = Vec::with_capacity(width * height);
    let mut instance = Vec::with_capacity(width * height);
    for px in payload.chunks_exact(4) {
        semantic.push(u16::from_le_bytes([px[0], px[1]]));
        instance.push(u16::from_le_bytes([px[2], px[3]]));
    }
    Ok(PanopticFrame {
        height,
        width,
        semantic,
        instance,
        frame_index,
    })
}

pub fn video_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

pub fn frame_paths(root: &Path, name: &str, t: usize) -> (PathBuf, PathBuf) {
    let d = video_dir(root, name);
    (d.join(format!("frame_{t:04}.img")), d.join(format!("frame_{t:04}.pan")))
}

/// Writes frames, panoptic maps and `meta.json`.
pub fn write_dataset(videos: &[VideoData], classes: &ClassTable, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for v in videos {
        fs::create_dir_all(video_dir(out_dir, &v.name))?;
        for (t, (img, pan)) in v.frames.iter().zip(&v.gt.frames).enumerate() {
            let (ip, pp) = frame_paths(out_dir, &v.name, t);
            write_image(&ip, img)?;
            write_panoptic(&pp, pan)?;
        }
        let (height, width) = v.frames.first().map_or((0, 0), |f| (f.height, f.width));
        entries.push(VideoEntry {
            name: v.name.clone(),
            num_frames: v.len(),
            height,
            width,
        });
    }
    let meta = DatasetMeta {
        version: META_VERSION,
        classes: classes.clone(),
        videos: entries,
    };
    fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = read_input_string(&path)?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| parse_err(&path, line_col_offset(&text, e.line(), e.column()), e.to_string()))?;
    if meta.version != META_VERSION {
        return Err(Error::Version {
            path,
            found: meta.version,
            expected: META_VERSION,
        });
    }
    Ok(meta)
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    text.split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + col.saturating_sub(1)
}

pub fn read_video(dir: &Path, entry: &VideoEntry, classes: &ClassTable) -> Result<VideoData> {
    let mut frames = Vec::with_capacity(entry.num_frames);
    let mut gt = Vec::with_capacity(entry.num_frames);
    for t in 0..entry.num_frames {
        let (ip, pp) = frame_paths(dir, &entry.name, t);
        let img = read_image(&ip)?;
        let pan = read_panoptic(&pp, t)?;
        if (img.height, img.width) != (pan.height, pan.width) || (img.height, img.width) != (entry.height, entry.width)
        {
            return Err(Error::Data(format!(
                "{}: frame {t} is {}x{} / {}x{}, meta says {}x{}",
                entry.name, img.height, img.width, pan.height, pan.width, entry.height, entry.width
            )));
        }
        frames.push(img);
        gt.push(pan);
    }
    let gt = VideoAnnotation {
        frames: gt,
        classes: classes.clone(),
    };
    gt.validate()?;
    Ok(VideoData {
        name: entry.name.clone(),
        frames,
        gt,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let videos = meta
        .videos
        .iter()
        .map(|e| read_video(dir, e, &meta.classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: meta.classes,
        videos,
    })
}
