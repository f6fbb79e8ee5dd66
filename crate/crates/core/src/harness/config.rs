//! Run configuration: one nested TOML file, `key.path=value` overrides and a
//! content hash stamped into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::synth::{ScenePreset, SceneSpec};
use crate::tracker::TrackerConfig;
use crate::video::FeatureFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scene family used when no dataset directory is given.
    pub preset: ScenePreset,
    pub train_videos: usize,
    pub train_seed: u64,
    pub eval_videos: usize,
    /// Scenes with seeds from here on are held out from training.
    pub eval_seed: u64,
    /// Frames per generated video; `None` keeps the preset default.
    pub num_frames: Option<usize>,
    /// Frame size override `(height, width)`.
    pub frame_size: Option<(usize, usize)>,
    /// Thing half-size range override in pixels.
    pub size_range: Option<(u32, u32)>,
    /// Read training data from disk instead of generating it.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: ScenePreset::Overfit,
            train_videos: 8,
            train_seed: 0,
            eval_videos: 4,
            eval_seed: 10_000,
            num_frames: None,
            frame_size: None,
            size_range: None,
            train_dir: None,
            eval_dir: None,
        }
    }
}

impl DataConfig {
    fn specs(&self, count: usize, base: u64) -> Vec<SceneSpec> {
        self.preset
            .specs(count, base)
            .into_iter()
            .map(|s| SceneSpec {
                num_frames: self.num_frames.unwrap_or(s.num_frames),
                height: self.frame_size.map_or(s.height, |f| f.0),
                width: self.frame_size.map_or(s.width, |f| f.1),
                size_range: self.size_range.unwrap_or(s.size_range),
                ..s
            })
            .collect()
    }

    pub fn train_specs(&self) -> Vec<SceneSpec> {
        self.specs(self.train_videos, self.train_seed)
    }

    pub fn eval_specs(&self) -> Vec<SceneSpec> {
        self.specs(self.eval_videos, self.eval_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// (key, reference) pairs per step.
    pub batch_pairs: usize,
    /// Reference frames are drawn within this many frames of the key.
    pub ref_window: usize,
    /// Reference frames per key frame.
    pub ref_count: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Frames per training clip in clip mode.
    pub clip_len: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 300,
            batch_pairs: 2,
            ref_window: 2,
            ref_count: 1,
            grad_clip: 1.0,
            clip_len: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Sequential evaluation; the model itself runs single-threaded.
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub features: FeatureFlags,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub optim: OptimConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            features: FeatureFlags::default(),
            loss: LossConfig::default(),
            tracker: TrackerConfig::default(),
            optim: OptimConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(Error::Config(
                "optim: lr must be positive, weight_decay and grad_clip non-negative".into(),
            ));
        }
        if o.batch_pairs == 0 || o.ref_count == 0 || o.clip_len == 0 {
            return Err(Error::Config(
                "optim: batch_pairs, ref_count and clip_len must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tracker.momentum) {
            return Err(Error::Config("tracker.momentum must lie in [0, 1]".into()));
        }
        if self.loss.alpha2 > self.loss.alpha1 {
            return Err(Error::Config("loss.alpha2 must not exceed loss.alpha1".into()));
        }
        if let Some(s) = self.features.link_stage {
            if s >= self.model.stages {
                return Err(Error::Config(format!(
                    "features.link_stage {s} but model.stages = {}",
                    self.model.stages
                )));
            }
        }
        Ok(())
    }

    /// Applies `a.b.c=value` assignments. Values parse as TOML and fall back
    /// to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(config_err)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Short form of [`RunConfig::hash`] used in artifact names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

/// Root directory for run outputs: `VKNET_OUTPUT_ROOT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("VKNET_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml_str("[optim]\nlearning_rate = 1.0"),
            Err(Error::Config(_))
        ));
        let e = RunConfig::default().with_overrides(&["optim.lrr=0.1"]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_and_change_the_hash() {
        let c = RunConfig::default();
        let o = c
            .with_overrides(&[
                "optim.lr=0.001",
                "features.kae=false",
                "data.preset=fast_motion",
                "features.link_stage=1",
            ])
            .unwrap();
        assert_eq!(o.optim.lr, 0.001);
        assert!(!o.features.kae);
        assert_eq!(o.data.preset, ScenePreset::FastMotion);
        assert_eq!(o.features.link_stage, Some(1));
        assert_ne!(o.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[model]\nchannels = 16\nembed_dim = 8\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.channels, 16);
        assert_eq!(c.model.stages, 3);
    }
}
