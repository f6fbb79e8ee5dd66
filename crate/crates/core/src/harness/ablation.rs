//! Named ablation matrices: each variant is a set of overrides on a base
//! config, trained and evaluated once per seed.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate_model;
use super::train::{load_data, train};
use crate::error::{Error, Result};
use crate::synth::ScenePreset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPreset {
    pub name: String,
    pub base: RunConfig,
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
}

pub const PRESET_NAMES: &[&str] = &["kae", "fusion_update", "link_stage", "joint_training", "sampling"];

fn variant(name: &str, overrides: &[&str]) -> AblationVariant {
    AblationVariant {
        name: name.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

/// Shared desk-scale base for ablations on a scene family.
pub fn ablation_base(scene: ScenePreset) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.preset = scene;
    c.data.train_videos = 24;
    c.data.eval_videos = 8;
    c.optim.lr = 1e-3;
    c.optim.steps = 250;
    c.optim.batch_pairs = 2;
    c.metrics.mvc_clips = vec![4, 8];
    c
}

impl AblationPreset {
    pub fn named(name: &str) -> Result<Self> {
        let (scene, variants) = match name {
            "kae" => (
                ScenePreset::FastMotion,
                vec![
                    variant("baseline", &["features.kae=false", "features.link=false"]),
                    variant("kae", &["features.kae=true", "features.link=false"]),
                    variant("kae+kl", &["features.kae=true", "features.link=true"]),
                ],
            ),
            "fusion_update" => (
                ScenePreset::Occlusion,
                vec![
                    variant("fuse w/o update", &["features.fuse=true", "features.fuse_update=false"]),
                    variant("fuse w/ update", &["features.fuse=true", "features.fuse_update=true"]),
                ],
            ),
            "link_stage" => (
                ScenePreset::FastMotion,
                vec![
                    variant("link@0", &["features.link_stage=0"]),
                    variant("link@1", &["features.link_stage=1"]),
                    variant("link@2", &["features.link_stage=2"]),
                ],
            ),
            "joint_training" => (
                ScenePreset::FastMotion,
                vec![
                    variant("key only", &["features.joint_training=false"]),
                    variant("key+ref", &["features.joint_training=true"]),
                ],
            ),
            "sampling" => (
                ScenePreset::FastMotion,
                vec![
                    variant("matched", &["features.dense_sampling=false"]),
                    variant("dense", &["features.dense_sampling=true"]),
                ],
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation preset '{name}' (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            base: ablation_base(scene),
            variants,
            seeds: (0..5).collect(),
        })
    }

    /// Config of one (variant, seed) cell. Training and held-out scenes
    /// depend on the seed only, so all variants of a seed see the same data.
    pub fn cell_config(&self, v: &AblationVariant, seed: u64) -> Result<RunConfig> {
        let mut c = self.base.with_overrides(&v.overrides)?;
        c.seed = seed;
        c.data.train_seed = seed * 1_000;
        c.data.eval_seed = 1_000_000 + seed * 1_000;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
    pub vpq: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub stq: f64,
    pub aq: f64,
    pub sq: f64,
    pub vpq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: String,
    pub cells: Vec<AblationCell>,
    /// Per-variant means over seeds, in variant order.
    pub means: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn mean(&self, variant: &str) -> Option<&AblationSummary> {
        self.means.iter().find(|m| m.variant == variant)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("ablation `{}` (mean over {} seeds)\n\n", self.preset, self.seeds());
        s.push_str("| variant | STQ | AQ | SQ | VPQ |\n|---|---|---|---|---|\n");
        for m in &self.means {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                m.variant, m.stq, m.aq, m.sq, m.vpq
            );
        }
        s
    }

    fn seeds(&self) -> usize {
        let mut v: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        v.sort();
        v.dedup();
        v.len()
    }
}

/// Trains and evaluates every (variant, seed) cell.
pub fn run_ablation(p: &AblationPreset) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for &seed in &p.seeds {
        let data = load_data(&p.cell_config(&p.variants[0], seed)?)?;
        for v in &p.variants {
            let cfg = p.cell_config(v, seed)?;
            let res = train(&cfg, &data.train, &data.classes, None)?;
            let r = evaluate_model(
                &res.model,
                &data.eval,
                &cfg.tracker,
                &cfg.metrics,
                cfg.deterministic,
                Some(cfg.hash()),
            )?;
            info!(
                "{} seed {seed} {}: stq {:.4} aq {:.4} sq {:.4}",
                p.name, v.name, r.stq, r.aq, r.sq
            );
            cells.push(AblationCell {
                variant: v.name.clone(),
                seed,
                config_hash: cfg.hash(),
                stq: r.stq,
                aq: r.aq,
                sq: r.sq,
                vpq: r.vpq,
                final_loss: res.log.last().map_or(f64::NAN, |l| l.losses.total),
            });
        }
    }
    let means = p
        .variants
        .iter()
        .map(|v| {
            let cs: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == v.name).collect();
            let n = cs.len() as f64;
            let avg = |f: fn(&AblationCell) -> f64| cs.iter().map(|c| f(c)).sum::<f64>() / n;
            AblationSummary {
                variant: v.name.clone(),
                stq: avg(|c| c.stq),
                aq: avg(|c| c.aq),
                sq: avg(|c| c.sq),
                vpq: avg(|c| c.vpq),
            }
        })
        .collect();
    Ok(AblationTable {
        preset: p.name.clone(),
        cells,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_builds_valid_cells() {
        for name in PRESET_NAMES {
            let p = AblationPreset::named(name).unwrap();
            for v in &p.variants {
                p.cell_config(v, 3).unwrap();
            }
        }
        assert!(AblationPreset::named("nope").is_err());
    }
}
