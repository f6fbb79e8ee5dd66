//! `vknet` command line front end.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 divergence,
//! 1 anything else. `VKNET_OUTPUT_ROOT` replaces the default `./runs`
//! output root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use vknet::harness::{
    evaluate_model, load_checkpoint, load_data, output_root, predict_videos, read_predicted_video,
    read_prediction_meta, render_video, run_ablation, train, write_predictions, write_run, AblationPreset, RunConfig,
};
use vknet::metrics::MetricEvaluator;
use vknet::panoptic::ClassTable;
use vknet::synth::{generate_dataset, read_dataset, write_dataset, ScenePreset, VideoData};
use vknet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vknet",
    version,
    about = "Desk-scale video kernel network: data, training, tracking and metrics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_on(&RunConfig::default())
    }

    /// Like [`ConfigArgs::resolve`], but `--set` alone overrides `base`.
    fn resolve_on(&self, base: &RunConfig) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p)?.with_overrides(&self.overrides),
            None => base.with_overrides(&self.overrides),
        }
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Scene family: overfit, fast_motion, occlusion or static.
        #[arg(long, default_value = "overfit")]
        preset: String,
        /// Number of videos.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Seed of the first video; video i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory [default: <root>/data/<preset>-<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt, manifest.json, train_log.jsonl and config.toml.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory [default: <root>/train-<config hash>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset, or a prediction directory against ground truth.
    Evaluate {
        /// Checkpoint to run.
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory [default: the held-out set of the checkpoint config].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction directory written by `track`.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Ground-truth dataset directory for `--pred`.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Config whose hash must match the artifact's. Without `--config`,
        /// `--set` keys apply to the checkpoint's own config; tracker and
        /// metric keys take effect.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate even if config hashes differ.
        #[arg(long)]
        force: bool,
        /// Report path [default: <root>/eval-<config hash>.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track every video of a dataset and write id maps plus track logs.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: the held-out set of the checkpoint config].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <root>/track-<config hash>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PPM overlays with one colour per track id.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only this video [default: all].
        #[arg(long)]
        video: Option<String>,
        /// Output directory [default: <root>/render-<config hash>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named ablation matrix and print a comparison table.
    Ablate {
        /// kae, fusion_update, link_stage, joint_training or sampling.
        #[arg(long)]
        preset: String,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Override a base config key. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory [default: <root>/ablate-<preset>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Videos from `dir`, or else the config's held-out set (its `eval_dir`, or
/// the videos it would generate).
fn dataset_or_eval(dir: Option<&Path>, cfg: &RunConfig, classes: &ClassTable) -> Result<Vec<VideoData>> {
    match dir.or(cfg.data.eval_dir.as_deref()) {
        Some(d) => {
            let ds = read_dataset(d)?;
            if &ds.classes != classes {
                return Err(Error::Data(format!(
                    "{}: class table differs from the checkpoint's",
                    d.display()
                )));
            }
            Ok(ds.videos)
        }
        None => generate_dataset(&cfg.data.eval_specs()),
    }
}

fn check_hash(found: &str, expected: &RunConfig, force: bool) -> Result<()> {
    let expected = expected.hash();
    if expected == found {
        return Ok(());
    }
    if force {
        warn!("config hash {expected} differs from artifact hash {found}; continuing (--force)");
        Ok(())
    } else {
        Err(Error::Config(format!(
            "config hash {expected} differs from artifact hash {found}; pass --force to evaluate anyway"
        )))
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            preset,
            count,
            seed,
            out,
        } => {
            let p = ScenePreset::parse(&preset)?;
            let out = out.unwrap_or_else(|| output_root().join("data").join(format!("{}-{seed}", p.name())));
            let videos = generate_dataset(&p.specs(count, seed))?;
            write_dataset(&videos, &ClassTable::synthetic(), &out)?;
            info!("wrote {count} videos to {}", out.display());
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| output_root().join(format!("train-{}", cfg.short_hash())));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            info!("effective config:\n{}", cfg.to_toml()?);
            let data = load_data(&cfg)?;
            let res = train(&cfg, &data.train, &data.classes, Some(&out))?;
            write_run(&out, &res, &data.classes)?;
            info!("wrote {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            pred,
            gt,
            cfg,
            force,
            out,
        } => {
            let report = if let Some(pred) = pred {
                let gt_dir = gt.ok_or_else(|| Error::Config("--pred needs --gt".into()))?;
                let meta = read_prediction_meta(&pred)?;
                let run_cfg = cfg.resolve()?;
                if cfg.given() {
                    check_hash(&meta.config_hash, &run_cfg, force)?;
                }
                let gt = read_dataset(&gt_dir)?;
                let metrics = run_cfg.metrics;
                let mut ev = MetricEvaluator::new(gt.classes.clone(), metrics);
                for v in &gt.videos {
                    let entry = meta
                        .videos
                        .iter()
                        .find(|e| e.name == v.name)
                        .ok_or_else(|| Error::Data(format!("no prediction for video {}", v.name)))?;
                    ev.add_video(&read_predicted_video(&pred, entry, &gt.classes)?, &v.gt)?;
                }
                let mut r = ev.report();
                r.config_hash = Some(meta.config_hash);
                r
            } else {
                let ck = checkpoint.ok_or_else(|| Error::Config("evaluate needs --checkpoint or --pred".into()))?;
                let loaded = load_checkpoint(&ck, candle_dtype())?;
                let run_cfg = cfg.resolve_on(&loaded.header.config)?;
                check_hash(&loaded.header.config_hash, &run_cfg, force)?;
                let videos = dataset_or_eval(data.as_deref(), &loaded.header.config, &loaded.header.classes)?;
                evaluate_model(
                    &loaded.model,
                    &videos,
                    &run_cfg.tracker,
                    &run_cfg.metrics,
                    run_cfg.deterministic,
                    Some(loaded.header.config_hash.clone()),
                )?
            };
            let hash = report.config_hash.clone().unwrap_or_default();
            let out = out.unwrap_or_else(|| output_root().join(format!("eval-{}.json", &hash[..hash.len().min(12)])));
            report.write(&out)?;
            println!(
                "PQ {:.4}  VPQ {:.4}  STQ {:.4}  AQ {:.4}  SQ {:.4}  mIoU {:.4}",
                report.pq, report.vpq, report.stq, report.aq, report.sq, report.miou
            );
            info!("wrote {}", out.display());
        }
        Command::Track { checkpoint, data, out } => {
            let loaded = load_checkpoint(&checkpoint, candle_dtype())?;
            let cfg = &loaded.header.config;
            let videos = dataset_or_eval(data.as_deref(), cfg, &loaded.header.classes)?;
            let preds = predict_videos(&loaded.model, &videos, &cfg.tracker, cfg.deterministic)?;
            let out = out.unwrap_or_else(|| output_root().join(format!("track-{}", cfg.short_hash())));
            write_predictions(&out, &videos, &preds, &loaded.header.config_hash)?;
            info!("wrote {} tracked videos to {}", preds.len(), out.display());
        }
        Command::Render {
            checkpoint,
            data,
            video,
            out,
        } => {
            let loaded = load_checkpoint(&checkpoint, candle_dtype())?;
            let cfg = &loaded.header.config;
            let mut videos = dataset_or_eval(data.as_deref(), cfg, &loaded.header.classes)?;
            if let Some(name) = &video {
                videos.retain(|v| &v.name == name);
                if videos.is_empty() {
                    return Err(Error::Data(format!("no video named {name}")));
                }
            }
            let preds = predict_videos(&loaded.model, &videos, &cfg.tracker, cfg.deterministic)?;
            let out = out.unwrap_or_else(|| output_root().join(format!("render-{}", cfg.short_hash())));
            for (v, p) in videos.iter().zip(&preds) {
                render_video(
                    &out.join(&v.name),
                    &v.frames,
                    p,
                    &loaded.header.classes,
                    &loaded.header.config_hash,
                )?;
            }
            info!("wrote overlays to {}", out.display());
        }
        Command::Ablate {
            preset,
            seeds,
            overrides,
            out,
        } => {
            let mut p = AblationPreset::named(&preset)?;
            p.base = p.base.with_overrides(&overrides)?;
            p.seeds = (0..seeds).collect();
            let table = run_ablation(&p)?;
            let out = out.unwrap_or_else(|| output_root().join(format!("ablate-{preset}")));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("table.json"), serde_json::to_string_pretty(&table)?)?;
            std::fs::write(out.join("table.md"), table.to_markdown())?;
            println!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn candle_dtype() -> vknet::DType {
    vknet::DType::F32
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_parse() {
        let cli = Cli::try_parse_from(["vknet", "train", "--set", "optim.steps=3", "--set", "seed=2"]).unwrap();
        let Command::Train { cfg, .. } = cli.cmd else { panic!() };
        let c = cfg.resolve().unwrap();
        assert_eq!(c.optim.steps, 3);
        assert_eq!(c.seed, 2);
    }
}
