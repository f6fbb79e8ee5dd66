//! Training loop over (key, reference) pairs or clips.

use std::path::Path;
use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{build_model, save_checkpoint};
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{FrameTargets, LossBundle};
use crate::nn::{to_f64_vec, ParamStore};
use crate::panoptic::ClassTable;
use crate::synth::{generate_dataset, read_dataset, sample_reference_frame, VideoData};
use crate::video::VideoKNet;

/// Per-step record; loss terms are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossBundle,
    pub grad_norm: f64,
    /// Pairs with no positive track pair.
    pub no_positive_pairs: usize,
    pub zero_norm_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub num_parameters: usize,
    pub optimizer: String,
    pub first_losses: Option<LossBundle>,
    pub final_losses: Option<LossBundle>,
    pub wall_time_secs: f64,
}

pub struct TrainResult {
    pub store: ParamStore,
    pub model: VideoKNet,
    pub log: Vec<StepLog>,
    pub manifest: Manifest,
}

/// Training and held-out videos for a config.
pub struct RunData {
    pub classes: ClassTable,
    pub train: Vec<VideoData>,
    pub eval: Vec<VideoData>,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let (classes, train) = match &cfg.data.train_dir {
        Some(d) => {
            let ds = read_dataset(d)?;
            (ds.classes, ds.videos)
        }
        None => (ClassTable::synthetic(), generate_dataset(&cfg.data.train_specs())?),
    };
    let eval = match &cfg.data.eval_dir {
        Some(d) => {
            let ds = read_dataset(d)?;
            if ds.classes != classes {
                return Err(Error::Data("evaluation and training class tables differ".into()));
            }
            ds.videos
        }
        None => generate_dataset(&cfg.data.eval_specs())?,
    };
    Ok(RunData { classes, train, eval })
}

fn frame_targets(videos: &[VideoData], classes: &ClassTable, dtype: DType) -> Result<Vec<Vec<FrameTargets>>> {
    videos
        .iter()
        .map(|v| {
            v.gt.frames
                .iter()
                .map(|f| FrameTargets::from_frame(f, classes, dtype, &candle_core::Device::Cpu))
                .collect()
        })
        .collect()
}

fn clip_gradients(store: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in store.vars() {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for v in store.vars() {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * s)?);
            }
        }
    }
    Ok(norm)
}

fn mean_bundle(b: &[LossBundle]) -> LossBundle {
    let n = b.len() as f64;
    let avg = |f: fn(&LossBundle) -> f64| b.iter().map(f).sum::<f64>() / n;
    LossBundle::from_terms(
        [
            avg(|x| x.l_cls),
            avg(|x| x.l_ce),
            avg(|x| x.l_dice),
            avg(|x| x.l_track),
            avg(|x| x.l_aux),
        ],
        b[0].weights,
    )
}

/// Trains a fresh model on `videos`. On a non-finite loss the parameters
/// and step log are written to `dump_dir` (when given) before failing.
pub fn train(
    cfg: &RunConfig,
    videos: &[VideoData],
    classes: &ClassTable,
    dump_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if videos.is_empty() && cfg.optim.steps > 0 {
        return Err(Error::Data("no training videos".into()));
    }
    let start = Instant::now();
    let (store, model) = build_model(cfg, classes, DType::F32)?;
    let targets = frame_targets(videos, classes, DType::F32)?;
    let o = &cfg.optim;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: o.lr,
            weight_decay: o.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let mut log = Vec::with_capacity(o.steps);
    let dump = |step: usize, log: &[StepLog], detail: String| -> Error {
        if let Some(dir) = dump_dir {
            let saved = std::fs::create_dir_all(dir)
                .map_err(Error::from)
                .and_then(|_| save_checkpoint(&dir.join("divergence.ckpt"), &store, cfg, classes, step))
                .and_then(|_| {
                    Ok(std::fs::write(
                        dir.join("divergence_log.json"),
                        serde_json::to_string_pretty(log)?,
                    )?)
                });
            if let Err(e) = saved {
                return e;
            }
        }
        Error::Divergence { step, detail }
    };
    for step in 0..o.steps {
        let mut totals: Vec<Tensor> = Vec::new();
        let mut bundles = Vec::new();
        let (mut no_pos, mut zero_norm) = (0, 0);
        let mut batch = || -> Result<()> {
            for _ in 0..o.batch_pairs {
                let vi = rng.random_range(0..videos.len());
                let v = &videos[vi];
                let len = v.len();
                if cfg.features.clip_mode {
                    let t = o.clip_len.min(len);
                    let s = rng.random_range(0..=len - t);
                    let imgs: Vec<_> = v.frames[s..s + t].iter().collect();
                    let l = model.clip_loss(&imgs, &targets[vi][s..s + t], &cfg.loss)?;
                    totals.push(l.total);
                    bundles.push(l.bundle);
                    continue;
                }
                let key = rng.random_range(0..len);
                for _ in 0..o.ref_count {
                    let r = sample_reference_frame(len, key, o.ref_window, &mut rng).index;
                    let (l, stats) = model.pair_loss(
                        &v.frames[key],
                        &v.frames[r],
                        &targets[vi][key],
                        &targets[vi][r],
                        &cfg.loss,
                    )?;
                    no_pos += stats.no_positives as usize;
                    zero_norm += stats.zero_norm_pairs;
                    totals.push(l.total);
                    bundles.push(l.bundle);
                }
            }
            Ok(())
        };
        match batch() {
            Err(Error::NonFinite(what)) => return Err(dump(step, &log, format!("non-finite {what}"))),
            r => r?,
        }
        let n = totals.len() as f64;
        let loss = (Tensor::stack(&totals, 0)?.sum(0)? / n)?;
        let bundle = mean_bundle(&bundles);
        let value = to_f64_vec(&loss)?[0];
        if !value.is_finite() {
            return Err(dump(step, &log, format!("total loss {value} (terms {bundle:?})")));
        }
        let mut grads = loss.backward()?;
        let grad_norm = clip_gradients(&store, &mut grads, o.grad_clip)?;
        opt.step(&grads)?;
        debug!(
            "step {step}: total {:.4} cls {:.4} ce {:.4} dice {:.4} track {:.4} aux {:.4} |g| {grad_norm:.3}",
            bundle.total, bundle.l_cls, bundle.l_ce, bundle.l_dice, bundle.l_track, bundle.l_aux
        );
        if step % 50 == 0 || step + 1 == o.steps {
            info!("step {step}/{}: loss {:.4}", o.steps, bundle.total);
        }
        log.push(StepLog {
            step,
            losses: bundle,
            grad_norm,
            no_positive_pairs: no_pos,
            zero_norm_pairs: zero_norm,
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        steps: o.steps,
        num_parameters: store.num_scalars(),
        optimizer: format!(
            "AdamW(lr={}, weight_decay={}, betas=(0.9, 0.999), constant schedule, grad_clip={})",
            o.lr, o.weight_decay, o.grad_clip
        ),
        first_losses: log.first().map(|l| l.losses),
        final_losses: log.last().map(|l| l.losses),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainResult {
        store,
        model,
        log,
        manifest,
    })
}

/// Writes `model.ckpt`, `manifest.json` and `train_log.jsonl` into `dir`.
pub fn write_run(dir: &Path, res: &TrainResult, classes: &ClassTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(
        &dir.join("model.ckpt"),
        &res.store,
        &res.manifest.config,
        classes,
        res.manifest.steps,
    )?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&res.manifest)?)?;
    let mut s = String::new();
    for l in &res.log {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    std::fs::write(dir.join("train_log.jsonl"), s)?;
    std::fs::write(dir.join("config.toml"), res.manifest.config.to_toml()?)?;
    Ok(())
}
