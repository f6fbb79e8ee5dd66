//! Central-difference gradient checks in f64 for every learned block and
//! every loss, at widths of at most 8. Each check returns the worst relative
//! error and where it occurred.

use std::collections::BTreeSet;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vknet::heads::{ClipFuser, EmbedHead, FusionOptions, KernelFuser, KernelLinker};
use vknet::losses::{
    ce_mask_loss, dice_loss, focal_loss, track_aux_loss, track_contrastive_loss, FocalParams, FrameTargets, LossConfig,
    TrackPairLabels,
};
use vknet::model::{AdaptiveKernelUpdate, KernelInteraction, KernelRole, KernelSet, ModelConfig};
use vknet::nn::{to_f64_vec, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use vknet::panoptic::ClassTable;
use vknet::synth::{generate_video, SceneSpec};
use vknet::video::{FeatureFlags, VideoKNet};

const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Entries probed per variable; smaller variables are probed fully.
const PROBES: usize = 12;

/// Gradients below this are compared absolutely: some entries (key biases
/// under softmax) have an exact zero gradient and only rounding noise left.
const FLOOR: f64 = 1e-5;

pub type Worst = (f64, String);

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn scalar(t: &Tensor) -> f64 {
    to_f64_vec(t).unwrap()[0]
}

fn probe_indices(n: usize) -> Vec<usize> {
    if n <= PROBES {
        (0..n).collect()
    } else {
        (0..PROBES).map(|i| i * (n - 1) / (PROBES - 1)).collect()
    }
}

/// Largest relative error between backprop and central differences over
/// the probed entries of `vars`.
fn check_vars(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor) -> Worst {
    let grads = loss().backward().unwrap();
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let base = to_f64_vec(var.as_tensor()).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g).unwrap(),
            None => vec![0.0; base.len()],
        };
        for i in probe_indices(base.len()) {
            let mut v = base.clone();
            let set = |v: &[f64]| {
                var.set(&Tensor::from_slice(v, var.dims(), &Device::Cpu).unwrap())
                    .unwrap();
            };
            v[i] = base[i] + EPS;
            set(&v);
            let lp = scalar(&loss());
            v[i] = base[i] - EPS;
            set(&v);
            let lm = scalar(&loss());
            set(&base);
            let e = rel_err(analytic[i], (lp - lm) / (2.0 * EPS));
            if e > worst.0 {
                worst = (
                    e,
                    format!(
                        "{name}[{i}]: backprop {} numeric {}",
                        analytic[i],
                        (lp - lm) / (2.0 * EPS)
                    ),
                );
            }
        }
    }
    worst
}

fn check_store(store: &ParamStore, loss: &dyn Fn() -> Tensor) -> Worst {
    check_vars(store.named(), loss)
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Weighted sum with fixed random weights, so every output entry matters.
fn probe_sum(t: &Tensor, seed: u64) -> Tensor {
    let w = random(t.dims(), seed, 1.0);
    (t * w).unwrap().sum_all().unwrap()
}

fn store() -> ParamStore {
    ParamStore::new(DType::F64, 11)
}

fn kernel_set(x: Tensor, things: usize) -> KernelSet {
    let n = x.dims2().unwrap().0;
    let mut roles = vec![KernelRole::Thing; things];
    roles.extend((0..n - things).map(|i| KernelRole::Stuff(i as u16)));
    KernelSet::new(x, Arc::new(roles)).unwrap()
}

pub fn linear_conv_and_norm() -> Worst {
    let mut s = store();
    let (lin, conv, ln) = {
        let mut root = s.root();
        (
            Linear::new(&mut root.pp("lin"), 6, 5).unwrap(),
            Conv2d::new(&mut root.pp("conv"), 3, 4, 3, 2).unwrap(),
            LayerNorm::new(&mut root.pp("ln"), 5).unwrap(),
        )
    };
    let x = random(&[4, 6], 1, 1.0);
    let img = random(&[1, 3, 8, 8], 2, 1.0);
    check_store(&s, &|| {
        let y = ln.forward(&lin.forward(&x).unwrap()).unwrap();
        let z = conv.forward(&img).unwrap();
        (probe_sum(&y, 3) + probe_sum(&z, 4)).unwrap()
    })
}

pub fn attention_and_feed_forward() -> Worst {
    let mut s = store();
    let (mha, ffn) = {
        let mut root = s.root();
        (
            MultiHeadAttention::new(&mut root.pp("mha"), 8, 2).unwrap(),
            FeedForward::new(&mut root.pp("ffn"), 8, 8).unwrap(),
        )
    };
    let q = random(&[3, 8], 5, 1.0);
    let m = random(&[5, 8], 6, 1.0);
    check_store(&s, &|| {
        probe_sum(&ffn.forward(&mha.forward(&q, &m, None).unwrap()).unwrap(), 7)
    })
}

pub fn adaptive_update_and_interaction() -> Worst {
    let mut s = store();
    let (upd, inter) = {
        let mut root = s.root();
        (
            AdaptiveKernelUpdate::new(&mut root.pp("upd"), 8).unwrap(),
            KernelInteraction::new(&mut root.pp("inter"), 8, 2, 8).unwrap(),
        )
    };
    let k = kernel_set(random(&[5, 8], 8, 1.0), 3);
    let f = random(&[5, 8], 9, 1.0);
    check_store(&s, &|| {
        let k = upd.forward(&k, &f).unwrap();
        probe_sum(&inter.forward(&k).unwrap().kernels, 10)
    })
}

pub fn embedding_head_and_linker() -> Worst {
    let mut s = store();
    let (emb, link) = {
        let mut root = s.root();
        (
            EmbedHead::new(&mut root.pp("emb"), 8, 6).unwrap(),
            KernelLinker::new(&mut root.pp("link"), 8, 2, 8).unwrap(),
        )
    };
    let key = random(&[3, 8], 11, 1.0);
    let reference = random(&[3, 8], 12, 1.0);
    let valid = [true, false, true];
    check_store(&s, &|| {
        let l = link.link(&key, &reference, Some(&valid)).unwrap();
        probe_sum(&emb.forward(&l).unwrap(), 13)
    })
}

pub fn kernel_fuser_with_and_without_update() -> Worst {
    let mut s = store();
    let fuser = KernelFuser::new(&mut s.root().pp("fuse"), 8, 2, 8).unwrap();
    let feat = vknet::model::FeatureMap {
        values: random(&[8, 4, 4], 14, 1.0),
        stride: 4,
        has_pos_enc: true,
    };
    let prev = kernel_set(random(&[5, 8], 15, 1.0), 3);
    let cur = kernel_set(random(&[5, 8], 16, 1.0), 3);
    let masks = random(&[5, 4, 4], 17, 2.0);
    let mut worst = (0.0, String::new());
    for update in [false, true] {
        let opts = FusionOptions {
            update,
            mask_previous: false,
        };
        let w = check_store(&s, &|| {
            probe_sum(
                &fuser.fuse_kernels(&prev, &feat, &masks, &cur, opts).unwrap().kernels,
                18,
            )
        });
        if w.0 >= worst.0 {
            worst = w;
        }
    }
    worst
}

pub fn clip_fuser() -> Worst {
    let mut s = store();
    let clip = ClipFuser::new(&mut s.root().pp("clip"), 8, 2, 8).unwrap();
    let frames = vec![
        random(&[4, 8], 19, 1.0),
        random(&[4, 8], 20, 1.0),
        random(&[4, 8], 21, 1.0),
    ];
    check_store(&s, &|| {
        let (mean, per) = clip.fuse(&frames).unwrap();
        (probe_sum(&mean, 22) + probe_sum(&per[1], 23)).unwrap()
    })
}

pub fn losses_wrt_inputs() -> Worst {
    let logits = Var::from_tensor(&random(&[4, 3], 24, 2.0)).unwrap();
    let masks = Var::from_tensor(&random(&[3, 10], 25, 2.0)).unwrap();
    let gt = Tensor::from_vec(
        (0..30).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect::<Vec<_>>(),
        (3, 10),
        &Device::Cpu,
    )
    .unwrap();
    let ek = Var::from_tensor(&random(&[4, 6], 26, 1.0)).unwrap();
    let er = Var::from_tensor(&random(&[4, 6], 27, 1.0)).unwrap();
    let labels = TrackPairLabels {
        positives: BTreeSet::from([(0, 1), (2, 3)]),
        negatives: BTreeSet::from([(0, 0), (0, 3), (2, 0), (2, 1)]),
        key_samples: vec![0, 2],
        ref_samples: vec![0, 1, 3],
    };
    let vars = vec![
        ("logits".to_string(), logits.clone()),
        ("masks".to_string(), masks.clone()),
        ("emb_key".to_string(), ek.clone()),
        ("emb_ref".to_string(), er.clone()),
    ];
    let targets = [Some(1), None, Some(0), None];
    let loss = || {
        let f = focal_loss(logits.as_tensor(), &targets, FocalParams::default()).unwrap();
        let ce = ce_mask_loss(masks.as_tensor(), &gt).unwrap();
        let dice = dice_loss(masks.as_tensor(), &gt, 1.0).unwrap();
        let (t, _) = track_contrastive_loss(ek.as_tensor(), er.as_tensor(), &labels).unwrap();
        let (a, _) = track_aux_loss(ek.as_tensor(), er.as_tensor(), &labels).unwrap();
        [f, ce, dice, t, a]
            .iter()
            .fold(Tensor::new(0f64, &Device::Cpu).unwrap(), |acc, x| (acc + x).unwrap())
    };
    check_vars(&vars, &loss)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_thing_kernels: 3,
        channels: 8,
        embed_dim: 8,
        stages: 2,
        heads: 2,
        ffn_hidden: 8,
        backbone_widths: [4, 4, 8, 8],
        ..ModelConfig::default()
    }
}

fn tiny_video() -> vknet::synth::VideoData {
    generate_video(&SceneSpec {
        seed: 3,
        num_frames: 3,
        height: 32,
        width: 32,
        num_things: 2,
        size_range: (4, 6),
        ..SceneSpec::default()
    })
    .unwrap()
}

fn full_model(flags: FeatureFlags) -> (ParamStore, VideoKNet, ClassTable) {
    let classes = ClassTable::synthetic();
    let mut s = store();
    let m = VideoKNet::new(&mut s, &tiny_config(), &classes, flags).unwrap();
    (s, m, classes)
}

pub fn full_pair_loss_all_features() -> Worst {
    let (s, m, classes) = full_model(FeatureFlags::default());
    let v = tiny_video();
    let t: Vec<FrameTargets> =
        v.gt.frames
            .iter()
            .map(|f| FrameTargets::from_frame(f, &classes, DType::F64, &Device::Cpu).unwrap())
            .collect();
    let cfg = LossConfig::default();
    check_store(&s, &|| {
        m.pair_loss(&v.frames[1], &v.frames[0], &t[1], &t[0], &cfg)
            .unwrap()
            .0
            .total
    })
}

pub fn full_clip_loss() -> Worst {
    let flags = FeatureFlags {
        clip_mode: true,
        ..FeatureFlags::default()
    };
    let (s, m, classes) = full_model(flags);
    let v = tiny_video();
    let t: Vec<FrameTargets> =
        v.gt.frames
            .iter()
            .map(|f| FrameTargets::from_frame(f, &classes, DType::F64, &Device::Cpu).unwrap())
            .collect();
    let imgs: Vec<_> = v.frames.iter().collect();
    let cfg = LossConfig::default();
    check_store(&s, &|| m.clip_loss(&imgs, &t, &cfg).unwrap().total)
}

/// Every check, by name.
pub const CHECKS: &[(&str, fn() -> Worst)] = &[
    ("linear, conv and layer norm", linear_conv_and_norm),
    ("attention and feed-forward", attention_and_feed_forward),
    (
        "adaptive update and kernel interaction",
        adaptive_update_and_interaction,
    ),
    ("embedding head and kernel linker", embedding_head_and_linker),
    ("kernel fuser", kernel_fuser_with_and_without_update),
    ("clip fuser", clip_fuser),
    ("losses", losses_wrt_inputs),
    ("full pair loss", full_pair_loss_all_features),
    ("full clip loss", full_clip_loss),
];
