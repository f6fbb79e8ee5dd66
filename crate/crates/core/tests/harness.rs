use vknet::error::Error;
use vknet::harness::{
    build_model, evaluate_model, load_checkpoint, load_data, score_predictions, train, write_run, RunConfig,
};
use vknet::model::ModelConfig;
use vknet::nn::{to_f64_vec, ParamStore};
use vknet::tracker::TrackedVideo;
use vknet::DType;

/// 32x32, four frames, narrow model: a step takes milliseconds.
fn tiny(steps: usize) -> RunConfig {
    let mut c = RunConfig::default()
        .with_overrides(&[
            "data.train_videos=2",
            "data.eval_videos=1",
            "data.num_frames=4",
            "data.frame_size=[32, 32]",
            "data.size_range=[5, 7]",
        ])
        .unwrap();
    c.model = ModelConfig {
        channels: 8,
        embed_dim: 8,
        ffn_hidden: 8,
        heads: 2,
        stages: 2,
        backbone_widths: [4, 8, 8, 8],
        ..ModelConfig::default()
    };
    c.optim.steps = steps;
    c
}

fn values(s: &ParamStore) -> Vec<(String, Vec<f64>)> {
    s.named()
        .iter()
        .map(|(n, v)| (n.clone(), to_f64_vec(v.as_tensor()).unwrap()))
        .collect()
}

#[test]
fn zero_steps_returns_the_initial_parameters() {
    let cfg = tiny(0);
    let data = load_data(&cfg).unwrap();
    let res = train(&cfg, &data.train, &data.classes, None).unwrap();
    let (init, _) = build_model(&cfg, &data.classes, DType::F32).unwrap();
    assert_eq!(values(&res.store), values(&init));
    assert!(res.log.is_empty());
    assert_eq!(res.manifest.final_losses, None);
}

#[test]
fn training_repeats_bit_for_bit() {
    let cfg = tiny(4);
    let data = load_data(&cfg).unwrap();
    let a = train(&cfg, &data.train, &data.classes, None).unwrap();
    let b = train(&cfg, &data.train, &data.classes, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(values(&a.store), values(&b.store));
    let mut other = cfg.clone();
    other.seed = 1;
    let c = train(&other, &data.train, &data.classes, None).unwrap();
    assert_ne!(values(&a.store), values(&c.store));
}

#[test]
fn huge_learning_rate_diverges_with_a_dump() {
    let mut cfg = tiny(20);
    cfg.optim.lr = 1e30;
    cfg.optim.grad_clip = 0.0;
    let data = load_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = match train(&cfg, &data.train, &data.classes, Some(dir.path())) {
        Err(e) => e,
        Ok(_) => panic!("training at lr 1e30 finished"),
    };
    assert_eq!(err.exit_code(), 4, "{err}");
    let Error::Divergence { step, .. } = err else {
        panic!("expected a divergence, got {err}");
    };
    assert!(step > 0);
    assert!(dir.path().join("divergence.ckpt").exists());
    assert!(dir.path().join("divergence_log.json").exists());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = tiny(3);
    let data = load_data(&cfg).unwrap();
    let res = train(&cfg, &data.train, &data.classes, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &res, &data.classes).unwrap();
    for f in ["model.ckpt", "manifest.json", "train_log.jsonl", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = load_checkpoint(&dir.path().join("model.ckpt"), DType::F32).unwrap();
    assert_eq!(back.header.config_hash, cfg.hash());
    assert_eq!(values(&back.store), values(&res.store));
    let a = evaluate_model(&res.model, &data.eval, &cfg.tracker, &cfg.metrics, true, None).unwrap();
    let b = evaluate_model(&back.model, &data.eval, &cfg.tracker, &cfg.metrics, true, None).unwrap();
    assert_eq!(a, b);
    let saved = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved.hash(), cfg.hash());
}

#[test]
fn ground_truth_scores_perfectly() {
    let cfg = tiny(0);
    let data = load_data(&cfg).unwrap();
    let preds: Vec<TrackedVideo> = data
        .eval
        .iter()
        .map(|v| TrackedVideo {
            frames: v.gt.frames.clone(),
            log: Vec::new(),
        })
        .collect();
    let r = score_predictions(&preds, &data.eval, &data.classes, &cfg.metrics).unwrap();
    assert_eq!((r.stq, r.aq, r.sq, r.pq, r.vpq), (1.0, 1.0, 1.0, 1.0, 1.0));
}

#[test]
fn parallel_and_sequential_evaluation_agree() {
    let mut cfg = tiny(2);
    cfg.data.eval_videos = 3;
    let data = load_data(&cfg).unwrap();
    let res = train(&cfg, &data.train, &data.classes, None).unwrap();
    let a = evaluate_model(&res.model, &data.eval, &cfg.tracker, &cfg.metrics, true, None).unwrap();
    let b = evaluate_model(&res.model, &data.eval, &cfg.tracker, &cfg.metrics, false, None).unwrap();
    assert_eq!(a, b);
}
