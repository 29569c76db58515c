use std::path::Path;

use guef_core::harness::formats::read_checkpoint;
use guef_core::harness::pipeline::{evaluate, infer, predict_video, InferSettings};
use guef_core::harness::synth::{generate, synthesize, SynthVideo};
use guef_core::harness::train::{train, TrainSinks, FINAL_CHECKPOINT};
use guef_core::harness::{LoadedVideo, Manifest, RunConfig};
use guef_core::model::ModelParams;
use guef_core::reference::brute_mean_ap;

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.feature_dim = 6;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.iterations = 6;
    cfg.batch_size = 3;
    cfg.learning_rate = 1e-3;
    cfg.synth.train_videos = 6;
    cfg.synth.test_videos = 3;
    cfg.synth.snippets = 32;
    cfg
}

fn loaded(videos: &[SynthVideo]) -> Vec<LoadedVideo> {
    videos
        .iter()
        .map(|v| LoadedVideo {
            id: v.id.clone(),
            flow: v.flow.clone(),
            rgb: v.rgb.clone(),
            labels: v.labels.clone(),
        })
        .collect()
}

fn run(cfg: &RunConfig, videos: &[LoadedVideo]) -> (String, ModelParams) {
    let mut log = Vec::new();
    let out = train(cfg, videos, TrainSinks { log: &mut log, checkpoint_dir: None }).unwrap();
    (String::from_utf8(log).unwrap(), out.params)
}

#[test]
fn training_is_reproducible() {
    let cfg = small(3);
    let videos = loaded(&generate(&cfg).unwrap().train);
    let (log_a, params_a) = run(&cfg, &videos);
    let (log_b, params_b) = run(&cfg, &videos);
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
    assert_eq!(log_a.lines().count(), 6);
    assert!(log_a.starts_with("iter=1 cla="));
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let mut cfg = small(4);
    cfg.iterations = 0;
    let videos = loaded(&generate(&cfg).unwrap().train);
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    train(&cfg, &videos, TrainSinks { log: &mut log, checkpoint_dir: Some(dir.path()) }).unwrap();
    assert!(log.is_empty());
    let saved = read_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let init = ModelParams::init_with_prior(cfg.model_dims().unwrap(), cfg.seed, cfg.classifier_prior());
    assert_eq!(saved, init);
}

#[test]
fn zero_auxiliary_weights_leave_only_classification() {
    let mut cfg = small(5);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let videos = loaded(&generate(&cfg).unwrap().train);
    let mut log = Vec::new();
    let out = train(&cfg, &videos, TrainSinks { log: &mut log, checkpoint_dir: None }).unwrap();
    for rec in &out.history {
        assert_eq!(rec.total, rec.parts.cla);
    }
    // The schedule amplitude only enters the auxiliary terms.
    let mut other = cfg.clone();
    other.delta = 0.1;
    assert_eq!(run(&cfg, &videos).1, run(&other, &videos).1);
}

#[test]
fn mass_checks_cover_every_snippet() {
    let mut cfg = small(6);
    cfg.check_masses = true;
    let videos = loaded(&generate(&cfg).unwrap().train);
    let mut log = Vec::new();
    let out = train(&cfg, &videos, TrainSinks { log: &mut log, checkpoint_dir: None }).unwrap();
    assert_eq!(out.masses_checked, cfg.iterations * cfg.batch_size * 32);
}

#[test]
fn loss_falls_over_500_iterations_on_default_data() {
    let mut cfg = RunConfig::with_seed(7);
    cfg.iterations = 500;
    let videos = loaded(&generate(&cfg).unwrap().train);
    let mut log = Vec::new();
    let out = train(&cfg, &videos, TrainSinks { log: &mut log, checkpoint_dir: None }).unwrap();
    let first = out.history.first().unwrap().total;
    let last = out.history.last().unwrap().total;
    assert!(last < first, "iteration 1: {first}, iteration 500: {last}");
}

#[test]
fn inference_rejects_mismatched_features() {
    let cfg = small(8);
    let videos = loaded(&generate(&cfg).unwrap().test);
    let params = ModelParams::init(cfg.model_dims().unwrap(), 1);
    let mut wrong = videos[0].clone();
    wrong.flow = guef_core::numerics::Tensor::zeros(&[5, 32]);
    wrong.rgb = wrong.flow.clone();
    let pc = cfg.proposal_config();
    let s = InferSettings {
        ablation: cfg.ablation(),
        topk_ratio: cfg.topk_ratio,
        proposals: &pc,
        nms_iou: cfg.nms_iou,
    };
    let err = predict_video(&params, &wrong, &s).unwrap_err().to_string();
    assert!(err.contains('5') && err.contains('6'), "{err}");
}

#[test]
fn report_matches_the_reference_evaluator() {
    let cfg = small(9);
    let dir = tempfile::tempdir().unwrap();
    let (train_m, test_m) = synthesize(&cfg, dir.path()).unwrap();
    let videos = train_m.load_videos().unwrap();
    let (_, params) = run(&cfg, &videos);
    let test = test_m.load_videos().unwrap();
    let pc = cfg.proposal_config();
    let s = InferSettings {
        ablation: cfg.ablation(),
        topk_ratio: cfg.topk_ratio,
        proposals: &pc,
        nms_iou: cfg.nms_iou,
    };
    let (_, props) = infer(&params, &test, &s).unwrap();
    let report = evaluate(&props, &test_m, cfg.num_classes);
    let truth = test_m.ground_truth();
    for (th, v) in &report.map {
        assert!((v - brute_mean_ap(&props, &truth, cfg.num_classes, *th)).abs() <= 1e-9);
    }
}

#[test]
fn manifest_files_reject_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let line = r#"{"id":"a","rgb":"a.bin","flow":"a.bin","labels":[0],"fps":25}"#;
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
    let err = Manifest::load(&path).unwrap_err().to_string();
    assert!(err.contains(":2"), "{err}");
    assert!(Manifest::load(Path::new("/nonexistent/m.jsonl")).is_err());
}
