//! End-to-end runs of all three phases on small toy problems.

use rudd::codec::decode_dataset;
use rudd::data::{generate_toy, generate_toy_with, Split, ToyOptions};
use rudd::distill::{
    evaluate, run_algorithm1, DistillConfig, LossKind, TrainConfig, METRICS_FILE, PHASE1_CHECKPOINT, PHASE2_CHECKPOINT,
};

fn small(loss: LossKind) -> DistillConfig {
    let mut c = DistillConfig::desk(2, 2, 8, 8).unwrap();
    c.loss = loss;
    c.init_steps = 40;
    c.joint_steps = 12;
    c.real_per_class = 4;
    c.expert_steps = 8;
    c
}

#[test]
fn every_loss_produces_a_decodable_stream() {
    let data = generate_toy(2, 6, 8, 8, 1).unwrap();
    for loss in [LossKind::Gm, LossKind::Tm, LossKind::Dm] {
        let cfg = small(loss);
        let out = run_algorithm1(&cfg, &data, None).unwrap();
        let (content, alloc) = decode_dataset(&out.stream).unwrap();
        assert_eq!(content, out.content, "{loss}");
        assert_eq!(alloc, out.allocation);
        assert_eq!(alloc.total_bits, 8 * out.stream.len() as u64);
        assert_eq!(out.metrics.len(), cfg.joint_steps);
        assert_eq!(content.labels, vec![0, 0, 1, 1]);
    }
}

#[test]
fn runs_are_deterministic() {
    let data = generate_toy(2, 6, 8, 8, 2).unwrap();
    let cfg = small(LossKind::Dm);
    let a = run_algorithm1(&cfg, &data, None).unwrap();
    let b = run_algorithm1(&cfg, &data, None).unwrap();
    assert_eq!(a.stream, b.stream);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(run_algorithm1(&other, &data, None).unwrap().stream, a.stream);
}

#[test]
fn checkpoints_resume_to_the_same_stream() {
    let data = generate_toy(2, 6, 8, 8, 3).unwrap();
    let cfg = small(LossKind::Dm);
    let dir = tempfile::tempdir().unwrap();
    let fresh = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    for f in [PHASE1_CHECKPOINT, PHASE2_CHECKPOINT, METRICS_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // resuming after Phase 2 only reruns Phase 3
    let resumed = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(resumed.stream, fresh.stream);
    assert_eq!(resumed.metrics, fresh.metrics);

    // resuming after Phase 1 reruns Phase 2 from the stored state
    std::fs::remove_file(dir.path().join(PHASE2_CHECKPOINT)).unwrap();
    let from_init = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(from_init.stream, fresh.stream);
}

#[test]
fn decoded_set_trains_a_classifier() {
    let data = generate_toy(2, 6, 8, 8, 4).unwrap();
    let test = generate_toy_with(2, 10, 8, 8, 4, ToyOptions { split: Split::Test, ..Default::default() }).unwrap();
    let cfg = small(LossKind::Dm);
    let out = run_algorithm1(&cfg, &data, None).unwrap();
    let train = TrainConfig { steps: 30, ..Default::default() };
    let report = evaluate(&out.content, &test, &cfg.classifier, &train, 2, 0).unwrap();
    assert_eq!(report.accuracies.len(), 2);
    assert!(report.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn mismatched_data_is_rejected() {
    let data = generate_toy(3, 2, 8, 8, 0).unwrap();
    assert!(run_algorithm1(&small(LossKind::Dm), &data, None).is_err());
}
