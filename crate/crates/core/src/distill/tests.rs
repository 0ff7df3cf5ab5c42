use super::*;
use crate::codec::decode_dataset;
use crate::data::generate_toy;
use crate::numerics::check::{directional_difference, relative_error};

fn tiny_cfg(loss: LossKind) -> DistillConfig {
    let mut c = DistillConfig::desk(2, 1, 4, 4).unwrap();
    c.loss = loss;
    c.classifier = ClassifierConfig::new(1, 2, 2, 4, 4).unwrap();
    c.entropy = EntropyNetConfig::new(3, 4, 2).unwrap();
    c.decoder = DecoderConfig::new(c.scales, 4, 0).unwrap();
    c.real_per_class = 2;
    c.inner_steps = 1;
    c.expert_steps = 4;
    c.tm_student_steps = 1;
    c.tm_expert_steps = 2;
    c.inner_lr = 0.1;
    c
}

fn flat_state(s: &DistillState) -> Vec<f64> {
    let mut v: Vec<f64> = s.latents.iter().flat_map(|t| t.to_vec()).collect();
    v.extend(s.entropy.iter().flat_map(|n| n.flatten()));
    v.extend(s.decoders.iter().flat_map(|n| n.flatten()));
    v
}

fn set_flat(s: &mut DistillState, v: &[f64]) {
    let mut off = 0;
    let mut fill = |t: &mut Tensor<f64>| {
        *t = Tensor::new(t.shape().to_vec(), v[off..off + t.numel()].to_vec()).unwrap();
        off += t.numel();
    };
    s.latents.iter_mut().for_each(&mut fill);
    s.entropy.iter_mut().flat_map(|n| n.params.iter_mut()).for_each(&mut fill);
    s.decoders.iter_mut().flat_map(|n| n.params.iter_mut()).for_each(&mut fill);
}

#[test]
fn lambda_schedule_cases() {
    assert_eq!(lambda_schedule(0, 10, 1e3, 85.0).unwrap(), 1e3);
    assert_eq!(lambda_schedule(4, 10, 1e3, 85.0).unwrap(), 1e3);
    assert_eq!(lambda_schedule(5, 10, 1e3, 85.0).unwrap(), 85.0);
    assert_eq!(lambda_schedule(9, 10, 1e3, 85.0).unwrap(), 85.0);
    assert_eq!(lambda_schedule(0, 1, 2.0, 1.0).unwrap(), 2.0);
    assert!(lambda_schedule(0, 10, 1.0, 2.0).is_err());
    assert!(lambda_schedule(10, 10, 2.0, 1.0).is_err());
}

#[test]
fn preset_multipliers_map_to_the_two_stages() {
    // the default pair {10^3, 8.5 x 10}
    let (hi, lo) = (1e3, 8.5 * 10.0);
    let c = DistillConfig::desk(2, 1, 8, 8).unwrap();
    assert_eq!((c.lambda_hi, c.lambda_lo), (hi, lo));
    assert_eq!(lambda_schedule(0, 100, hi, lo).unwrap(), 1000.0);
    assert_eq!(lambda_schedule(99, 100, hi, lo).unwrap(), 85.0);
}

#[test]
fn loss_kind_parsing() {
    assert_eq!("GM".parse::<LossKind>().unwrap(), LossKind::Gm);
    assert_eq!(" tm ".parse::<LossKind>().unwrap(), LossKind::Tm);
    assert_eq!(LossKind::Dm.to_string(), "dm");
    assert!("mmd".parse::<LossKind>().is_err());
}

#[test]
fn config_validation() {
    let c = DistillConfig::desk(4, 2, 16, 16).unwrap();
    assert_eq!(c.scales, 5);
    c.validate().unwrap();
    let mut bad = c.clone();
    bad.lambda_lo = 2e3;
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.spc = 0;
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.decoder = DecoderConfig::new(3, 8, 0).unwrap();
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.loss = LossKind::Tm;
    bad.tm_student_steps = 4;
    assert!(bad.validate().is_err());
    assert_eq!(DistillConfig::desk(2, 1, 8, 8).unwrap().scales, 4);
}

#[test]
fn state_layout() {
    let mut c = DistillConfig::desk(3, 4, 8, 8).unwrap();
    c.slice_size = 3;
    let s = DistillState::new(&c).unwrap();
    assert_eq!(s.len(), 12);
    assert_eq!(s.num_slices(), 4);
    assert_eq!(s.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    let covered: Vec<usize> = (0..4).flat_map(|k| s.slice_range(k)).collect();
    assert_eq!(covered, (0..12).collect::<Vec<_>>());
    c.slice_size = 5;
    let s = DistillState::new(&c).unwrap();
    assert_eq!(s.num_slices(), 3);
    assert_eq!(s.slice_range(2), 10..12);
}

/// Central-difference check of the whole Phase-2 objective in every parameter,
/// with exact (unrounded) latents on the decoder path and fixed noise.
fn check_joint_gradient(loss: LossKind, seed: u64) -> f64 {
    let cfg = tiny_cfg(loss);
    let data = generate_toy(2, 3, 4, 4, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DistillState::new(&cfg).unwrap();
    for z in state.latents.iter_mut() {
        *z = Tensor::new(z.shape().to_vec(), (0..z.numel()).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
    }
    // zero-initialized weights put ReLUs exactly at their kink (a pixel whose
    // first-layer units are all dead feeds a bias of 0 to the next ReLU), where
    // central differences see half a slope; move every parameter off zero
    let mut jitter = |t: &mut Tensor<f64>| {
        let v: Vec<f64> = t.data().iter().map(|&x| x + rng.random_range(-0.3..0.3)).collect();
        *t = Tensor::new(t.shape().to_vec(), v).unwrap();
    };
    state.entropy.iter_mut().flat_map(|n| n.params.iter_mut()).for_each(&mut jitter);
    state.decoders.iter_mut().flat_map(|n| n.params.iter_mut()).for_each(&mut jitter);
    let expert = train_expert::<f64>(&cfg.classifier, &data, cfg.expert_steps, 0.5, 2, seed).unwrap();
    let real = RealBatch::draw(&data, cfg.real_per_class, &mut rng).unwrap();
    let ctx = draw_context(&cfg, &state, Some(&expert), &mut rng).unwrap();
    let lambda = 3.0;
    let eval = |s: &DistillState| {
        let tape = Tape::new();
        let vars = StateVars::new(&tape, s);
        let mut noise = ChaCha8Rng::seed_from_u64(99);
        let t = joint_objective(&cfg, s, &vars, &real, &ctx, Some(&expert), lambda, Relaxation::Identity, &mut noise).unwrap();
        (t.total.item().unwrap(), tape.gradients(t.total, &vars.all()).unwrap())
    };
    let (_, grads) = eval(&state);
    let g: Vec<f64> = grads.iter().flat_map(|t| t.to_vec()).collect();
    let x0 = flat_state(&state);
    let mut scratch = state.clone();
    let f = |v: &[f64]| {
        set_flat(&mut scratch, v);
        eval(&scratch).0
    };
    let dir: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fd = directional_difference(f, &x0, &dir, 1e-6);
    let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
    relative_error(&[an], &[fd])
}

#[test]
fn joint_objective_gradients_match_finite_differences() {
    for loss in [LossKind::Gm, LossKind::Tm, LossKind::Dm] {
        for seed in 0..3 {
            let e = check_joint_gradient(loss, seed);
            assert!(e <= 1e-3, "{loss} seed {seed}: relative error {e}");
        }
    }
}

#[test]
fn dm_utility_gradient_vanishes_when_synthetic_equals_real() {
    let cfg = tiny_cfg(LossKind::Dm);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = DistillState::new(&cfg).unwrap();
    let syn_values = decoded_relaxed(&state).unwrap();
    let real = RealBatch { images: syn_values, labels: state.labels.clone() };
    let ctx = UtilityContext::Dm { extractor: cfg.classifier.init(&mut rng) };
    let tape = Tape::new();
    let vars = StateVars::new(&tape, &state);
    let syn = synthesize(&state, &vars, Relaxation::Ste).unwrap();
    let u = utility_graph(&cfg, syn, &state.labels, &real, &ctx, None).unwrap();
    assert_eq!(u.item().unwrap(), 0.0);
    for g in tape.gradients(u, &vars.all()).unwrap() {
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn pure_rate_minimization_lowers_the_rate() {
    let mut cfg = DistillConfig::desk(2, 2, 8, 8).unwrap();
    cfg.lambda_hi = 0.0;
    cfg.lambda_lo = 0.0;
    cfg.joint_steps = 100;
    cfg.joint_lr = 1e-2;
    cfg.init_steps = 30;
    let data = generate_toy(2, 10, 8, 8, 5).unwrap();
    let mut state = DistillState::new(&cfg).unwrap();
    phase1(&cfg, &mut state, &data).unwrap();
    let rows = phase2(&cfg, &mut state, &data, None).unwrap();
    let mean = |r: &[MetricRow]| r.iter().map(|m| m.rate_bits).sum::<f64>() / r.len() as f64;
    let first = mean(&rows[..20]);
    let last = mean(&rows[80..]);
    assert!(last < first, "rate went from {first} to {last}");
    // smoothed windows never rise by more than the noise of one window
    let windows: Vec<f64> = rows.chunks(20).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "{windows:?}");
    }
}

#[test]
fn fit_slice_overfits_a_small_image() {
    let opts = crate::data::ToyOptions { noise: 0.0, ..Default::default() };
    let data = crate::data::generate_toy_with(2, 1, 8, 8, 6, opts).unwrap();
    let cfg = DistillConfig::desk(2, 1, 8, 8).unwrap();
    let dims = cfg.dims().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target = Tensor::new(vec![8, 8, 3], data.image(0).iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
    let fit = fit_slice(
        &[target],
        &dims,
        EntropyNetWeights::init(cfg.entropy, &mut rng),
        DecoderWeights::init(cfg.decoder, &mut rng),
        600,
        1e-2,
        1e6,
        0,
        SLICE_STREAM_BASE,
    )
    .unwrap();
    assert!(fit.mse < 1e-3, "mse {}", fit.mse);
    assert!(fit.rate_bits > 0.0);
}

fn small_run_cfg() -> DistillConfig {
    let mut c = DistillConfig::desk(2, 1, 8, 8).unwrap();
    c.init_steps = 40;
    c.joint_steps = 6;
    c.real_per_class = 4;
    c
}

#[test]
fn run_round_trips_and_resumes_idempotently() {
    let cfg = small_run_cfg();
    let data = generate_toy(2, 6, 8, 8, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(out.metrics.len(), cfg.joint_steps);
    assert!(dir.path().join(PHASE1_CHECKPOINT).exists());
    assert!(dir.path().join(PHASE2_CHECKPOINT).exists());
    let (back, alloc) = decode_dataset(&out.stream).unwrap();
    assert_eq!(back, out.content);
    assert_eq!(alloc.total_bits, 8 * out.stream.len() as u64);
    assert_eq!(back.labels, vec![0, 1]);

    // a second run over the same directory only replays Phase 3
    let again = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(again.stream, out.stream);
    assert_eq!(again.metrics, read_metrics(&dir.path().join(METRICS_FILE)).unwrap());

    // resuming from the Phase-1 checkpoint alone reproduces the full run
    std::fs::remove_file(dir.path().join(PHASE2_CHECKPOINT)).unwrap();
    let resumed = run_algorithm1(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(resumed.stream, out.stream);

    // and a fresh directory agrees as well
    let fresh = tempfile::tempdir().unwrap();
    assert_eq!(run_algorithm1(&cfg, &data, Some(fresh.path())).unwrap().stream, out.stream);
}

#[test]
fn runs_without_a_work_dir_are_deterministic_for_every_loss() {
    let data = generate_toy(2, 6, 8, 8, 8).unwrap();
    for loss in [LossKind::Gm, LossKind::Tm, LossKind::Dm] {
        let mut cfg = small_run_cfg();
        cfg.loss = loss;
        cfg.joint_steps = 3;
        cfg.expert_steps = 6;
        let a = run_algorithm1(&cfg, &data, None).unwrap();
        let b = run_algorithm1(&cfg, &data, None).unwrap();
        assert_eq!(a.stream, b.stream, "{loss}");
        // labels are frozen through Phase 2
        assert_eq!(a.content.labels, vec![0, 1]);
    }
}

#[test]
fn phase_order_is_enforced() {
    let cfg = small_run_cfg();
    let data = generate_toy(2, 2, 8, 8, 9).unwrap();
    let mut state = DistillState::new(&cfg).unwrap();
    assert!(phase2(&cfg, &mut state, &data, None).is_err());
    let wrong = generate_toy(3, 2, 8, 8, 9).unwrap();
    assert!(phase1(&cfg, &mut state, &wrong).is_err());
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let rows = vec![
        MetricRow { step: 0, rate_bits: 123.5, utility: 0.25, lambda: 1000.0 },
        MetricRow { step: 1, rate_bits: 1e-3, utility: 2.0, lambda: 85.0 },
    ];
    write_metrics(&p, &rows).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("step,rate_bits,utility,lambda\n"));
    assert_eq!(read_metrics(&p).unwrap(), rows);
    std::fs::write(&p, "step,rate_bits,utility,lambda\n1,2\n").unwrap();
    assert!(read_metrics(&p).is_err());
}

fn eval_cfg() -> (ClassifierConfig, TrainConfig) {
    (ClassifierConfig::new(2, 8, 2, 8, 8).unwrap(), TrainConfig { steps: 60, batch_size: 32, lr: 1e-2 })
}

#[test]
fn evaluation_of_a_copied_training_set_matches_training_on_it() {
    let train = generate_toy(2, 20, 8, 8, 10).unwrap();
    let mut test = generate_toy(2, 20, 8, 8, 11).unwrap();
    test.split = crate::data::Split::Test;
    let (c, t) = eval_cfg();
    let all: Vec<usize> = (0..train.len()).collect();
    let imgs = train.batch::<f64>(&all).unwrap();
    let a = evaluate_images(&imgs, &train.labels, &test, &c, &t, 3, 1).unwrap();
    let b = evaluate_images(&imgs.clone(), &train.labels.clone(), &test, &c, &t, 3, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.mean >= 0.9, "{a:?}");
}

#[test]
fn random_labels_give_chance_accuracy() {
    let train = generate_toy(2, 20, 8, 8, 12).unwrap();
    let test = generate_toy(2, 100, 8, 8, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<u32> = (0..train.len()).map(|_| rng.random_range(0..2)).collect();
    let (c, t) = eval_cfg();
    let all: Vec<usize> = (0..train.len()).collect();
    let r = evaluate_images(&train.batch::<f64>(&all).unwrap(), &labels, &test, &c, &t, 5, 2).unwrap();
    assert!((r.mean - 0.5).abs() <= 0.15, "{r:?}");
}

#[test]
fn evaluate_decodes_the_stream_content() {
    let cfg = small_run_cfg();
    let data = generate_toy(2, 6, 8, 8, 14).unwrap();
    let out = run_algorithm1(&cfg, &data, None).unwrap();
    let (imgs, labels) = decode_content(&out.content).unwrap();
    assert_eq!(imgs.shape(), &[2, 8, 8, 3]);
    assert_eq!(labels, vec![0, 1]);
    assert!(imgs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let (c, t) = eval_cfg();
    let r1 = evaluate(&out.content, &data, &c, &t, 2, 5).unwrap();
    let r2 = evaluate(&out.content, &data, &c, &t, 2, 5).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.accuracies.len(), 2);
}

#[test]
fn eval_report_statistics() {
    let r = EvalReport::from_accuracies(vec![0.5, 0.7]);
    assert!((r.mean - 0.6).abs() < 1e-12);
    assert!((r.std - 0.1).abs() < 1e-12);
}
