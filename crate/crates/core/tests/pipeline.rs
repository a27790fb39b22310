use mtlam::losses::recon_loss;
use mtlam::pipeline::*;
use mtlam::temporal::TemporalStackConfig;
use mtlam::toytask::{generate_splits, SplitSizes, Splits, ToyTaskConfig};
use mtlam::{Error, Graph};

fn small_task() -> ToyTaskConfig {
    ToyTaskConfig {
        vocab_size: 6,
        confusion_groups: vec![vec![0, 1], vec![2, 3]],
        words_per_clip: 3,
        frames_per_word: 4,
        feature_dim: 6,
        sigma_v: 0.5,
        sigma_a: 0.1,
        bigram_sharpness: 2.0,
        seed: 3,
    }
}

fn small_config(levels: &[usize]) -> ModelConfig {
    let mut cfg = ModelConfig::with_defaults(6, 6, 8).unwrap();
    cfg.levels = levels.to_vec();
    cfg.memory.heads = 2;
    cfg.memory.slots = 5;
    cfg.pool_width = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.optimizer.lr_max = 0.01;
    cfg
}

fn small_splits(n_train: usize) -> Splits {
    generate_splits(&small_task(), SplitSizes { train: n_train, val: 24, test: 30 }, 9).unwrap()
}

fn full_batch_loss(model: &Model, splits: &Splits) -> f64 {
    let (v, a, labels) = collate(&splits.train).unwrap();
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let (v, a) = (g.constant(v), g.constant(a));
    let (_, total) = model.losses(&mut g, &p, v, a, &labels).unwrap();
    g.value(total).item().unwrap() as f64
}

#[test]
fn builds_are_deterministic() {
    let cfg = small_config(&[1, 2, 3]);
    assert_eq!(build_model(&cfg, 4).unwrap().params, build_model(&cfg, 4).unwrap().params);
    assert_ne!(build_model(&cfg, 4).unwrap().params, build_model(&cfg, 5).unwrap().params);
}

#[test]
fn parameter_counts_follow_the_memory_formula() {
    let base = build_model(&small_config(&[]), 0).unwrap();
    assert!(base.params.names().all(|n| !n.starts_with("mtlam.")));
    let full = build_model(&small_config(&[1, 2, 3]), 0).unwrap();
    let (h, n, d) = (2, 5, 8);
    let per_level = h * n * d + n * d + d * h * d + h * d * d;
    assert_eq!(full.num_params(), base.num_params() + 3 * per_level);
    // Shared parameters are drawn identically whatever the enabled levels.
    for (name, t) in base.params.iter() {
        assert_eq!(full.params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn misaligned_stacks_are_refused() {
    let mut cfg = small_config(&[1]);
    cfg.audio_stack = TemporalStackConfig::uniform(8, &[3, 3, 3, 3], &[1, 3, 4, 8]).unwrap();
    match build_model(&cfg, 0) {
        Err(Error::Misaligned { layer, .. }) => assert_eq!(layer, 2),
        other => panic!("expected misalignment, got {other:?}"),
    }
}

#[test]
fn last_layer_cannot_hold_memory() {
    assert!(build_model(&small_config(&[4]), 0).is_err());
    assert!(build_model(&small_config(&[0]), 0).is_err());
    assert!(build_model(&small_config(&[2, 1]), 0).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 11, 1e-2, 1e-4), 1e-2);
    assert!((cosine_lr(10, 11, 1e-2, 1e-4) - 1e-4).abs() < 1e-15);
    let mid = cosine_lr(5, 11, 1e-2, 1e-4);
    assert!((mid - (1e-4 + 0.5 * (1e-2 - 1e-4))).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut cfg = small_config(&[1, 2]);
    cfg.train.optimizer.lr_max = 0.0;
    cfg.train.optimizer.lr_min = 0.0;
    let splits = small_splits(32);
    let out = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    assert_eq!(out.last.params, build_model(&cfg, cfg.train.seed).unwrap().params);
}

#[test]
fn one_epoch_reduces_the_loss() {
    let mut cfg = small_config(&[1, 2, 3]);
    cfg.train.epochs = 1;
    let splits = small_splits(32);
    let before = full_batch_loss(&build_model(&cfg, 0).unwrap(), &splits);
    let out = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    let after = full_batch_loss(&Model::from_params(&cfg, out.last.params).unwrap(), &splits);
    assert!(after < before, "{after} >= {before}");
    assert_eq!(out.log.steps.len(), 4);
    assert_eq!(out.log.epochs.len(), 1);
}

#[test]
fn one_small_step_decreases_the_total() {
    let splits = small_splits(8);
    for seed in 0..5 {
        let cfg = small_config(&[1, 2, 3]);
        let mut model = build_model(&cfg, seed).unwrap();
        let before = full_batch_loss(&model, &splits);
        let plain = OptimizerConfig {
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&plain, &model.params).unwrap();
        train_step(&mut model, &mut opt, &splits.train, 1e-4, 1).unwrap();
        let after = full_batch_loss(&model, &splits);
        assert!(after < before, "seed {seed}: {after} >= {before}");
    }
}

#[test]
fn memories_receive_gradient_and_audio_model_gets_none_from_recon() {
    let cfg = small_config(&[1, 2, 3]);
    let model = build_model(&cfg, 1).unwrap();
    let splits = small_splits(8);
    let (v, a, labels) = collate(&splits.train).unwrap();

    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, true);
    let (vv, av) = (g.constant(v.clone()), g.constant(a.clone()));
    let (_, total) = model.losses(&mut g, &p, vv, av, &labels).unwrap();
    g.backward(total).unwrap();
    for bank in model.banks() {
        for name in [bank.keys_name(), bank.values_name(), bank.query_name(), bank.aggregate_name()] {
            let grad = g.grad(p.get(&name).unwrap()).unwrap();
            assert!(grad.data().iter().any(|&x| x != 0.0), "{name}");
        }
    }

    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, true);
    let (vv, av) = (g.constant(v), g.constant(a));
    let out = model.forward(&mut g, &p, vv, Some(av), Mode::Joint).unwrap();
    let recon = recon_loss(&mut g, &out.recalled, &out.audio_levels).unwrap();
    g.backward(recon).unwrap();
    for (name, var) in p.iter().filter(|(n, _)| n.starts_with("audio.")) {
        let grad = g.grad(var);
        assert!(grad.map_or(true, |t| t.data().iter().all(|&x| x == 0.0)), "{name}");
    }
}

#[test]
fn total_matches_recomputed_parts() {
    let cfg = small_config(&[1, 3]);
    let model = build_model(&cfg, 2).unwrap();
    let splits = small_splits(8);
    let (v, a, labels) = collate(&splits.train).unwrap();
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let (vv, av) = (g.constant(v), g.constant(a));
    let (parts, total) = model.losses(&mut g, &p, vv, av, &labels).unwrap();
    let report = mtlam::losses::LossReport::read(&g, &parts, total).unwrap();
    assert!((report.total - report.sum_of_parts()).abs() < 1e-6);

    // Independent recomputation of the classification terms.
    let out = model.forward(&mut g, &p, vv, Some(av), Mode::Joint).unwrap();
    let cv = g.cross_entropy(out.logits_v, &labels).unwrap();
    let ca = g.cross_entropy(out.logits_a.unwrap(), &labels).unwrap();
    let cva = g.cross_entropy(out.logits_va, &labels).unwrap();
    let recomputed: f64 = [cv, ca, cva]
        .iter()
        .map(|&x| g.value(x).item().unwrap() as f64)
        .sum::<f64>()
        + report.recon
        + report.cont;
    assert!((recomputed - report.total).abs() < 1e-6);
}

#[test]
fn evaluation_is_pure_and_random_init_is_near_chance() {
    let task = ToyTaskConfig::default();
    let splits = generate_splits(&task, SplitSizes { train: 1, val: 1, test: 1000 }, 2).unwrap();
    let mut cfg = ModelConfig::with_defaults(32, 20, 8).unwrap();
    cfg.memory.slots = 4;
    let model = build_model(&cfg, 0).unwrap();
    let a = evaluate(&model, &splits.test).unwrap();
    let b = evaluate(&model, &splits.test).unwrap();
    assert_eq!(a, b);
    let sigma = (0.05f64 * 0.95 / 1000.0).sqrt();
    for acc in [a.acc_v, a.acc_a, a.acc_va] {
        assert!((acc - 0.05).abs() <= 3.0 * sigma, "accuracy {acc}");
    }
}

#[test]
fn visual_only_inference_matches_evaluation_and_ignores_audio() {
    let cfg = small_config(&[1, 2, 3]);
    let splits = small_splits(32);
    let out = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    let model = out.best.model().unwrap();
    let (v, a, _) = collate(&splits.test).unwrap();
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let (vv, av) = (g.constant(v), g.constant(a));
    let joint = model.forward(&mut g, &p, vv, Some(av), Mode::Joint).unwrap();
    let preds = argmax_rows(g.value(joint.logits_va));
    for (i, s) in splits.test.iter().enumerate() {
        let inf = infer_visual_only(&model, &s.visual).unwrap();
        assert!(!audio_trace::was_set());
        assert_eq!(inf.label, preds[i]);
        assert_eq!(inf.scores.len(), 3);
        assert_eq!(inf.logits.data(), &g.value(joint.logits_va).row(i)[..]);
    }
}

#[test]
fn visual_only_mode_refuses_audio() {
    let cfg = small_config(&[1]);
    let model = build_model(&cfg, 0).unwrap();
    let splits = small_splits(4);
    let (v, a, _) = collate(&splits.train).unwrap();
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let (vv, av) = (g.constant(v), g.constant(a));
    audio_trace::reset();
    assert!(matches!(
        model.forward(&mut g, &p, vv, Some(av), Mode::VisualOnly),
        Err(Error::ContractViolation(_))
    ));
    assert!(!audio_trace::was_set());
    model.forward(&mut g, &p, vv, Some(av), Mode::Joint).unwrap();
    assert!(audio_trace::was_set());
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config(&[2]);
    let splits = small_splits(32);
    let a = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    let b = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.loss_csv(), b.log.loss_csv());
    assert_eq!(a.last.params, b.last.params);
}

#[test]
fn interrupted_training_resumes_exactly() {
    let cfg = small_config(&[1, 2]);
    let splits = small_splits(32);
    let full = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    assert!(full.finished);
    let first = train(
        &cfg,
        &splits.train,
        &splits.val,
        TrainOptions { resume: None, stop_after: Some(3) },
    )
    .unwrap();
    assert!(!first.finished);
    assert_eq!(first.last.step, 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.mtlc");
    first.last.save(&path).unwrap();
    let resumed_from = Checkpoint::load_for(&path, &cfg).unwrap();
    let rest = train(
        &cfg,
        &splits.train,
        &splits.val,
        TrainOptions { resume: Some(resumed_from), stop_after: None },
    )
    .unwrap();
    assert!(rest.finished);
    assert_eq!(rest.last.params, full.last.params);
    assert_eq!(rest.best.params, full.best.params);
    let mut joined = first.log.clone();
    joined.steps.extend(rest.log.steps.iter().cloned());
    joined.epochs.extend(rest.log.epochs.iter().cloned());
    assert_eq!(joined, full.log);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config(&[1, 2, 3]);
    let splits = small_splits(32);
    let out = train(&cfg, &splits.train, &splits.val, TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mtlc");
    out.last.save(&path).unwrap();
    assert!(config_path(&path).exists());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.last);
    let before = evaluate(&out.last.model().unwrap(), &splits.test).unwrap();
    let after = evaluate(&back.model().unwrap(), &splits.test).unwrap();
    assert_eq!(before, after);

    let mut other = cfg.clone();
    other.memory.alpha = 4.0;
    assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::ConfigHashMismatch)));
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = small_config(&[1]);
    let ck = Checkpoint::new(cfg.clone(), 7, build_model(&cfg, 0).unwrap().params, Default::default());
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"MTLC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(&bytes[8..40], &cfg.hash());
    assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 7);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_records(&bad[..]).is_err());
    let truncated = &bytes[..bytes.len() - 3];
    assert!(Checkpoint::read_records(truncated).is_err());

    // A sidecar config that does not match the stored hash is refused.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mtlc");
    ck.save(&path).unwrap();
    let mut other = cfg;
    other.pool_width = 2;
    std::fs::write(config_path(&path), other.to_toml()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::ConfigHashMismatch)));
}

#[test]
fn full_model_gradcheck_passes_and_detects_sign_flips() {
    let cfg = small_config(&[1, 2, 3]);
    let model = build_model(&cfg, 3).unwrap();
    let splits = small_splits(2);
    let ok = model_gradcheck(&model, &splits.train, 20, 1e-5, 11, false).unwrap();
    assert!(ok.report.max_rel_error() < 1e-2, "{:?}", ok.report.samples);
    assert_eq!(ok.names.len(), 20);
    let flipped = model_gradcheck(&model, &splits.train, 20, 1e-5, 11, true).unwrap();
    assert!(!flipped.report.passes(1e-2));
    assert!(model_gradcheck(&model, &splits.train, 0, 1e-5, 11, false).is_err());
}

#[test]
fn ablation_table_has_one_row_per_subset() {
    let cfg = small_config(&[]);
    let splits = small_splits(16);
    let subsets: Vec<Vec<usize>> = TABLE_SUBSETS.iter().map(|s| s.to_vec()).collect();
    let one = ablate(&cfg, &subsets, &[0, 1], &splits, 1).unwrap();
    let two = ablate(&cfg, &subsets, &[0, 1], &splits, 3).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.rows.len(), 7);
    let csv = one.to_csv();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,0,0,"));
    assert!(csv.lines().nth(7).unwrap().starts_with("1,1,1,"));
}
