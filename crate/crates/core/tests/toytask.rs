use mtlam::toytask::*;
use mtlam::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_task() -> ToyTaskConfig {
    ToyTaskConfig {
        vocab_size: 4,
        confusion_groups: vec![vec![0, 1]],
        words_per_clip: 3,
        frames_per_word: 2,
        feature_dim: 3,
        sigma_v: 0.9,
        sigma_a: 0.2,
        bigram_sharpness: 1.5,
        seed: 4,
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Posterior over the center word by enumerating every word sequence.
fn brute_force_posterior(model: &GenerativeModel, visual: &Tensor) -> Vec<f64> {
    let cfg = model.config();
    let (c, w, l) = (cfg.vocab_size, cfg.words_per_clip, cfg.frames_per_word);
    let mid = w / 2;
    let var = cfg.sigma_v * cfg.sigma_v;
    let loglik = |k: usize, word: usize| -> f64 {
        let p = model.visual_prototype(word);
        let mut sq = 0.0;
        for f in k * l..(k + 1) * l {
            for (x, mu) in visual.row(f).iter().zip(p) {
                sq += (*x as f64 - mu).powi(2);
            }
        }
        -sq / (2.0 * var)
    };
    // Reverse transition computed from scratch: P(prev = a | cur = b) ∝ P(b | a).
    let back = |b: usize, a: usize| -> f64 {
        let z: f64 = (0..c).map(|x| model.transition(x, b)).sum();
        model.transition(a, b) / z
    };
    let mut post = vec![0.0f64; c];
    let total = c.pow(w as u32);
    for code in 0..total {
        let words: Vec<usize> = (0..w).map(|k| (code / c.pow(k as u32)) % c).collect();
        let mut logp = 0.0;
        for k in mid + 1..w {
            logp += model.transition(words[k - 1], words[k]).ln();
        }
        for k in 0..mid {
            logp += back(words[k + 1], words[k]).ln();
        }
        for (k, &word) in words.iter().enumerate() {
            logp += loglik(k, word);
        }
        post[words[mid]] += logp.exp();
    }
    let s: f64 = post.iter().sum();
    post.into_iter().map(|p| p / s).collect()
}

#[test]
fn exact_posterior_matches_enumeration() {
    let cfg = small_task();
    let model = GenerativeModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for center in 0..cfg.vocab_size {
        for _ in 0..5 {
            let (_, s) = model.sample(center, &mut rng);
            let ours = softmax(&model.visual_log_posterior(&s.visual, true).unwrap());
            let brute = brute_force_posterior(&model, &s.visual);
            for (a, b) in ours.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-9, "{ours:?} vs {brute:?}");
            }
        }
    }
}

#[test]
fn center_only_posterior_ties_within_a_group() {
    let cfg = small_task();
    let model = GenerativeModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, s) = model.sample(0, &mut rng);
    let post = model.visual_log_posterior(&s.visual, false).unwrap();
    assert_eq!(post[0], post[1]);
    assert_ne!(post[0], post[2]);
}

#[test]
fn generation_is_deterministic_and_streams_are_separate() {
    let cfg = ToyTaskConfig::default();
    let sizes = SplitSizes { train: 30, val: 10, test: 10 };
    let a = generate_splits(&cfg, sizes, 3).unwrap();
    let b = generate_splits(&cfg, sizes, 3).unwrap();
    assert_eq!(a, b);
    let c = generate_splits(&cfg, sizes, 4).unwrap();
    assert_ne!(a.train, c.train);
    // Growing one split leaves the others untouched.
    let bigger = generate_splits(&cfg, SplitSizes { train: 60, ..sizes }, 3).unwrap();
    assert_eq!(bigger.val, a.val);
    assert_eq!(bigger.test, a.test);
}

#[test]
fn shapes_and_class_balance() {
    let cfg = ToyTaskConfig::default();
    let model = GenerativeModel::new(&cfg).unwrap();
    let split = model.sample_split(100, 9);
    let mut counts = vec![0usize; cfg.vocab_size];
    for s in &split {
        assert_eq!(s.visual.shape(), [35, 32]);
        assert_eq!(s.audio.shape(), [35, 32]);
        counts[s.label] += 1;
    }
    assert!(counts.iter().all(|&n| n == 5), "{counts:?}");
}

#[test]
fn split_sizes_from_total() {
    let s = SplitSizes::from_total(1000).unwrap();
    assert_eq!((s.train, s.val, s.test), (800, 100, 100));
    assert!(SplitSizes::from_total(2).is_err());
}

#[test]
fn right_neighbours_follow_the_bigram_chain() {
    let cfg = small_task();
    let model = GenerativeModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 20_000;
    let mut counts = vec![0usize; cfg.vocab_size];
    for _ in 0..n {
        let words = model.sample_words(2, &mut rng);
        assert_eq!(words[1], 2);
        counts[words[2]] += 1;
    }
    for (b, &k) in counts.iter().enumerate() {
        let p = model.transition(2, b);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = k as f64 / n as f64;
        assert!((freq - p).abs() < 5.0 * se + 1e-9, "word {b}: {freq} vs {p}");
    }
}

#[test]
fn rows_of_the_chain_are_distributions() {
    let model = GenerativeModel::new(&ToyTaskConfig::default()).unwrap();
    for a in 0..20 {
        let s: f64 = (0..20).map(|b| model.transition(a, b)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn words_of_a_group_share_their_visual_prototype() {
    let model = GenerativeModel::new(&ToyTaskConfig::default()).unwrap();
    assert_eq!(model.visual_prototype(0), model.visual_prototype(3));
    assert_ne!(model.visual_prototype(3), model.visual_prototype(4));
    assert_ne!(model.audio_prototype(0), model.audio_prototype(3));
}

#[test]
fn noiseless_streams_are_read_perfectly_by_nearest_prototype() {
    let cfg = ToyTaskConfig {
        confusion_groups: vec![],
        sigma_v: 0.0,
        sigma_a: 0.0,
        ..ToyTaskConfig::default()
    };
    let splits = generate(&cfg, 200, 0).unwrap();
    assert_eq!(nearest_visual_accuracy(&cfg, &splits.train).unwrap().accuracy, 1.0);
    assert_eq!(nearest_audio_accuracy(&cfg, &splits.train).unwrap().accuracy, 1.0);
}

#[test]
fn a_shared_prototype_caps_nearest_visual_but_not_context() {
    let cfg = ToyTaskConfig {
        vocab_size: 4,
        confusion_groups: vec![vec![0, 1]],
        sigma_v: 0.0,
        sigma_a: 0.0,
        bigram_sharpness: 3.0,
        ..ToyTaskConfig::default()
    };
    let model = GenerativeModel::new(&cfg).unwrap();
    let split = model.sample_split(2000, 5);
    let in_group: Vec<ToySample> = split.into_iter().filter(|s| s.label < 2).collect();
    let nearest = nearest_visual_accuracy(&cfg, &in_group).unwrap().accuracy;
    assert!(nearest <= 0.5 + 1e-12, "{nearest}");
    let oracle = bayes_oracle(&cfg, &in_group, true).unwrap().accuracy;
    assert!(oracle > nearest + 0.05, "{oracle} vs {nearest}");
}

#[test]
fn uniform_bigrams_leave_a_two_word_group_at_chance() {
    let cfg = ToyTaskConfig {
        vocab_size: 4,
        confusion_groups: vec![vec![0, 1]],
        sigma_v: 0.0,
        sigma_a: 0.0,
        bigram_sharpness: 0.0,
        ..ToyTaskConfig::default()
    };
    let model = GenerativeModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, s) = model.sample(0, &mut rng);
    let post = softmax(&model.visual_log_posterior(&s.visual, true).unwrap());
    assert!((post[0] - 0.5).abs() < 1e-9 && (post[1] - 0.5).abs() < 1e-9, "{post:?}");
}

#[test]
fn default_task_ordering_of_baselines() {
    let cfg = ToyTaskConfig::default();
    let test = generate_splits(&cfg, SplitSizes { train: 0, val: 0, test: 1000 }, 7)
        .unwrap()
        .test;
    let audio = nearest_audio_accuracy(&cfg, &test).unwrap();
    let visual = nearest_visual_accuracy(&cfg, &test).unwrap();
    let center = bayes_oracle(&cfg, &test, false).unwrap();
    let full = bayes_oracle(&cfg, &test, true).unwrap();
    assert!(audio.accuracy > 0.95, "{audio:?}");
    assert!(visual.accuracy < 0.35, "{visual:?}");
    // Four-word groups leave the center alone at about a quarter.
    assert!((center.accuracy - 0.25).abs() < 4.0 * center.std_error(), "{center:?}");
    assert!(full.accuracy > center.accuracy + 0.2, "{full:?} vs {center:?}");
    assert!((0.55..0.8).contains(&full.accuracy), "{full:?}");
}

#[test]
fn monte_carlo_oracle_brackets_the_split_estimate() {
    let cfg = ToyTaskConfig::default();
    let a = bayes_oracle_monte_carlo(&cfg, 2000, 1).unwrap();
    let b = bayes_oracle_monte_carlo(&cfg, 2000, 2).unwrap();
    let tol = 3.0 * (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
    assert!((a.accuracy - b.accuracy).abs() < tol, "{a:?} {b:?}");
    assert!(a.half_width_95() > 0.0 && a.half_width_95() < 0.03);
}

#[test]
fn accuracy_estimate_error_bars() {
    let e = AccuracyEstimate::from_hits(50, 100);
    assert!((e.std_error() - 0.05).abs() < 1e-12);
    assert!((e.half_width_95() - 1.96 * 0.05).abs() < 1e-9);
}

#[test]
fn sample_files_round_trip() {
    let cfg = ToyTaskConfig { feature_dim: 5, ..ToyTaskConfig::default() };
    let splits = generate(&cfg, 20, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_splits(dir.path(), &splits).unwrap();
    assert_eq!(load_splits(dir.path()).unwrap(), splits);
    assert_eq!(load_split(dir.path(), Split::Val).unwrap(), splits.val);

    let mut bytes = Vec::new();
    write_samples(&mut bytes, &splits.test).unwrap();
    assert_eq!(read_samples(bytes.as_slice()).unwrap(), splits.test);
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(read_samples(trailing.as_slice()).is_err());
    assert!(read_samples(&bytes[..bytes.len() - 1]).is_err());
    let mut bad_magic = bytes;
    bad_magic[0] ^= 0xff;
    assert!(read_samples(bad_magic.as_slice()).is_err());
}

#[test]
fn split_names_parse() {
    for s in Split::ALL {
        assert_eq!(s.name().parse::<Split>().unwrap(), s);
    }
    assert!("holdout".parse::<Split>().is_err());
}

fn config_error(cfg: ToyTaskConfig) -> String {
    cfg.validate().unwrap_err().to_string()
}

#[test]
fn invalid_configs_name_the_offending_field() {
    let base = ToyTaskConfig::default();
    let e = config_error(ToyTaskConfig { sigma_v: 0.1, sigma_a: 0.2, ..base.clone() });
    assert!(e.contains("sigma_v"), "{e}");
    let e = config_error(ToyTaskConfig { sigma_a: -1.0, ..base.clone() });
    assert!(e.contains("sigma_a"), "{e}");
    let e = config_error(ToyTaskConfig { vocab_size: 8, confusion_groups: vec![vec![0, 1]; 5], ..base.clone() });
    assert!(e.contains("confusion_groups"), "{e}");
    let e = config_error(ToyTaskConfig { confusion_groups: vec![vec![0, 1], vec![1, 2]], ..base.clone() });
    assert!(e.contains("two groups"), "{e}");
    let e = config_error(ToyTaskConfig { confusion_groups: vec![vec![0]], ..base.clone() });
    assert!(e.contains("fewer than 2"), "{e}");
    let e = config_error(ToyTaskConfig { words_per_clip: 4, ..base.clone() });
    assert!(e.contains("words_per_clip"), "{e}");
    let e = config_error(ToyTaskConfig { frames_per_word: 0, ..base });
    assert!(e.contains("frames_per_word"), "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn posterior_is_finite_for_any_config(
        seed in 0u64..1000,
        sharp in 0.0f64..4.0,
        sigma_v in 0.0f64..2.0,
    ) {
        let cfg = ToyTaskConfig { seed, bigram_sharpness: sharp, sigma_v, sigma_a: 0.0, ..small_task() };
        let model = GenerativeModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, s) = model.sample((seed % 4) as usize, &mut rng);
        let post = model.visual_log_posterior(&s.visual, true).unwrap();
        prop_assert!(post.iter().all(|p| p.is_finite()));
    }
}
