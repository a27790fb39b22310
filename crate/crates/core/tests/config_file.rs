use std::path::Path;

use mtlam::config::ExperimentConfig;
use mtlam::Error;

fn default_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

#[test]
fn committed_default_matches_built_in_default() {
    let cfg = ExperimentConfig::load(&default_path()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected_in_every_section() {
    let text = std::fs::read_to_string(default_path()).unwrap();
    for (anchor, typo) in [
        ("output_dir =", "outptu_dir = \"x\"\n"),
        ("train = 1024", "trian = 3\n"),
        ("vocab_size = 20", "vocab = 20\n"),
        ("dim = 16", "dimension = 16\n"),
        ("epochs = 30", "epoch = 3\n"),
        ("kind = \"adam\"", "lr = 0.1\n"),
        ("seeds = [0, 1, 2]", "seed = 4\n"),
    ] {
        let bad = text.replacen(anchor, &format!("{typo}{anchor}"), 1);
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(err, Error::ConfigParse(_)), "{typo}: {err}");
        let name = typo.split(' ').next().unwrap();
        assert!(err.to_string().contains(name), "{err}");
    }
}

#[test]
fn missing_keys_are_rejected() {
    let text = std::fs::read_to_string(default_path()).unwrap();
    let bad = text.replace("pool_width = 7\n", "");
    assert!(ExperimentConfig::from_toml(&bad).is_err());
}

#[test]
fn semantic_errors_name_the_field() {
    let mut cfg = ExperimentConfig::default();
    cfg.toytask.sigma_a = 2.0;
    assert!(cfg.validate().unwrap_err().to_string().contains("sigma_v"));

    let mut cfg = ExperimentConfig::default();
    cfg.ablation.subsets.push(vec![4]);
    assert!(cfg.validate().unwrap_err().to_string().contains("ablation.subsets"));

    let mut cfg = ExperimentConfig::default();
    cfg.data.val = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn misaligned_stacks_fail_validation() {
    let text = std::fs::read_to_string(default_path()).unwrap();
    let needle = "audio_stack = [\n  { kernel_size = 3, dilation = 1,";
    assert!(text.contains(needle));
    let bad = text.replace(needle, "audio_stack = [\n  { kernel_size = 5, dilation = 1,");
    let err = ExperimentConfig::from_toml(&bad).unwrap_err();
    assert!(matches!(err, Error::Misaligned { layer: 1, .. }), "{err}");
}
