use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tokprune_core::config::{load_config, parse_config, PipelineConfig, DEFAULT_CONFIG};
use tokprune_core::pipeline::Pipeline;
use tokprune_core::tensor_io::{parse_header, read_matrix, read_tensor, write_matrix, write_tensor, Tensor};
use tokprune_core::trace::RetentionMode;
use tokprune_core::{FeatureMatrix, PruneError};

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_parse() {
    let default = PipelineConfig::default_experiment();
    assert_eq!(default, load_config(&config_path("default.toml")).unwrap());
    assert_eq!(default.encoders.len(), 4);
    assert_eq!(default.stage1_totals(), vec![1920, 1536, 1152]);
    assert_eq!(default.stage3.schedule, vec![4, 12, 20]);
    assert_eq!(default.stage2.k, 576);
    let small = load_config(&config_path("small.toml")).unwrap();
    assert_eq!(small.total_tokens(), 128);
}

#[test]
fn serialized_config_reads_back_unchanged() {
    let c = parse_config(DEFAULT_CONFIG).unwrap();
    assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
}

fn config_error_path(text: &str) -> String {
    match parse_config(text) {
        Err(PruneError::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_errors_name_the_offending_key() {
    let base = fs::read_to_string(config_path("small.toml")).unwrap();
    let cases = [
        ("k_heads = 2", "k_heads = 9", "stage3.k_heads"),
        ("k = 48", "k = 0", "stage2.k"),
        ("min_keep = 4", "min_keep = 4\nbogus = 1", "stage3.bogus"),
        ("encoder_id = \"narrow\"", "encoder_id = \"wide\"", "encoders[1].encoder_id"),
        ("schedule = [2, 4, 6]", "schedule = [2, 4, 8]", "stage3.schedule"),
        ("\nsize = 4", "\nsize = \"four\"", "suite.size"),
    ];
    for (from, to, path) in cases {
        assert!(base.contains(from), "{from}");
        assert_eq!(config_error_path(&base.replacen(from, to, 1)), path, "{to}");
    }
}

#[test]
fn config_error_maps_to_exit_code_one() {
    let err = parse_config("seed = 1").unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edited_configs_are_fixed_points(
        seed in any::<u64>(),
        k in 1usize..=128,
        k_heads in 1usize..=4,
        bias in -5.0..5.0f64,
        lambda in 0.1..1e3f64,
        adaptive in any::<bool>(),
    ) {
        let mut c = load_config(&config_path("small.toml")).unwrap();
        c.seed = seed;
        c.stage2.k = k;
        c.stage3.k_heads = k_heads;
        c.decoder.visual_bias = bias;
        c.stage3.lambdas = vec![lambda, lambda / 2.0, lambda / 3.0];
        c.stage3.mode = if adaptive { RetentionMode::Adaptive } else { RetentionMode::Fixed };
        let text = c.to_toml();
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml(), text);
    }
}

#[test]
fn tensor_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = FeatureMatrix::from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, -0.5]]).unwrap();
    let path = dir.path().join("m.bin");
    write_matrix(&path, &m).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 50);
    assert_eq!(read_matrix(&path).unwrap(), m);

    let t = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
    let path = dir.path().join("t.bin");
    write_tensor(&path, &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(back, t);
    let mats = back.to_matrices().unwrap();
    assert_eq!(mats.len(), 2);
    assert_eq!(mats[1].get(1, 2), 11.0);
}

#[test]
fn damaged_tensor_files_are_rejected() {
    let good = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().to_bytes();
    let check = |bytes: &[u8], unsupported: bool| {
        let err = Tensor::from_bytes(bytes).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        if unsupported {
            assert!(matches!(err, PruneError::UnsupportedFormat(_)), "{err}");
        } else {
            assert!(matches!(err, PruneError::CorruptFile(_)), "{err}");
        }
    };
    check(&good[..good.len() - 1], false);
    check(&good[..12], false);
    check(&good[..4], false);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    check(&bad_magic, true);
    let mut bad_dtype = good.clone();
    bad_dtype[8] = 0x02;
    check(&bad_dtype, true);
    let mut bad_ndim = good.clone();
    bad_ndim[9] = 4;
    check(&bad_ndim, true);
    assert_eq!(parse_header(&good).unwrap().dims, vec![2, 3]);
}

#[test]
fn input_tensor_replaces_the_synthetic_image() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config_path("small.toml"))
        .unwrap()
        .replacen("seed = 11", "seed = 11\ninput = \"wide.bin\"", 1);
    fs::write(dir.path().join("exp.toml"), text).unwrap();
    let rows: Vec<Vec<f64>> = (0..64).map(|i| (0..16).map(|j| ((i * 16 + j) % 7) as f64 - 3.0).collect()).collect();
    let image = FeatureMatrix::from_rows(&rows).unwrap();
    write_matrix(&dir.path().join("wide.bin"), &image).unwrap();

    let config = load_config(&dir.path().join("exp.toml")).unwrap();
    assert!(config.encoders[0].input.as_ref().unwrap().is_absolute());
    let p = Pipeline::new(config).unwrap();
    let main = p.images(0).unwrap();
    assert_eq!(main[0], image);
    // suite items stay synthetic
    assert_ne!(p.images(1).unwrap()[0], image);

    fs::write(dir.path().join("wide.bin"), b"METEORT1").unwrap();
    assert_eq!(p.images(0).unwrap_err().exit_code(), 3);
}
