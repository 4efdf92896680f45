//! Seeded inputs shared by the criterion benches.

use tokprune_core::config::{parse_config, PipelineConfig};
use tokprune_core::rng::{self, Role};
use tokprune_core::stage2::FusedTokens;
use tokprune_core::FeatureMatrix;

pub const SMALL_CONFIG: &str = include_str!("../../../configs/small.toml");

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    FeatureMatrix::new(rng::gaussian(seed, 0, Role::Image, rows, cols, 1.0)).expect("finite")
}

/// Scores with a few repeated values so tie-breaking is exercised.
pub fn scores(n: usize, seed: u64) -> Vec<f64> {
    let m = gaussian(1, n, seed);
    m.row(0).iter().map(|v| (v * 8.0).round() / 8.0).collect()
}

/// `encoders` groups of `per_encoder` fused rows of width `dim`.
pub fn fused(encoders: usize, per_encoder: usize, dim: usize) -> FusedTokens {
    let parts: Vec<_> = (0..encoders)
        .map(|e| (format!("e{e}"), gaussian(per_encoder, dim, e as u64 + 1), (0..per_encoder).collect()))
        .collect();
    FusedTokens::concat(&parts).expect("equal widths")
}

pub fn small_config() -> PipelineConfig {
    parse_config(SMALL_CONFIG).expect("shipped config is valid")
}

pub fn default_config() -> PipelineConfig {
    PipelineConfig::default_experiment()
}
