//! TOML experiment configuration.
//!
//! Unknown keys are rejected. Errors name the offending key path, e.g.
//! `stage3.k_heads`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderSpec;
use crate::encoder::EncoderSpec;
use crate::error::{PruneError, Result};
use crate::stage1::PhaseSchedule;
use crate::stage2::ProjectorSpec;
use crate::stage3::Stage3Config;
use crate::trace::RetentionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub encoder_id: String,
    #[serde(default = "d::num_blocks")]
    pub num_blocks: usize,
    #[serde(default = "d::num_heads")]
    pub num_heads: usize,
    #[serde(default = "d::token_count")]
    pub token_count: usize,
    #[serde(default = "d::encoder_dim")]
    pub dim: usize,
    /// Defaults to twice `dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_rank: Option<usize>,
    #[serde(default = "d::one")]
    pub logit_scale: f64,
    /// Blocks after which to prune; defaults to the end of each phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_blocks: Option<Vec<usize>>,
    /// Tensor file (`token_count x dim`) used instead of a synthetic image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

impl EncoderConfig {
    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            encoder_id: self.encoder_id.clone(),
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            token_count: self.token_count,
            dim: self.dim,
            mlp_dim: self.mlp_dim.unwrap_or(2 * self.dim),
            seed: self.seed,
            synthetic_rank: self.synthetic_rank,
            logit_scale: self.logit_scale,
        }
    }

    pub fn schedule(&self) -> Result<PhaseSchedule> {
        match &self.prune_blocks {
            Some(b) => PhaseSchedule::with_prune_blocks(self.num_blocks, b.clone()),
            None => PhaseSchedule::split(self.num_blocks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::rel_tol")]
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Fraction of all encoder tokens kept at each prune point, used when
    /// `totals` is absent.
    #[serde(default = "d::keep_ratios")]
    pub keep_ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub totals: Option<Vec<usize>>,
    #[serde(default = "d::min_tokens")]
    pub min_tokens_per_encoder: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Cooperative,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default = "d::stage2_k")]
    pub k: usize,
    #[serde(default = "d::projector_hidden")]
    pub projector_hidden: usize,
    #[serde(default = "d::fusion_method")]
    pub method: FusionMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "d::depth")]
    pub depth: usize,
    #[serde(default = "d::decoder_dim")]
    pub dim: usize,
    #[serde(default = "d::decoder_heads")]
    pub num_heads: usize,
    #[serde(default = "d::decoder_mlp")]
    pub mlp_dim: usize,
    #[serde(default = "d::decoder_seed")]
    pub seed: u64,
    #[serde(default = "d::text_tokens")]
    pub text_tokens: usize,
    /// Logit prior from text queries to visual keys for the main run.
    #[serde(default)]
    pub visual_bias: f64,
}

impl DecoderConfig {
    pub fn spec(&self) -> DecoderSpec {
        DecoderSpec {
            depth: self.depth,
            dim: self.dim,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Section {
    #[serde(default = "d::schedule")]
    pub schedule: Vec<usize>,
    #[serde(default = "d::k_heads")]
    pub k_heads: usize,
    #[serde(default)]
    pub mode: RetentionMode,
    #[serde(default = "d::fixed_counts")]
    pub fixed_counts: Vec<usize>,
    #[serde(default = "d::lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "d::min_keep")]
    pub min_keep: usize,
    /// Mean retained counts the calibrator aims for.
    #[serde(default = "d::targets")]
    pub calibration_targets: Vec<f64>,
}

impl Stage3Section {
    pub fn runtime(&self) -> Stage3Config {
        Stage3Config {
            schedule: self.schedule.clone(),
            k_heads: self.k_heads,
            mode: self.mode,
            fixed_counts: self.fixed_counts.clone(),
            lambdas: self.lambdas.clone(),
            min_keep: self.min_keep,
        }
    }
}

/// Seeded evaluation suite: `size` image/prompt instances whose visual bias
/// is spread evenly over `visual_bias_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "d::suite_size")]
    pub size: usize,
    #[serde(default = "d::bias_range")]
    pub visual_bias_range: [f64; 2],
}

impl SuiteConfig {
    pub fn biases(&self) -> Vec<f64> {
        let [lo, hi] = self.visual_bias_range;
        if self.size == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..self.size)
            .map(|i| lo + (hi - lo) * i as f64 / (self.size - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "d::diag_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "d::seed")]
    pub seed: u64,
    /// Visual tokens of the unpruned reference model, the denominator of
    /// the reported token reduction.
    #[serde(default = "d::reference_tokens")]
    pub reference_visual_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
    pub encoders: Vec<EncoderConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub stage3: Stage3Section,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

mod d {
    pub fn one() -> f64 {
        1.0
    }
    pub fn num_blocks() -> usize {
        6
    }
    pub fn num_heads() -> usize {
        4
    }
    pub fn token_count() -> usize {
        576
    }
    pub fn encoder_dim() -> usize {
        32
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn rel_tol() -> f64 {
        1e-6
    }
    pub fn keep_ratios() -> Vec<f64> {
        vec![5.0 / 6.0, 2.0 / 3.0, 0.5]
    }
    pub fn min_tokens() -> usize {
        16
    }
    pub fn stage2_k() -> usize {
        576
    }
    pub fn projector_hidden() -> usize {
        128
    }
    pub fn fusion_method() -> super::FusionMethod {
        super::FusionMethod::Cooperative
    }
    pub fn depth() -> usize {
        32
    }
    pub fn decoder_dim() -> usize {
        64
    }
    pub fn decoder_heads() -> usize {
        8
    }
    pub fn decoder_mlp() -> usize {
        128
    }
    pub fn decoder_seed() -> u64 {
        7
    }
    pub fn text_tokens() -> usize {
        32
    }
    pub fn schedule() -> Vec<usize> {
        vec![4, 12, 20]
    }
    pub fn k_heads() -> usize {
        4
    }
    pub fn fixed_counts() -> Vec<usize> {
        vec![390, 172, 78]
    }
    pub fn lambdas() -> Vec<f64> {
        vec![118.28259715277758, 53.882263654611386, 29.23648344505277]
    }
    pub fn min_keep() -> usize {
        16
    }
    pub fn targets() -> Vec<f64> {
        vec![396.0, 170.0, 76.0]
    }
    pub fn suite_size() -> usize {
        8
    }
    pub fn bias_range() -> [f64; 2] {
        [-3.0, 1.0]
    }
    pub fn diag_top_k() -> usize {
        64
    }
    pub fn seed() -> u64 {
        20240601
    }
    pub fn reference_tokens() -> usize {
        1024
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch_size: d::batch_size(),
            rel_tol: d::rel_tol(),
        }
    }
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            keep_ratios: d::keep_ratios(),
            totals: None,
            min_tokens_per_encoder: d::min_tokens(),
        }
    }
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            k: d::stage2_k(),
            projector_hidden: d::projector_hidden(),
            method: d::fusion_method(),
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: d::depth(),
            dim: d::decoder_dim(),
            num_heads: d::decoder_heads(),
            mlp_dim: d::decoder_mlp(),
            seed: d::decoder_seed(),
            text_tokens: d::text_tokens(),
            visual_bias: 0.0,
        }
    }
}

impl Default for Stage3Section {
    fn default() -> Self {
        Self {
            schedule: d::schedule(),
            k_heads: d::k_heads(),
            mode: RetentionMode::Fixed,
            fixed_counts: d::fixed_counts(),
            lambdas: d::lambdas(),
            min_keep: d::min_keep(),
            calibration_targets: d::targets(),
        }
    }
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            size: d::suite_size(),
            visual_bias_range: d::bias_range(),
        }
    }
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            top_k: d::diag_top_k(),
        }
    }
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> PruneError {
    PruneError::config(path, message)
}

/// Parses and validates a config. Relative `input` paths stay as written.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| invalid("", e.message().to_string()))?;
    let config: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path == "." { "" } else { &path }, e.into_inner().message().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config(&text)?;
    // encoder inputs are relative to the config file
    if let Some(dir) = path.parent() {
        for e in &mut config.encoders {
            if let Some(input) = &mut e.input {
                if input.is_relative() {
                    *input = dir.join(&*input);
                }
            }
        }
    }
    Ok(config)
}

impl PipelineConfig {
    /// The default four-encoder experiment.
    pub fn default_experiment() -> Self {
        parse_config(DEFAULT_CONFIG).expect("built-in config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder_specs(&self) -> Vec<EncoderSpec> {
        self.encoders.iter().map(EncoderConfig::spec).collect()
    }

    pub fn schedules(&self) -> Result<Vec<PhaseSchedule>> {
        self.encoders.iter().map(EncoderConfig::schedule).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.encoders.iter().map(|e| e.token_count).sum()
    }

    /// Stage-1 totals per prune point.
    pub fn stage1_totals(&self) -> Vec<usize> {
        match &self.stage1.totals {
            Some(t) => t.clone(),
            None => {
                let n = self.total_tokens() as f64;
                let floor = self.stage1.min_tokens_per_encoder * self.encoders.len();
                self.stage1
                    .keep_ratios
                    .iter()
                    .map(|r| ((r * n).round() as usize).max(floor))
                    .collect()
            }
        }
    }

    pub fn projector_spec(&self, encoder: usize) -> ProjectorSpec {
        let e = &self.encoders[encoder];
        ProjectorSpec {
            encoder_id: e.encoder_id.clone(),
            in_dim: e.dim,
            hidden_dim: self.stage2.projector_hidden,
            out_dim: self.decoder.dim,
            seed: e.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(invalid("encoders", "at least one encoder is required"));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            let at = |k: &str| format!("encoders[{i}].{k}");
            if self.encoders[..i].iter().any(|o| o.encoder_id == e.encoder_id) {
                return Err(invalid(at("encoder_id"), format!("`{}` is defined twice", e.encoder_id)));
            }
            e.spec().validate().map_err(|err| invalid(format!("encoders[{i}]"), err.to_string()))?;
            if e.prune_blocks.is_some() {
                e.schedule().map_err(|err| invalid(at("prune_blocks"), err.to_string()))?;
            }
        }
        let schedules = self.schedules().map_err(|e| invalid("encoders", e.to_string()))?;
        let points = schedules[0].prune_blocks.len();
        if schedules.iter().any(|s| s.prune_blocks.len() != points) {
            return Err(invalid("encoders", "every encoder needs the same number of prune blocks"));
        }
        if !(self.probe.rel_tol > 0.0 && self.probe.rel_tol < 1.0) {
            return Err(invalid("probe.rel_tol", "must lie in (0, 1)"));
        }
        if self.probe.batch_size == 0 {
            return Err(invalid("probe.batch_size", "must be >= 1"));
        }
        match &self.stage1.totals {
            Some(t) if t.len() != points => {
                return Err(invalid("stage1.totals", format!("{} totals for {points} prune points", t.len())))
            }
            None if self.stage1.keep_ratios.len() != points => {
                return Err(invalid(
                    "stage1.keep_ratios",
                    format!("{} ratios for {points} prune points", self.stage1.keep_ratios.len()),
                ))
            }
            _ => {}
        }
        if self.stage1.keep_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(invalid("stage1.keep_ratios", "ratios must lie in (0, 1]"));
        }
        let totals = self.stage1_totals();
        if totals.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("stage1.totals", "totals must be non-increasing"));
        }
        let floor = self.stage1.min_tokens_per_encoder * self.encoders.len();
        if let Some(&t) = totals.iter().find(|&&t| t > self.total_tokens() || t < floor) {
            return Err(invalid(
                "stage1.totals",
                format!("total {t} outside [{floor}, {}]", self.total_tokens()),
            ));
        }
        if self.encoders.iter().any(|e| e.token_count < self.stage1.min_tokens_per_encoder) {
            return Err(invalid("stage1.min_tokens_per_encoder", "exceeds an encoder's token count"));
        }
        if self.stage2.k == 0 {
            return Err(invalid("stage2.k", "must be >= 1"));
        }
        if self.stage2.projector_hidden == 0 {
            return Err(invalid("stage2.projector_hidden", "must be >= 1"));
        }
        let dec = self.decoder.spec();
        dec.validate().map_err(|e| invalid("decoder", e.to_string()))?;
        if self.decoder.text_tokens == 0 {
            return Err(invalid("decoder.text_tokens", "must be >= 1"));
        }
        if !self.decoder.visual_bias.is_finite() {
            return Err(invalid("decoder.visual_bias", "must be finite"));
        }
        let s3 = &self.stage3;
        if s3.k_heads == 0 || s3.k_heads > dec.num_heads {
            return Err(invalid(
                "stage3.k_heads",
                format!("must be in 1..={} (decoder heads)", dec.num_heads),
            ));
        }
        if s3.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("stage3.schedule", "must be strictly increasing"));
        }
        if s3.schedule.last().is_some_and(|&l| l >= dec.depth) {
            return Err(invalid("stage3.schedule", format!("layer beyond decoder depth {}", dec.depth)));
        }
        if s3.fixed_counts.len() != s3.schedule.len() {
            return Err(invalid("stage3.fixed_counts", "one count per prune layer"));
        }
        if s3.fixed_counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("stage3.fixed_counts", "must be non-increasing"));
        }
        if s3.lambdas.len() != s3.schedule.len() {
            return Err(invalid("stage3.lambdas", "one lambda per prune layer"));
        }
        if s3.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(invalid("stage3.lambdas", "must be finite and > 0"));
        }
        if s3.calibration_targets.len() != s3.schedule.len() {
            return Err(invalid("stage3.calibration_targets", "one target per prune layer"));
        }
        if s3.calibration_targets.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(invalid("stage3.calibration_targets", "must be finite and > 0"));
        }
        if self.suite.size == 0 {
            return Err(invalid("suite.size", "must be >= 1"));
        }
        let [lo, hi] = self.suite.visual_bias_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid("suite.visual_bias_range", "must be finite with min <= max"));
        }
        if self.diagnostics.top_k == 0 {
            return Err(invalid("diagnostics.top_k", "must be >= 1"));
        }
        if self.reference_visual_tokens == 0 {
            return Err(invalid("reference_visual_tokens", "must be >= 1"));
        }
        Ok(())
    }
}

/// Golden copy of `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");
