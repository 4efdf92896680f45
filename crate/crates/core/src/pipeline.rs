//! End-to-end orchestration: probing, the three pruning stages, suite
//! evaluation, calibration, diagnostics and costing.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FusionMethod, PipelineConfig};
use crate::decoder::{synthetic_prompt, Prompt, ToyDecoder};
use crate::diagnostics::{encoder_diagnostics, rank_stability, EncoderDiagnostics};
use crate::encoder::{build_encoder, synthetic_image, EncoderState};
use crate::error::{PruneError, Result};
use crate::flops::{average_visual_tokens, BlockShape, CostModel, CostReport, EncoderCost};
use crate::linalg::FeatureMatrix;
use crate::rank_probe::{allocate_budget, probe_ranks, BudgetPlan, RankProfile};
use crate::rng::{self, Role};
use crate::stage1::{run_stage1, PhaseSchedule, Stage1Outcome};
use crate::stage2::{
    cooperative_prune, cooperative_prune_iterative, diversity_report, random_prune, separate_prune, DiversityRow,
    FusedTokens, Projector,
};
use crate::stage3::{retained_count_for, run_stage3, Stage3Config, Stage3Outcome};
use crate::tensor_io::read_matrix;
use crate::trace::{PruneTrace, RetentionMode, TraceEntry};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seeds of the probe batch start here so they never collide with the main
/// run (item 0) or the evaluation suite (items 1..).
const PROBE_ITEM_BASE: u64 = 1 << 20;

/// Built models plus the config they came from.
pub struct Pipeline {
    config: PipelineConfig,
    encoders: Vec<EncoderState>,
    schedules: Vec<PhaseSchedule>,
    projectors: Vec<Projector>,
    decoder: ToyDecoder,
}

/// Stage 1 and 2 results for one image.
#[derive(Debug, Clone)]
pub struct Fused {
    pub stage1: Vec<Stage1Outcome>,
    pub fused: FusedTokens,
    pub kept: FusedTokens,
    pub entry: TraceEntry,
}

#[derive(Debug, Clone)]
pub struct InstanceRun {
    pub fused: Fused,
    pub stage3: Stage3Outcome,
}

impl InstanceRun {
    pub fn trace(&self) -> PruneTrace {
        let mut entries: Vec<TraceEntry> = self.fused.stage1.iter().flat_map(|s| s.entries.clone()).collect();
        entries.push(self.fused.entry.clone());
        entries.extend(self.stage3.entries.iter().cloned());
        PruneTrace { entries }
    }

    pub fn retained_per_layer(&self) -> Vec<usize> {
        self.stage3.entries.iter().map(|e| e.tokens_after).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteInstance {
    pub item: u64,
    pub visual_bias: f64,
    pub visual_contribution: Vec<f64>,
    pub retained: Vec<usize>,
    pub average_visual_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub mode: RetentionMode,
    pub lambdas: Vec<f64>,
    pub instances: Vec<SuiteInstance>,
    pub mean_retained: Vec<f64>,
    pub average_visual_tokens: f64,
    pub token_reduction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Interior,
    /// Every instance keeps all its tokens. Takes precedence over `Floor`
    /// when the live count is already at the minimum.
    Ceiling,
    /// Every instance sits at the minimum.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer_idx: usize,
    pub target: f64,
    pub lambda: f64,
    pub achieved_mean: f64,
    pub relative_error: f64,
    pub status: CalibrationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub tool_version: String,
    pub seed: u64,
    pub suite_size: usize,
    pub layers: Vec<LayerCalibration>,
    pub lambdas: Vec<f64>,
    pub suite: SuiteReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub tool_version: String,
    pub seed: u64,
    pub profile: RankProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub encoder_id: String,
    pub entropy: Vec<f64>,
    pub max_entropy: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub tool_version: String,
    pub seed: u64,
    pub top_k: usize,
    pub encoders: Vec<EncoderDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedCounts {
    pub initial: BTreeMap<String, usize>,
    pub stage1: BTreeMap<String, usize>,
    pub stage1_total: usize,
    pub stage2: usize,
    pub stage3: Vec<usize>,
    pub final_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub decoder_layer_counts: Vec<usize>,
    pub average_visual_tokens: f64,
    pub reference_visual_tokens: usize,
    pub token_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub image_seed: u64,
    pub prompt_seed: u64,
    pub random_baseline_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub seeds: Seeds,
    pub config: PipelineConfig,
    pub rank_profile: RankProfile,
    pub rank_stability: BTreeMap<String, f64>,
    pub budget_plan: BudgetPlan,
    pub trace: PruneTrace,
    pub diversity: BTreeMap<String, DiversityRow>,
    pub retained: RetainedCounts,
    pub tokens: TokenStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteReport>,
    pub cost: CostReport,
    pub diagnostics: Vec<DiagnosticsSummary>,
}

fn item_key(seed: u64, item: u64, role: Role) -> u64 {
    rng::stream_key(seed, item, role)
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let encoders = config
            .encoder_specs()
            .iter()
            .map(build_encoder)
            .collect::<Result<Vec<_>>>()?;
        let schedules = config.schedules()?;
        let projectors = (0..encoders.len())
            .map(|e| Projector::new(config.projector_spec(e)))
            .collect::<Result<Vec<_>>>()?;
        let decoder = ToyDecoder::build(&config.decoder.spec())?;
        Ok(Self {
            config,
            encoders,
            schedules,
            projectors,
            decoder,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn encoders(&self) -> &[EncoderState] {
        &self.encoders
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    /// Per-encoder inputs of one image. Item 0 reads configured tensor files
    /// where present; every other input is synthetic.
    pub fn images(&self, item: u64) -> Result<Vec<FeatureMatrix>> {
        let key = item_key(self.config.seed, item, Role::Image);
        self.encoders
            .iter()
            .zip(&self.config.encoders)
            .enumerate()
            .map(|(ordinal, (enc, cfg))| match (&cfg.input, item) {
                (Some(path), 0) => read_matrix(path),
                _ => Ok(synthetic_image(enc.spec(), key, ordinal)),
            })
            .collect()
    }

    pub fn prompt(&self, item: u64, visual_bias: f64) -> Result<Prompt> {
        let key = item_key(self.config.seed, item, Role::Text);
        synthetic_prompt(&self.config.decoder.spec(), key, self.config.decoder.text_tokens, visual_bias)
    }

    pub fn probe(&self) -> Result<RankProfile> {
        let batch = (0..self.config.probe.batch_size as u64)
            .map(|i| self.images(PROBE_ITEM_BASE + i))
            .collect::<Result<Vec<_>>>()?;
        probe_ranks(&self.encoders, &batch, self.config.probe.rel_tol)
    }

    pub fn plan(&self, profile: &RankProfile) -> Result<BudgetPlan> {
        for e in &self.encoders {
            let id = &e.spec().encoder_id;
            match profile.encoder(id) {
                Some(r) if r.token_count == e.spec().token_count && r.mean_rank.len() == e.num_blocks() => {}
                _ => {
                    return Err(PruneError::InvalidInput(format!(
                        "rank profile does not describe encoder `{id}` as configured"
                    )))
                }
            }
        }
        // reorder to config order so budgets line up with encoders
        let ordered = RankProfile {
            batch_size: profile.batch_size,
            rel_tol: profile.rel_tol,
            encoders: self
                .encoders
                .iter()
                .map(|e| profile.encoder(&e.spec().encoder_id).cloned().expect("checked above"))
                .collect(),
        };
        allocate_budget(
            &ordered,
            &self.schedules,
            &self.config.stage1_totals(),
            self.config.stage1.min_tokens_per_encoder,
        )
    }

    /// Stage 1 on every encoder, projection, concatenation and stage 2.
    pub fn encode_and_fuse(&self, images: &[FeatureMatrix], plan: &BudgetPlan) -> Result<Fused> {
        let stage1 = self
            .encoders
            .par_iter()
            .zip(images.par_iter())
            .enumerate()
            .map(|(e, (enc, img))| {
                run_stage1(enc, img, &self.schedules[e], &plan.budgets_for(e))
                    .map_err(|err| err.in_stage("stage 1", e))
            })
            .collect::<Result<Vec<_>>>()?;
        let parts = stage1
            .iter()
            .zip(&self.projectors)
            .map(|(s, p)| {
                Ok((
                    p.spec().encoder_id.clone(),
                    p.project(&s.output.features)?,
                    s.output.kept_global_indices.clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = FusedTokens::concat(&parts)?;
        let requested = self.config.stage2.k;
        let k = requested.min(fused.rows());
        let outcome = match self.config.stage2.method {
            FusionMethod::Cooperative => cooperative_prune(&fused, k),
            FusionMethod::Iterative => cooperative_prune_iterative(&fused, k),
        }
        .map_err(|e| e.in_stage("stage 2", 0))?;
        let mut entry = outcome.entry;
        entry.requested = requested;
        if requested > fused.rows() {
            entry.warnings.push(format!(
                "k {requested} exceeds {} fused tokens; clamped",
                fused.rows()
            ));
        }
        Ok(Fused {
            stage1,
            fused,
            kept: outcome.kept,
            entry,
        })
    }

    pub fn stage3_config(&self, mode: RetentionMode, lambdas: &[f64]) -> Stage3Config {
        let mut c = self.config.stage3.runtime();
        c.mode = mode;
        c.lambdas = lambdas.to_vec();
        c
    }

    fn suite_items(&self) -> Vec<(u64, f64)> {
        self.config
            .suite
            .biases()
            .into_iter()
            .enumerate()
            .map(|(j, b)| (j as u64 + 1, b))
            .collect()
    }

    fn fuse_suite(&self, plan: &BudgetPlan) -> Result<Vec<(u64, f64, Fused)>> {
        self.suite_items()
            .into_par_iter()
            .map(|(item, bias)| Ok((item, bias, self.encode_and_fuse(&self.images(item)?, plan)?)))
            .collect()
    }

    fn run_suite(&self, fused: &[(u64, f64, Fused)], config: &Stage3Config) -> Result<Vec<(u64, f64, Stage3Outcome)>> {
        fused
            .par_iter()
            .map(|(item, bias, f)| {
                let prompt = self.prompt(*item, *bias)?;
                Ok((*item, *bias, run_stage3(&f.kept, &self.decoder, &prompt, config, true)?))
            })
            .collect()
    }

    fn summarize_suite(&self, runs: &[(u64, f64, Stage3Outcome)], config: &Stage3Config) -> SuiteReport {
        let instances: Vec<SuiteInstance> = runs
            .iter()
            .map(|(item, bias, out)| SuiteInstance {
                item: *item,
                visual_bias: *bias,
                visual_contribution: out
                    .entries
                    .iter()
                    .map(|e| e.text_guided.as_ref().map_or(0.0, |t| t.visual_contribution))
                    .collect(),
                retained: out.entries.iter().map(|e| e.tokens_after).collect(),
                average_visual_tokens: avg_tokens(&out.layer_visual_counts),
            })
            .collect();
        let n = instances.len() as f64;
        let mean_retained = (0..config.schedule.len())
            .map(|p| instances.iter().map(|i| i.retained[p] as f64).sum::<f64>() / n)
            .collect();
        let average_visual_tokens = instances.iter().map(|i| i.average_visual_tokens).sum::<f64>() / n;
        SuiteReport {
            mode: config.mode,
            lambdas: config.lambdas.clone(),
            instances,
            mean_retained,
            average_visual_tokens,
            token_reduction: 1.0 - average_visual_tokens / self.config.reference_visual_tokens as f64,
        }
    }

    /// Runs the evaluation suite with the given stage-3 settings.
    pub fn evaluate_suite(&self, plan: &BudgetPlan, config: &Stage3Config) -> Result<SuiteReport> {
        let fused = self.fuse_suite(plan)?;
        let runs = self.run_suite(&fused, config)?;
        Ok(self.summarize_suite(&runs, config))
    }

    /// Chooses per-layer λ so the suite's mean retained counts meet the
    /// configured targets, one prune layer at a time.
    ///
    /// The snapshot at a layer does not depend on that layer's λ, so each
    /// layer needs one decoder pass per instance; the search itself is
    /// arithmetic on the recorded visual contributions.
    pub fn calibrate(&self, plan: &BudgetPlan) -> Result<CalibrationReport> {
        let targets = self.config.stage3.calibration_targets.clone();
        let min_keep = self.config.stage3.min_keep;
        let fused = self.fuse_suite(plan)?;
        let mut lambdas = self.config.stage3.lambdas.clone();
        let mut layers = Vec::with_capacity(targets.len());
        for (p, &target) in targets.iter().enumerate() {
            let config = self.stage3_config(RetentionMode::Adaptive, &lambdas);
            let runs = self.run_suite(&fused, &config)?;
            let samples: Vec<(f64, usize)> = runs
                .iter()
                .map(|(_, _, out)| {
                    let e = &out.entries[p];
                    let s = e.text_guided.as_ref().map_or(0.0, |t| t.visual_contribution);
                    (s, e.tokens_before)
                })
                .collect();
            let layer = calibrate_layer(&samples, target, min_keep)
                .map_err(|e| match e {
                    PruneError::Calibration(m) => PruneError::Calibration(format!(
                        "layer {}: {m}",
                        config.schedule[p]
                    )),
                    other => other,
                })?;
            lambdas[p] = layer.0;
            layers.push(LayerCalibration {
                layer_idx: config.schedule[p],
                target,
                lambda: layer.0,
                achieved_mean: layer.1,
                relative_error: (layer.1 - target) / target,
                status: layer.2,
            });
        }
        let config = self.stage3_config(RetentionMode::Adaptive, &lambdas);
        let runs = self.run_suite(&fused, &config)?;
        Ok(CalibrationReport {
            tool_version: TOOL_VERSION.to_string(),
            seed: self.config.seed,
            suite_size: fused.len(),
            layers,
            lambdas,
            suite: self.summarize_suite(&runs, &config),
        })
    }

    pub fn cost_model(&self) -> CostModel {
        let encoders = self
            .config
            .encoders
            .iter()
            .zip(&self.schedules)
            .map(|(e, s)| {
                let spec = e.spec();
                EncoderCost {
                    encoder_id: spec.encoder_id.clone(),
                    shape: BlockShape {
                        dim: spec.dim as u64,
                        mlp_dim: spec.mlp_dim as u64,
                        heads: spec.num_heads as u64,
                    },
                    num_blocks: spec.num_blocks,
                    token_count: spec.token_count as u64,
                    input_dim: spec.dim as u64,
                    extra_tokens: 1,
                    projector_hidden: self.config.stage2.projector_hidden as u64,
                    projector_out: self.config.decoder.dim as u64,
                    prune_blocks: s.prune_blocks.clone(),
                }
            })
            .collect();
        let d = &self.config.decoder;
        CostModel {
            encoders,
            decoder: BlockShape {
                dim: d.dim as u64,
                mlp_dim: d.mlp_dim as u64,
                heads: d.num_heads as u64,
            },
            decoder_depth: d.depth,
            text_tokens: d.text_tokens as u64,
            baseline_decoder_visual: None,
            fusion_scoring: true,
        }
    }

    /// One image and prompt through all three stages.
    pub fn run_instance(&self, item: u64, visual_bias: f64, plan: &BudgetPlan, config: &Stage3Config) -> Result<InstanceRun> {
        let fused = self.encode_and_fuse(&self.images(item)?, plan)?;
        let prompt = self.prompt(item, visual_bias)?;
        let stage3 = run_stage3(&fused.kept, &self.decoder, &prompt, config, false)?;
        Ok(InstanceRun { fused, stage3 })
    }

    pub fn diagnose(&self) -> Result<DiagReport> {
        let images = self.images(0)?;
        let k = self.config.diagnostics.top_k;
        let encoders = self
            .encoders
            .par_iter()
            .zip(images.par_iter())
            .map(|(enc, img)| encoder_diagnostics(enc, img, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiagReport {
            tool_version: TOOL_VERSION.to_string(),
            seed: self.config.seed,
            top_k: k,
            encoders,
        })
    }

    pub fn probe_report(&self) -> Result<ProbeReport> {
        Ok(ProbeReport {
            tool_version: TOOL_VERSION.to_string(),
            seed: self.config.seed,
            profile: self.probe()?,
        })
    }

    /// Full run. A supplied rank profile replaces inline probing.
    pub fn run(&self, profile: Option<RankProfile>) -> Result<RunReport> {
        let rank_profile = match profile {
            Some(p) => p,
            None => self.probe()?,
        };
        let plan = self.plan(&rank_profile)?;
        let mode = self.config.stage3.mode;
        let s3 = self.stage3_config(mode, &self.config.stage3.lambdas);
        let run = self.run_instance(0, self.config.decoder.visual_bias, &plan, &s3)?;
        let trace = run.trace();
        trace.validate()?;

        let k = run.fused.kept.rows();
        let random_seed = item_key(self.config.seed, 0, Role::Shuffle);
        let variants = BTreeMap::from([
            ("cooperative".to_string(), run.fused.kept.clone()),
            ("random".to_string(), random_prune(&run.fused.fused, k, random_seed)?),
            ("separate".to_string(), separate_prune(&run.fused.fused, k)?),
        ]);
        let diversity = diversity_report(&run.fused.fused, &variants)?;

        let ids = |f: &dyn Fn(usize) -> usize| -> BTreeMap<String, usize> {
            self.encoders
                .iter()
                .enumerate()
                .map(|(e, enc)| (enc.spec().encoder_id.clone(), f(e)))
                .collect()
        };
        let stage3_counts = run.retained_per_layer();
        let retained = RetainedCounts {
            initial: ids(&|e| self.encoders[e].spec().token_count),
            stage1: ids(&|e| run.fused.stage1[e].output.token_count()),
            stage1_total: run.fused.fused.rows(),
            stage2: run.fused.kept.rows(),
            final_count: run.stage3.kept.rows(),
            stage3: stage3_counts,
        };
        let layer_counts = run.stage3.layer_visual_counts.clone();
        let average = avg_tokens(&layer_counts);
        let tokens = TokenStats {
            decoder_layer_counts: layer_counts,
            average_visual_tokens: average,
            reference_visual_tokens: self.config.reference_visual_tokens,
            token_reduction: 1.0 - average / self.config.reference_visual_tokens as f64,
        };
        let suite = match mode {
            RetentionMode::Adaptive => Some(self.evaluate_suite(&plan, &s3)?),
            RetentionMode::Fixed => None,
        };
        let cost = self.cost_model().pipeline_cost(&trace)?;
        let diagnostics = self
            .diagnose()?
            .encoders
            .into_iter()
            .map(|d| DiagnosticsSummary {
                encoder_id: d.encoder_id,
                entropy: d.entropy,
                max_entropy: d.max_entropy,
                tau: d.tau,
            })
            .collect();
        Ok(RunReport {
            tool_version: TOOL_VERSION.to_string(),
            seeds: Seeds {
                seed: self.config.seed,
                image_seed: item_key(self.config.seed, 0, Role::Image),
                prompt_seed: item_key(self.config.seed, 0, Role::Text),
                random_baseline_seed: random_seed,
            },
            config: self.config.clone(),
            rank_stability: rank_stability(std::slice::from_ref(&rank_profile)),
            rank_profile,
            budget_plan: plan,
            trace,
            diversity,
            retained,
            tokens,
            suite,
            cost,
            diagnostics,
        })
    }
}

fn avg_tokens(counts: &[usize]) -> f64 {
    let c: Vec<u64> = counts.iter().map(|&v| v as u64).collect();
    average_visual_tokens(&c)
}

fn mean_count(samples: &[(f64, usize)], lambda: f64, min_keep: usize) -> f64 {
    let total: usize = samples
        .iter()
        .map(|&(s, n)| retained_count_for(s, lambda, n, min_keep).expect("lambda checked by caller"))
        .sum();
    total as f64 / samples.len() as f64
}

const LAMBDA_MIN: f64 = 1e-9;
const LAMBDA_MAX: f64 = 1e12;
const TOLERANCE: f64 = 0.10;

/// Bisection (in log space) for the λ whose mean retained count is closest
/// to `target` over `(visual contribution, live tokens)` samples.
pub fn calibrate_layer(samples: &[(f64, usize)], target: f64, min_keep: usize) -> Result<(f64, f64, CalibrationStatus)> {
    if samples.is_empty() {
        return Err(PruneError::Calibration("empty suite".into()));
    }
    let ceiling = samples.iter().map(|&(_, n)| n as f64).sum::<f64>() / samples.len() as f64;
    let floor = samples.iter().map(|&(_, n)| min_keep.min(n) as f64).sum::<f64>() / samples.len() as f64;
    if target > ceiling {
        return Err(PruneError::Calibration(format!(
            "target {target} exceeds the mean live token count {ceiling}"
        )));
    }
    if target < floor {
        return Err(PruneError::Calibration(format!("target {target} is below the min_keep floor {floor}")));
    }
    let f = |l: f64| mean_count(samples, l, min_keep);
    // smallest lambda on the grid with f >= target
    let (mut lo, mut hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    if f(LAMBDA_MAX) < target {
        return Err(PruneError::Calibration(format!(
            "target {target} unreachable: lambda {LAMBDA_MAX:e} gives {}",
            f(LAMBDA_MAX)
        )));
    }
    if f(LAMBDA_MIN) >= target {
        hi = lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid.exp()) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let above = hi.exp();
    let below = lo.exp();
    let (lambda, achieved) = if (f(below) - target).abs() < (f(above) - target).abs() {
        (below, f(below))
    } else {
        (above, f(above))
    };
    if (achieved - target).abs() > TOLERANCE * target {
        return Err(PruneError::Calibration(format!(
            "closest mean {achieved} misses target {target} by more than 10%"
        )));
    }
    let status = if achieved >= ceiling {
        CalibrationStatus::Ceiling
    } else if achieved <= floor {
        CalibrationStatus::Floor
    } else {
        CalibrationStatus::Interior
    };
    Ok((lambda, achieved, status))
}
