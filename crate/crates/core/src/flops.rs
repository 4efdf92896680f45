//! Analytic cost model.
//!
//! Convention: one multiply-accumulate is 2 FLOPs, and every softmax, norm or
//! nonlinearity element is 5 FLOPs. Per transformer block over `n` tokens:
//! projections `4nd²`, scores and weighted sums `2n²d`, MLP `2nd·d_ff` MACs;
//! softmax `h·n²`, two norms `2nd` and the activation `n·d_ff` elements.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};
use crate::trace::PruneTrace;

pub const FLOPS_PER_MAC: u64 = 2;
pub const FLOPS_PER_ELEMENTWISE: u64 = 5;
pub const CONVENTION: &str = "1 MAC = 2 FLOPs; softmax/norm/activation = 5 FLOPs per element";

/// Shape of a transformer block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub dim: u64,
    pub mlp_dim: u64,
    pub heads: u64,
}

/// Per-block cost split into the formula's terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockTerms {
    /// `4nd²` MACs.
    pub projection: u64,
    /// `2n²d` MACs.
    pub attention: u64,
    /// `2nd·d_ff` MACs.
    pub mlp: u64,
    /// `h·n² + 2nd + n·d_ff` elements.
    pub elementwise: u64,
}

impl BlockTerms {
    pub fn of(shape: BlockShape, n: u64) -> Self {
        let BlockShape { dim: d, mlp_dim: f, heads: h } = shape;
        Self {
            projection: 4 * n * d * d,
            attention: 2 * n * n * d,
            mlp: 2 * n * d * f,
            elementwise: h * n * n + 2 * n * d + n * f,
        }
    }

    pub fn macs(&self) -> u64 {
        self.projection + self.attention + self.mlp
    }

    pub fn flops(&self) -> u64 {
        FLOPS_PER_MAC * self.macs() + FLOPS_PER_ELEMENTWISE * self.elementwise
    }
}

pub fn block_flops(shape: BlockShape, n: u64) -> u64 {
    BlockTerms::of(shape, n).flops()
}

/// Sum of block costs, block `b` running over `seq_lens[b]` tokens.
pub fn stack_flops(shape: BlockShape, seq_lens: &[u64]) -> u64 {
    seq_lens.iter().map(|&n| block_flops(shape, n)).sum()
}

/// Encoder blocks over the given live sequence lengths (one per block).
pub fn encoder_flops(shape: BlockShape, num_blocks: usize, seq_lens: &[u64]) -> Result<u64> {
    if seq_lens.len() != num_blocks {
        return Err(PruneError::InvalidInput(format!(
            "{} token counts for {num_blocks} blocks",
            seq_lens.len()
        )));
    }
    Ok(stack_flops(shape, seq_lens))
}

/// Decoder prefill with the same visual and text counts at every layer.
pub fn prefill_flops(shape: BlockShape, depth: usize, visual_count: u64, text_count: u64) -> u64 {
    block_flops(shape, visual_count + text_count) * depth as u64
}

/// Input embedding of `n` tokens from `in_dim` to `dim` columns.
pub fn embedding_flops(n: u64, in_dim: u64, dim: u64) -> u64 {
    FLOPS_PER_MAC * n * in_dim * dim
}

/// Two-layer MLP projector with a nonlinearity on the hidden layer.
pub fn projector_flops(n: u64, in_dim: u64, hidden: u64, out: u64) -> u64 {
    FLOPS_PER_MAC * n * (in_dim * hidden + hidden * out) + FLOPS_PER_ELEMENTWISE * n * hidden
}

/// Redundancy scoring over `n` fused rows of width `d`: row norms, unit
/// scaling and one dot product per row.
pub fn fusion_flops(n: u64, d: u64) -> u64 {
    FLOPS_PER_MAC * 3 * n * d
}

/// Static description of one encoder for costing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCost {
    pub encoder_id: String,
    pub shape: BlockShape,
    pub num_blocks: usize,
    pub token_count: u64,
    /// Columns of the raw input tokens.
    pub input_dim: u64,
    /// Extra tokens carried through every block (a cls token).
    pub extra_tokens: u64,
    pub projector_hidden: u64,
    pub projector_out: u64,
    /// Blocks after which stage-1 pruning runs.
    pub prune_blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub encoders: Vec<EncoderCost>,
    pub decoder: BlockShape,
    pub decoder_depth: usize,
    pub text_tokens: u64,
    /// Visual tokens the unpruned decoder sees. `None` means every fused token.
    pub baseline_decoder_visual: Option<u64>,
    /// Whether pruning includes a fusion scoring pass. It is only costed
    /// when stage 2 drops tokens.
    pub fusion_scoring: bool,
}

/// Live visual token counts through the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProfile {
    /// Per encoder, visual tokens entering each block (extra tokens excluded).
    pub encoder_blocks: Vec<Vec<u64>>,
    /// Per encoder, tokens going through the projector.
    pub projected: Vec<u64>,
    /// Fused tokens scored by the fusion pass, 0 when it does not run.
    pub fused: u64,
    /// Visual tokens entering each decoder layer.
    pub decoder_layers: Vec<u64>,
}

impl CostModel {
    /// Profile of the unpruned pipeline.
    pub fn baseline_profile(&self) -> TokenProfile {
        let encoder_blocks: Vec<Vec<u64>> =
            self.encoders.iter().map(|e| vec![e.token_count; e.num_blocks]).collect();
        let projected: Vec<u64> = self.encoders.iter().map(|e| e.token_count).collect();
        let visual = self.baseline_decoder_visual.unwrap_or_else(|| projected.iter().sum());
        TokenProfile {
            encoder_blocks,
            projected,
            fused: 0,
            decoder_layers: vec![visual; self.decoder_depth],
        }
    }

    /// Per-stage FLOPs for a profile.
    pub fn stage_flops(&self, profile: &TokenProfile) -> Result<BTreeMap<String, u64>> {
        if profile.encoder_blocks.len() != self.encoders.len() || profile.projected.len() != self.encoders.len() {
            return Err(PruneError::InvalidInput("token profile does not match the encoder list".into()));
        }
        if profile.decoder_layers.len() != self.decoder_depth {
            return Err(PruneError::InvalidInput(format!(
                "{} decoder layer counts for depth {}",
                profile.decoder_layers.len(),
                self.decoder_depth
            )));
        }
        let mut encoding = 0;
        let mut projection = 0;
        for ((e, blocks), &proj) in self.encoders.iter().zip(&profile.encoder_blocks).zip(&profile.projected) {
            let lens: Vec<u64> = blocks.iter().map(|n| n + e.extra_tokens).collect();
            encoding += embedding_flops(e.token_count, e.input_dim, e.shape.dim);
            encoding += encoder_flops(e.shape, e.num_blocks, &lens)?;
            projection += projector_flops(proj, e.shape.dim, e.projector_hidden, e.projector_out);
        }
        let fused_dim = self.encoders.first().map_or(0, |e| e.projector_out);
        let seq: Vec<u64> = profile.decoder_layers.iter().map(|v| v + self.text_tokens).collect();
        Ok(BTreeMap::from([
            ("encoding".to_string(), encoding),
            ("projection".to_string(), projection),
            ("fusion".to_string(), fusion_flops(profile.fused, fused_dim)),
            ("prefill".to_string(), stack_flops(self.decoder, &seq)),
        ]))
    }

    pub fn report(&self, pruned: &TokenProfile) -> Result<CostReport> {
        let baseline = self.stage_flops(&self.baseline_profile())?;
        let per_stage = self.stage_flops(pruned)?;
        Ok(CostReport::new(per_stage, baseline.values().sum()))
    }

    /// Profile implied by a pipeline trace: stage-1 counts per block, fused
    /// count from stage 2, decoder counts from stage 3.
    pub fn profile_from_trace(&self, trace: &PruneTrace) -> Result<TokenProfile> {
        let mut encoder_blocks = Vec::with_capacity(self.encoders.len());
        let mut projected = Vec::with_capacity(self.encoders.len());
        for e in &self.encoders {
            let entries: Vec<_> = trace.encoder_entries(&e.encoder_id).collect();
            if entries.len() != e.prune_blocks.len() {
                return Err(PruneError::InvalidTrace(format!(
                    "encoder `{}` has {} stage-1 entries, expected {}",
                    e.encoder_id,
                    entries.len(),
                    e.prune_blocks.len()
                )));
            }
            let mut live = e.token_count;
            let mut counts = Vec::with_capacity(e.num_blocks);
            let mut next = 0;
            for b in 0..e.num_blocks {
                counts.push(live);
                if e.prune_blocks.get(next) == Some(&b) {
                    let entry = entries[next];
                    if entry.block_idx != Some(b) || entry.tokens_before as u64 != live {
                        return Err(PruneError::InvalidTrace(format!(
                            "encoder `{}`: entry {next} does not match block {b} with {live} tokens",
                            e.encoder_id
                        )));
                    }
                    live = entry.tokens_after as u64;
                    next += 1;
                }
            }
            encoder_blocks.push(counts);
            projected.push(live);
        }
        let stage1_total: u64 = projected.iter().sum();
        let stage2: Vec<_> = trace.stage(2).collect();
        let (fused, mut live) = match stage2.first() {
            Some(first) => {
                if first.tokens_before as u64 != stage1_total {
                    return Err(PruneError::InvalidTrace("fusion input does not match stage-1 output".into()));
                }
                let after = stage2.last().map(|e| e.tokens_after as u64).unwrap_or(stage1_total);
                // keeping every row needs no ranking
                let scored = self.fusion_scoring && after < stage1_total;
                (if scored { stage1_total } else { 0 }, after)
            }
            None => (0, stage1_total),
        };
        let stage3: Vec<_> = trace.stage(3).collect();
        let mut decoder_layers = Vec::with_capacity(self.decoder_depth);
        let mut next = 0;
        for layer in 0..self.decoder_depth {
            if let Some(entry) = stage3.get(next) {
                if entry.layer_idx == Some(layer) {
                    if entry.tokens_before as u64 != live {
                        return Err(PruneError::InvalidTrace(format!(
                            "decoder layer {layer}: {} tokens recorded, {live} live",
                            entry.tokens_before
                        )));
                    }
                    live = entry.tokens_after as u64;
                    next += 1;
                }
            }
            decoder_layers.push(live);
        }
        if next != stage3.len() {
            return Err(PruneError::InvalidTrace("stage-3 entries beyond decoder depth".into()));
        }
        Ok(TokenProfile {
            encoder_blocks,
            projected,
            fused,
            decoder_layers,
        })
    }

    pub fn pipeline_cost(&self, trace: &PruneTrace) -> Result<CostReport> {
        self.report(&self.profile_from_trace(trace)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub per_stage_flops: BTreeMap<String, u64>,
    pub total_flops: u64,
    pub baseline_total: u64,
    pub reduction_fraction: f64,
}

impl CostReport {
    pub fn new(per_stage_flops: BTreeMap<String, u64>, baseline_total: u64) -> Self {
        let total_flops = per_stage_flops.values().sum();
        let reduction_fraction = if baseline_total == 0 {
            0.0
        } else {
            1.0 - total_flops as f64 / baseline_total as f64
        };
        Self {
            convention: CONVENTION.to_string(),
            per_stage_flops,
            total_flops,
            baseline_total,
            reduction_fraction,
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.convention)?;
        writeln!(f, "{:<12} {:>22} {:>8}", "stage", "flops", "share")?;
        for (stage, v) in &self.per_stage_flops {
            let share = if self.total_flops == 0 { 0.0 } else { *v as f64 / self.total_flops as f64 };
            writeln!(f, "{stage:<12} {v:>22} {:>7.1}%", 100.0 * share)?;
        }
        writeln!(f, "{:<12} {:>22}", "total", self.total_flops)?;
        writeln!(f, "{:<12} {:>22}", "baseline", self.baseline_total)?;
        write!(f, "{:<12} {:>21.2}%", "reduction", 100.0 * self.reduction_fraction)
    }
}

/// Average visual tokens per decoder layer.
pub fn average_visual_tokens(layer_counts: &[u64]) -> f64 {
    if layer_counts.is_empty() {
        return 0.0;
    }
    layer_counts.iter().sum::<u64>() as f64 / layer_counts.len() as f64
}

/// Decoder visual counts: `initial` before the first prune layer, then
/// `counts[i]` from `schedule[i]` onward.
pub fn staged_counts(depth: usize, initial: u64, schedule: &[usize], counts: &[u64]) -> Vec<u64> {
    let mut live = initial;
    let mut next = 0;
    (0..depth)
        .map(|layer| {
            if schedule.get(next) == Some(&layer) {
                live = counts[next];
                next += 1;
            }
            live
        })
        .collect()
}

/// Four ViT-L/14 style encoders at 1024 tokens each feeding a 32-layer,
/// 4096-wide decoder that sees 1024 channel-fused visual tokens unpruned.
/// The pruned profile keeps 5/6, 2/3 and about 1/2 of each encoder's tokens
/// after its three phases, 576 fused tokens, and the adaptive decoder
/// profile 396/170/76 from layers 4/12/20.
pub fn reference_scenario(text_tokens: u64) -> (CostModel, TokenProfile) {
    let vit = BlockShape {
        dim: 1024,
        mlp_dim: 4096,
        heads: 16,
    };
    let names = ["clip", "convnext", "pix2struct", "eva02"];
    let encoders: Vec<EncoderCost> = names
        .iter()
        .map(|n| EncoderCost {
            encoder_id: n.to_string(),
            shape: vit,
            num_blocks: 24,
            token_count: 1024,
            input_dim: 3 * 14 * 14,
            extra_tokens: 1,
            projector_hidden: 4096,
            projector_out: 4096,
            prune_blocks: vec![7, 15, 23],
        })
        .collect();
    let model = CostModel {
        encoders,
        decoder: BlockShape {
            dim: 4096,
            mlp_dim: 11008,
            heads: 32,
        },
        decoder_depth: 32,
        text_tokens,
        baseline_decoder_visual: Some(1024),
        fusion_scoring: true,
    };
    let per_block: Vec<u64> = (0..24)
        .map(|b| match b {
            0..=7 => 1024,
            8..=15 => 853,
            _ => 683,
        })
        .collect();
    let profile = TokenProfile {
        encoder_blocks: vec![per_block; 4],
        projected: vec![530; 4],
        fused: 4 * 530,
        decoder_layers: staged_counts(32, 576, &[4, 12, 20], &[396, 170, 76]),
    };
    (model, profile)
}
