//! Progressive pruning inside each encoder.
//!
//! Blocks are split into three contiguous phases. Pruning after a phase-0
//! block keeps the tokens least similar to the mean token; pruning in the two
//! deeper phases keeps the tokens the cls query attends to most.

use ndarray::{s, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{BlockOutput, EncoderState};
use crate::error::{PruneError, Result};
use crate::linalg::{cosine_unchecked, digest_values, softmax_in_place, top_k_indices, FeatureMatrix, ScoredIndexList};
use crate::trace::{Criterion, TraceEntry};

/// Phase split and prune locations for one encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub num_blocks: usize,
    /// First block of phase 1 and of phase 2.
    pub phase_boundaries: [usize; 2],
    /// Blocks after which pruning runs, strictly increasing.
    pub prune_blocks: Vec<usize>,
}

impl PhaseSchedule {
    /// Phases of sizes `ceil(B/3)`, `ceil((B - ceil(B/3)) / 2)` and the rest,
    /// pruning after the last block of each.
    pub fn split(num_blocks: usize) -> Result<Self> {
        if num_blocks < 3 {
            return Err(PruneError::InvalidConfig(format!(
                "three phases need at least 3 blocks, got {num_blocks}"
            )));
        }
        let first = num_blocks.div_ceil(3);
        let second = (num_blocks - first).div_ceil(2);
        let b1 = first;
        let b2 = first + second;
        Ok(Self {
            num_blocks,
            phase_boundaries: [b1, b2],
            prune_blocks: vec![b1 - 1, b2 - 1, num_blocks - 1],
        })
    }

    pub fn with_prune_blocks(num_blocks: usize, prune_blocks: Vec<usize>) -> Result<Self> {
        let mut s = Self::split(num_blocks)?;
        if prune_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PruneError::InvalidConfig(format!(
                "prune blocks {prune_blocks:?} are not strictly increasing"
            )));
        }
        if let Some(&b) = prune_blocks.iter().find(|&&b| b >= num_blocks) {
            return Err(PruneError::InvalidConfig(format!(
                "prune block {b} outside 0..{num_blocks}"
            )));
        }
        s.prune_blocks = prune_blocks;
        Ok(s)
    }

    pub fn phase_of(&self, block: usize) -> usize {
        if block < self.phase_boundaries[0] {
            0
        } else if block < self.phase_boundaries[1] {
            1
        } else {
            2
        }
    }

    pub fn criterion_for(&self, block: usize) -> Criterion {
        if self.phase_of(block) == 0 {
            Criterion::AvgSimilarity
        } else {
            Criterion::ClsAttention
        }
    }
}

/// Scores each token by its negated cosine similarity to the mean of the
/// current tokens and keeps the `k` best.
pub fn select_by_avg_similarity(features: &FeatureMatrix, k: usize) -> Result<ScoredIndexList> {
    let scores = avg_similarity_scores(features);
    top_k_indices(&scores, k)
}

pub fn avg_similarity_scores(features: &FeatureMatrix) -> Vec<f64> {
    if features.rows() == 0 {
        return Vec::new();
    }
    let mean: Array1<f64> = features.as_array().mean_axis(Axis(0)).expect("non-empty");
    features
        .as_array()
        .axis_iter(Axis(0))
        .map(|row| -cosine_unchecked(row, mean.view()))
        .collect()
}

/// Head-averaged softmax attention of the cls query over the keys.
pub fn cls_attention_distribution(cls_query: &[f64], keys: &FeatureMatrix, head_dim: usize) -> Result<Vec<f64>> {
    if cls_query.len() != keys.cols() {
        return Err(PruneError::InvalidInput(format!(
            "cls query has {} entries but keys have {} columns",
            cls_query.len(),
            keys.cols()
        )));
    }
    if head_dim == 0 || !keys.cols().is_multiple_of(head_dim) {
        return Err(PruneError::InvalidInput(format!(
            "head_dim {head_dim} does not divide {}",
            keys.cols()
        )));
    }
    let n = keys.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let heads = keys.cols() / head_dim;
    let q = Array1::from(cls_query.to_vec());
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut avg = vec![0.0; n];
    for h in 0..heads {
        let cols = s![h * head_dim..(h + 1) * head_dim];
        let mut logits: Vec<f64> = keys.as_array().slice(s![.., h * head_dim..(h + 1) * head_dim]).dot(&q.slice(cols)).to_vec();
        logits.iter_mut().for_each(|l| *l *= inv_sqrt);
        softmax_in_place(&mut logits);
        avg.iter_mut().zip(&logits).for_each(|(a, p)| *a += p);
    }
    avg.iter_mut().for_each(|a| *a /= heads as f64);
    Ok(avg)
}

/// Keeps the `k` tokens with the largest head-averaged cls attention.
pub fn select_by_cls_attention(
    cls_query: &[f64],
    keys: &FeatureMatrix,
    k: usize,
    head_dim: usize,
) -> Result<ScoredIndexList> {
    let scores = cls_attention_distribution(cls_query, keys, head_dim)?;
    top_k_indices(&scores, k)
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub output: BlockOutput,
    pub entries: Vec<TraceEntry>,
    /// Visual tokens processed by each block.
    pub block_token_counts: Vec<usize>,
}

/// Runs every block of `encoder`, pruning after each scheduled block to the
/// matching budget. Budgets above the live token count are clamped and the
/// clamp is recorded as a warning.
pub fn run_stage1(
    encoder: &EncoderState,
    input: &FeatureMatrix,
    schedule: &PhaseSchedule,
    budgets: &[usize],
) -> Result<Stage1Outcome> {
    if schedule.num_blocks != encoder.num_blocks() {
        return Err(PruneError::InvalidInput(format!(
            "schedule covers {} blocks, encoder has {}",
            schedule.num_blocks,
            encoder.num_blocks()
        )));
    }
    if budgets.len() != schedule.prune_blocks.len() {
        return Err(PruneError::InvalidInput(format!(
            "{} budgets for {} prune blocks",
            budgets.len(),
            schedule.prune_blocks.len()
        )));
    }
    let spec = encoder.spec();
    let mut cur = encoder.embed_input(input)?;
    let mut entries = Vec::new();
    let mut block_token_counts = Vec::with_capacity(encoder.num_blocks());
    let mut next_point = 0;
    for b in 0..encoder.num_blocks() {
        block_token_counts.push(cur.token_count());
        cur = encoder.forward_block(b, &cur)?;
        if schedule.prune_blocks.get(next_point) != Some(&b) {
            continue;
        }
        let requested = budgets[next_point];
        let before = cur.token_count();
        let mut warnings = Vec::new();
        let k = if requested > before {
            warnings.push(format!(
                "budget {requested} exceeds {before} live tokens after block {b}; clamped"
            ));
            before
        } else {
            requested
        };
        let criterion = schedule.criterion_for(b);
        let scores = match criterion {
            Criterion::AvgSimilarity => avg_similarity_scores(&cur.features),
            _ => cls_attention_distribution(&cur.cls_query, &cur.keys, spec.head_dim())?,
        };
        let selected = top_k_indices(&scores, k)?;
        cur = cur.retain_rows(&selected.sorted_indices());
        entries.push(TraceEntry {
            stage: 1,
            encoder_id: Some(spec.encoder_id.clone()),
            block_idx: Some(b),
            phase: Some(schedule.phase_of(b)),
            layer_idx: None,
            criterion,
            scores_digest: digest_values(&scores),
            requested,
            kept_indices: cur.kept_global_indices.clone(),
            tokens_before: before,
            tokens_after: cur.token_count(),
            warnings,
            text_guided: None,
        });
        next_point += 1;
    }
    Ok(Stage1Outcome {
        output: cur,
        entries,
        block_token_counts,
    })
}
