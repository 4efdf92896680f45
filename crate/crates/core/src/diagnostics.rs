//! Analysis statistics over recorded attention and ranks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{PruneError, Result};
use crate::linalg::{kendall_tau, shannon_entropy, top_k_indices, FeatureMatrix};
use crate::rank_probe::{mean_rank_range, RankProfile};
use crate::stage1::cls_attention_distribution;

/// Head-averaged cls attention over visual tokens at every block of an
/// unpruned forward pass.
pub fn cls_attention_per_block(encoder: &EncoderState, image: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    let head_dim = encoder.spec().head_dim();
    encoder
        .forward_all(image)?
        .iter()
        .map(|out| cls_attention_distribution(&out.cls_query, &out.keys, head_dim))
        .collect()
}

pub fn attention_entropy_profile(attention: &[Vec<f64>]) -> Result<Vec<f64>> {
    attention.iter().map(|p| shannon_entropy(p)).collect()
}

/// Best-first order of `members`: those in `top` first, each group by
/// descending score with index tie-break.
fn union_order(scores: &[f64], top: &[usize], members: &[usize]) -> Vec<usize> {
    let mut order = members.to_vec();
    order.sort_by(|&i, &j| {
        let ti = !top.contains(&i);
        let tj = !top.contains(&j);
        ti.cmp(&tj)
            .then(scores[j].partial_cmp(&scores[i]).expect("finite scores"))
            .then(i.cmp(&j))
    });
    order
}

/// Kendall τ between the rankings two blocks induce on the union of their
/// top-k token sets. Tokens outside a block's own top-k rank after its
/// top-k members, ordered by that block's attention.
pub fn topk_tau(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PruneError::InvalidInput("attention vectors differ in length".into()));
    }
    let k = k.min(a.len());
    let top_a = top_k_indices(a, k)?.indices();
    let top_b = top_k_indices(b, k)?.indices();
    let mut union: Vec<usize> = top_a.iter().chain(&top_b).copied().collect();
    union.sort_unstable();
    union.dedup();
    kendall_tau(&union_order(a, &top_a, &union), &union_order(b, &top_b, &union))
}

/// τ for every adjacent block pair; `k` is clamped to the token count.
pub fn topk_stability_profile(attention: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if attention.len() < 2 {
        return Err(PruneError::InvalidInput("stability needs at least two blocks".into()));
    }
    attention.windows(2).map(|w| topk_tau(&w[0], &w[1], k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDiagnostics {
    pub encoder_id: String,
    pub entropy: Vec<f64>,
    /// `ln N` per block, the entropy upper bound.
    pub max_entropy: Vec<f64>,
    /// τ between block `b` and `b + 1`.
    pub tau: Vec<f64>,
    /// Cls attention per block the statistics were computed from.
    pub attention: Vec<Vec<f64>>,
}

pub fn encoder_diagnostics(encoder: &EncoderState, image: &FeatureMatrix, k: usize) -> Result<EncoderDiagnostics> {
    let attention = cls_attention_per_block(encoder, image)?;
    Ok(EncoderDiagnostics {
        encoder_id: encoder.spec().encoder_id.clone(),
        entropy: attention_entropy_profile(&attention)?,
        max_entropy: attention.iter().map(|p| (p.len() as f64).ln()).collect(),
        tau: topk_stability_profile(&attention, k)?,
        attention,
    })
}

/// One row per encoder block: `encoder_id,block,entropy,max_entropy,tau_next`.
/// The last block of each encoder leaves `tau_next` empty.
pub fn diagnostics_csv(diags: &[EncoderDiagnostics]) -> String {
    let mut out = String::from("encoder_id,block,entropy,max_entropy,tau_next\n");
    for d in diags {
        for (b, (h, m)) in d.entropy.iter().zip(&d.max_entropy).enumerate() {
            let tau = d.tau.get(b).map(|t| format!("{t:.17e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{b},{h:.17e},{m:.17e},{tau}", d.encoder_id);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VavSummary {
    pub runs: usize,
    pub mean: f64,
    pub max: f64,
}

/// Summary of the selected-head VAV sums of each prompt family. Each run is
/// one per-head VAV vector; its top `k_heads` entries are summed.
pub fn vav_distribution(families: &BTreeMap<String, Vec<Vec<f64>>>, k_heads: usize) -> Result<BTreeMap<String, VavSummary>> {
    families
        .iter()
        .map(|(name, runs)| {
            if runs.is_empty() {
                return Err(PruneError::InvalidInput(format!("family `{name}` has no runs")));
            }
            let sums = runs
                .iter()
                .map(|vav| Ok(top_k_indices(vav, k_heads)?.entries.iter().map(|e| e.score).sum::<f64>()))
                .collect::<Result<Vec<f64>>>()?;
            let mean = sums.iter().sum::<f64>() / sums.len() as f64;
            let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((
                name.clone(),
                VavSummary {
                    runs: runs.len(),
                    mean,
                    max,
                },
            ))
        })
        .collect()
}

/// Per encoder, the largest spread in mean rank across profiles at any block.
pub fn rank_stability(profiles: &[RankProfile]) -> BTreeMap<String, f64> {
    let Some(first) = profiles.first() else {
        return BTreeMap::new();
    };
    first
        .encoders
        .iter()
        .zip(mean_rank_range(profiles))
        .map(|(e, ranges)| (e.encoder_id.clone(), ranges.into_iter().fold(0.0, f64::max)))
        .collect()
}
