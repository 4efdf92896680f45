//! Text-guided pruning inside the decoder.
//!
//! Before each scheduled decoder layer the last instruction token's attention
//! in that layer is read out per head. Heads that put the most mass on visual
//! tokens are kept, tokens are scored by their summed attention over those
//! heads, and the retained count is either fixed or proportional to the
//! selected heads' visual mass.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderContext, Prompt, ToyDecoder};
use crate::error::{PruneError, Result};
use crate::linalg::{digest_values, top_k_indices};
use crate::stage2::FusedTokens;
use crate::trace::{Criterion, RetentionMode, TextGuidedDetail, TraceEntry};

const MASS_TOL: f64 = 1e-9;

/// Attention of the last instruction token to each visual token, per head.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionSnapshot {
    pub layer_idx: usize,
    /// `N x H`, row `i` is visual token `i`.
    pub attn: Array2<f64>,
    pub visual_mass_per_head: Vec<f64>,
    pub text_mass_per_head: Vec<f64>,
}

impl CrossAttentionSnapshot {
    /// Builds a snapshot from visual attention (`N x H`) and the mass each
    /// head puts on non-visual positions. Per-head totals must be 1.
    pub fn new(layer_idx: usize, attn: Array2<f64>, text_mass_per_head: Vec<f64>) -> Result<Self> {
        if attn.ncols() == 0 || text_mass_per_head.len() != attn.ncols() {
            return Err(PruneError::InvalidInput(format!(
                "snapshot has {} heads but {} text masses",
                attn.ncols(),
                text_mass_per_head.len()
            )));
        }
        if attn.iter().chain(&text_mass_per_head).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PruneError::InvalidInput("attention values must be finite and >= 0".into()));
        }
        let visual_mass_per_head: Vec<f64> = attn.sum_axis(Axis(0)).to_vec();
        for (h, (v, t)) in visual_mass_per_head.iter().zip(&text_mass_per_head).enumerate() {
            if (v + t - 1.0).abs() > MASS_TOL {
                return Err(PruneError::InvalidInput(format!("head {h} attention sums to {}", v + t)));
            }
        }
        Ok(Self {
            layer_idx,
            attn,
            visual_mass_per_head,
            text_mass_per_head,
        })
    }

    /// Splits full attention rows (one per head, visual positions first).
    pub fn from_rows(layer_idx: usize, rows: &[Vec<f64>], visual_len: usize) -> Result<Self> {
        let heads = rows.len();
        let mut attn = Array2::zeros((visual_len, heads));
        let mut text = Vec::with_capacity(heads);
        for (h, row) in rows.iter().enumerate() {
            if row.len() < visual_len {
                return Err(PruneError::InvalidInput(format!(
                    "attention row has {} positions, fewer than {visual_len} visual tokens",
                    row.len()
                )));
            }
            for i in 0..visual_len {
                attn[[i, h]] = row[i];
            }
            text.push(row[visual_len..].iter().sum());
        }
        Self::new(layer_idx, attn, text)
    }

    pub fn num_tokens(&self) -> usize {
        self.attn.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.attn.ncols()
    }
}

/// Per-head visual attention value: total attention mass on visual tokens.
pub fn visual_attention_value(snapshot: &CrossAttentionSnapshot) -> Vec<f64> {
    snapshot.visual_mass_per_head.clone()
}

/// Heads with the `k_heads` largest VAVs, in descending VAV order.
pub fn select_heads(vav: &[f64], k_heads: usize) -> Result<Vec<usize>> {
    Ok(top_k_indices(vav, k_heads)?.indices())
}

/// Per-token attention summed over the selected heads. Heads are added in
/// ascending index order so the result does not depend on selection order.
pub fn importance_scores(snapshot: &CrossAttentionSnapshot, selected_heads: &[usize]) -> Result<Vec<f64>> {
    let mut heads = selected_heads.to_vec();
    heads.sort_unstable();
    if heads.windows(2).any(|w| w[0] == w[1]) {
        return Err(PruneError::InvalidInput("selected heads repeat".into()));
    }
    if let Some(&h) = heads.last() {
        if h >= snapshot.num_heads() {
            return Err(PruneError::InvalidInput(format!(
                "head {h} out of range for {} heads",
                snapshot.num_heads()
            )));
        }
    }
    Ok(snapshot
        .attn
        .axis_iter(Axis(0))
        .map(|row| heads.iter().fold(0.0, |acc, &h| acc + row[h]))
        .collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(PruneError::InvalidConfig(format!("lambda must be finite and > 0, got {lambda}")));
    }
    Ok(())
}

/// `round_half_up(lambda * contribution)` clamped to `[min_keep, n_tokens]`;
/// when `min_keep > n_tokens` every token is kept.
pub fn retained_count_for(contribution: f64, lambda: f64, n_tokens: usize, min_keep: usize) -> Result<usize> {
    check_lambda(lambda)?;
    let raw = (lambda * contribution + 0.5).floor();
    let raw = if raw.is_finite() && raw > 0.0 { raw } else { 0.0 };
    let floor = min_keep.min(n_tokens);
    let k = if raw >= n_tokens as f64 { n_tokens } else { raw as usize };
    Ok(k.clamp(floor, n_tokens))
}

/// Retained count from the selected heads' VAV sum.
pub fn adaptive_retained_count(
    vav: &[f64],
    selected_heads: &[usize],
    lambda: f64,
    n_tokens: usize,
    min_keep: usize,
) -> Result<usize> {
    check_lambda(lambda)?;
    let contribution = selected_contribution(vav, selected_heads)?;
    retained_count_for(contribution, lambda, n_tokens, min_keep)
}

fn selected_contribution(vav: &[f64], selected_heads: &[usize]) -> Result<f64> {
    let mut heads = selected_heads.to_vec();
    heads.sort_unstable();
    heads.iter().try_fold(0.0, |acc, &h| {
        vav.get(h)
            .map(|v| acc + v)
            .ok_or_else(|| PruneError::InvalidInput(format!("head {h} out of range for {} heads", vav.len())))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionDecision {
    pub selected_heads: Vec<usize>,
    pub importance: Vec<f64>,
    pub retained_count: usize,
    pub lambda: Option<f64>,
    /// Snapshot rows kept, ascending.
    pub kept_indices: Vec<usize>,
}

/// How many tokens a prune point keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Retention {
    Fixed(usize),
    Adaptive { lambda: f64, min_keep: usize },
}

/// Head filtering, scoring and selection on one snapshot. Fixed counts above
/// the token count are clamped.
pub fn decide(snapshot: &CrossAttentionSnapshot, k_heads: usize, retention: Retention) -> Result<RetentionDecision> {
    let vav = visual_attention_value(snapshot);
    let selected_heads = select_heads(&vav, k_heads)?;
    let importance = importance_scores(snapshot, &selected_heads)?;
    let n = snapshot.num_tokens();
    let (retained_count, lambda) = match retention {
        Retention::Fixed(k) => (k.min(n), None),
        Retention::Adaptive { lambda, min_keep } => (
            adaptive_retained_count(&vav, &selected_heads, lambda, n, min_keep)?,
            Some(lambda),
        ),
    };
    let kept_indices = top_k_indices(&importance, retained_count)?.sorted_indices();
    Ok(RetentionDecision {
        selected_heads,
        importance,
        retained_count,
        lambda,
        kept_indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Config {
    /// Decoder layers before whose input pruning runs.
    pub schedule: Vec<usize>,
    pub k_heads: usize,
    pub mode: RetentionMode,
    pub fixed_counts: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub min_keep: usize,
}

impl Stage3Config {
    pub fn validate(&self, depth: usize, heads: usize) -> Result<()> {
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PruneError::InvalidConfig("decoder prune layers must be strictly increasing".into()));
        }
        if let Some(&last) = self.schedule.last() {
            if last >= depth {
                return Err(PruneError::InvalidConfig(format!(
                    "prune layer {last} is beyond decoder depth {depth}"
                )));
            }
        }
        if self.k_heads == 0 || self.k_heads > heads {
            return Err(PruneError::InvalidConfig(format!(
                "k_heads must be in 1..={heads}, got {}",
                self.k_heads
            )));
        }
        match self.mode {
            RetentionMode::Fixed => {
                if self.fixed_counts.len() != self.schedule.len() {
                    return Err(PruneError::InvalidConfig(format!(
                        "{} fixed counts for {} prune layers",
                        self.fixed_counts.len(),
                        self.schedule.len()
                    )));
                }
                if self.fixed_counts.windows(2).any(|w| w[1] > w[0]) {
                    return Err(PruneError::InvalidConfig("fixed counts must be non-increasing".into()));
                }
            }
            RetentionMode::Adaptive => {
                if self.lambdas.len() != self.schedule.len() {
                    return Err(PruneError::InvalidConfig(format!(
                        "{} lambdas for {} prune layers",
                        self.lambdas.len(),
                        self.schedule.len()
                    )));
                }
                for &l in &self.lambdas {
                    check_lambda(l)?;
                }
            }
        }
        Ok(())
    }

    fn retention(&self, point: usize) -> Retention {
        match self.mode {
            RetentionMode::Fixed => Retention::Fixed(self.fixed_counts[point]),
            RetentionMode::Adaptive => Retention::Adaptive {
                lambda: self.lambdas[point],
                min_keep: self.min_keep,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage3Outcome {
    pub kept: FusedTokens,
    pub entries: Vec<TraceEntry>,
    pub decisions: Vec<RetentionDecision>,
    pub snapshots: Vec<CrossAttentionSnapshot>,
    /// Visual tokens entering each decoder layer.
    pub layer_visual_counts: Vec<usize>,
    /// Decoder state after the last layer that ran.
    pub context: DecoderContext,
}

/// Runs the decoder over `visual ∥ prompt`, pruning visual tokens before each
/// scheduled layer. With `stop_after_last_prune` the layers after the final
/// prune point are skipped; their visual counts are still reported.
pub fn run_stage3(
    visual: &FusedTokens,
    decoder: &ToyDecoder,
    prompt: &Prompt,
    config: &Stage3Config,
    stop_after_last_prune: bool,
) -> Result<Stage3Outcome> {
    config.validate(decoder.depth(), decoder.num_heads())?;
    let mut ctx = DecoderContext::new(visual.features.clone(), prompt)?;
    let mut kept = visual.clone();
    let mut entries = Vec::new();
    let mut decisions = Vec::new();
    let mut snapshots = Vec::new();
    let mut layer_visual_counts = Vec::with_capacity(decoder.depth());
    let mut next = 0;
    for layer in 0..decoder.depth() {
        if config.schedule.get(next) == Some(&layer) {
            let (entry, decision, snapshot) = prune_at(decoder, layer, &mut ctx, &mut kept, config, next)
                .map_err(|e| e.in_stage("stage 3", next))?;
            entries.push(entry);
            decisions.push(decision);
            snapshots.push(snapshot);
            next += 1;
        }
        layer_visual_counts.push(ctx.visual_len());
        if stop_after_last_prune && next == config.schedule.len() {
            let n = ctx.visual_len();
            layer_visual_counts.resize(decoder.depth(), n);
            break;
        }
        decoder.forward_layer(layer, &mut ctx)?;
    }
    Ok(Stage3Outcome {
        kept,
        entries,
        decisions,
        snapshots,
        layer_visual_counts,
        context: ctx,
    })
}

fn prune_at(
    decoder: &ToyDecoder,
    layer: usize,
    ctx: &mut DecoderContext,
    kept: &mut FusedTokens,
    config: &Stage3Config,
    point: usize,
) -> Result<(TraceEntry, RetentionDecision, CrossAttentionSnapshot)> {
    let rows = decoder.last_token_attention(layer, ctx)?;
    let snapshot = CrossAttentionSnapshot::from_rows(layer, &rows, ctx.visual_len())?;
    let retention = config.retention(point);
    let decision = decide(&snapshot, config.k_heads, retention)?;
    let before = ctx.visual_len();
    let mut warnings = Vec::new();
    let requested = match retention {
        Retention::Fixed(k) => {
            if k > before {
                warnings.push(format!(
                    "fixed count {k} exceeds {before} visual tokens at layer {layer}; clamped"
                ));
            }
            k
        }
        Retention::Adaptive { .. } => decision.retained_count,
    };
    ctx.retain_visual(&decision.kept_indices);
    *kept = kept.retain_rows(&decision.kept_indices);
    let vav = visual_attention_value(&snapshot);
    let contribution = selected_contribution(&vav, &decision.selected_heads)?;
    let entry = TraceEntry {
        stage: 3,
        encoder_id: None,
        block_idx: None,
        phase: Some(point),
        layer_idx: Some(layer),
        criterion: Criterion::HeadFilteredAttention,
        scores_digest: digest_values(&decision.importance),
        requested,
        kept_indices: kept.row_ids.clone(),
        tokens_before: before,
        tokens_after: kept.rows(),
        warnings,
        text_guided: Some(TextGuidedDetail {
            mode: config.mode,
            vav,
            selected_heads: decision.selected_heads.clone(),
            visual_contribution: contribution,
            lambda: decision.lambda,
            retained_count: decision.retained_count,
        }),
    };
    Ok((entry, decision, snapshot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn snap(attn: Array2<f64>) -> CrossAttentionSnapshot {
        let text = attn.sum_axis(Axis(0)).mapv(|v| 1.0 - v).to_vec();
        CrossAttentionSnapshot::new(0, attn, text).unwrap()
    }

    #[test]
    fn vav_extremes() {
        let all_visual = snap(array![[0.5, 1.0], [0.5, 0.0]]);
        assert_eq!(visual_attention_value(&all_visual), vec![1.0, 1.0]);
        let s = CrossAttentionSnapshot::new(0, array![[0.0], [0.0]], vec![1.0]).unwrap();
        assert_eq!(visual_attention_value(&s), vec![0.0]);
    }

    #[test]
    fn snapshot_rejects_bad_mass() {
        assert!(CrossAttentionSnapshot::new(0, array![[0.5], [0.2]], vec![0.2]).is_err());
        assert!(CrossAttentionSnapshot::new(0, array![[-0.1], [0.2]], vec![0.9]).is_err());
    }

    #[test]
    fn head_selection() {
        assert_eq!(select_heads(&[0.1, 0.9, 0.3], 1).unwrap(), vec![1]);
        assert_eq!(select_heads(&[0.1, 0.9, 0.3], 3).unwrap(), vec![1, 2, 0]);
        assert!(matches!(select_heads(&[0.1], 2), Err(PruneError::InvalidK { .. })));
    }

    #[test]
    fn importance_is_selected_column_sum() {
        let s = snap(array![[0.1, 0.2, 0.3], [0.05, 0.1, 0.2]]);
        assert_eq!(importance_scores(&s, &[1]).unwrap(), vec![0.2, 0.1]);
        let all = importance_scores(&s, &[2, 0, 1]).unwrap();
        assert!((all[0] - 0.6).abs() < 1e-15 && (all[1] - 0.35).abs() < 1e-15);
        assert!(importance_scores(&s, &[3]).is_err());
    }

    #[test]
    fn retained_count_examples() {
        assert_eq!(adaptive_retained_count(&[0.77], &[0], 512.0, 576, 16).unwrap(), 394);
        assert_eq!(adaptive_retained_count(&[0.0, 0.0], &[0, 1], 512.0, 576, 16).unwrap(), 16);
        assert_eq!(adaptive_retained_count(&[0.5], &[0], 1e300, 576, 16).unwrap(), 576);
        assert_eq!(retained_count_for(2.5, 1.0, 10, 0).unwrap(), 3);
        assert_eq!(retained_count_for(1.0, 1.0, 4, 16).unwrap(), 4);
        assert!(matches!(
            adaptive_retained_count(&[0.5], &[0], 0.0, 10, 1),
            Err(PruneError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = Stage3Config {
            schedule: vec![1, 3],
            k_heads: 2,
            mode: RetentionMode::Fixed,
            fixed_counts: vec![4, 2],
            lambdas: vec![],
            min_keep: 1,
        };
        assert!(c.validate(4, 4).is_ok());
        assert!(c.validate(3, 4).is_err());
        c.fixed_counts = vec![2, 4];
        assert!(c.validate(4, 4).is_err());
        c.mode = RetentionMode::Adaptive;
        c.lambdas = vec![1.0, -1.0];
        assert!(c.validate(4, 4).is_err());
    }
}
