//! Audit record of every selection decision in a pipeline run.

use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Least similar to the mean token.
    AvgSimilarity,
    /// Most attended by the cls query.
    ClsAttention,
    /// Least redundant with other encoders' tokens.
    MutualRedundancy,
    /// Most attended by the last instruction token over the selected heads.
    HeadFilteredAttention,
}

/// How the stage-3 retained count was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetentionMode {
    #[default]
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGuidedDetail {
    pub mode: RetentionMode,
    pub vav: Vec<f64>,
    pub selected_heads: Vec<usize>,
    /// Sum of the selected heads' VAV.
    pub visual_contribution: f64,
    pub lambda: Option<f64>,
    pub retained_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: u8,
    pub encoder_id: Option<String>,
    pub block_idx: Option<usize>,
    pub phase: Option<usize>,
    pub layer_idx: Option<usize>,
    pub criterion: Criterion,
    pub scores_digest: String,
    /// Budget before any clamping.
    pub requested: usize,
    /// Stage 1: original token positions. Stages 2 and 3: fused row ids.
    pub kept_indices: Vec<usize>,
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_guided: Option<TextGuidedDetail>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruneTrace {
    pub entries: Vec<TraceEntry>,
}

impl PruneTrace {
    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    pub fn encoder_entries<'a>(&'a self, encoder_id: &'a str) -> impl Iterator<Item = &'a TraceEntry> {
        self.stage(1).filter(move |e| e.encoder_id.as_deref() == Some(encoder_id))
    }

    /// Checks stage ordering and that token counts chain from one entry to
    /// the next on the same stream.
    pub fn validate(&self) -> Result<()> {
        let mut last_stage = 0u8;
        for (i, e) in self.entries.iter().enumerate() {
            if !(1..=3).contains(&e.stage) {
                return Err(PruneError::InvalidTrace(format!("entry {i} has stage {}", e.stage)));
            }
            if e.stage < last_stage {
                return Err(PruneError::InvalidTrace(format!("entry {i} is out of stage order")));
            }
            last_stage = e.stage;
            if e.tokens_after > e.tokens_before || e.kept_indices.len() != e.tokens_after {
                return Err(PruneError::InvalidTrace(format!("entry {i} has inconsistent counts")));
            }
            let mut sorted = e.kept_indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != e.kept_indices.len() {
                return Err(PruneError::InvalidTrace(format!("entry {i} keeps an index twice")));
            }
        }

        let mut stage1_final = 0usize;
        let mut streams: Vec<(&str, usize)> = Vec::new();
        for e in self.stage(1) {
            let id = e
                .encoder_id
                .as_deref()
                .ok_or_else(|| PruneError::InvalidTrace("stage-1 entry without encoder id".into()))?;
            match streams.iter_mut().find(|(s, _)| *s == id) {
                Some((_, after)) => {
                    if *after != e.tokens_before {
                        return Err(PruneError::InvalidTrace(format!(
                            "encoder `{id}`: {} tokens after one prune but {} before the next",
                            after, e.tokens_before
                        )));
                    }
                    *after = e.tokens_after;
                }
                None => streams.push((id, e.tokens_after)),
            }
        }
        for (_, after) in &streams {
            stage1_final += after;
        }

        let mut prev: Option<usize> = None;
        for e in self.stage(2) {
            if !streams.is_empty() && prev.is_none() && e.tokens_before != stage1_final {
                return Err(PruneError::InvalidTrace(format!(
                    "fusion saw {} tokens but stage 1 produced {stage1_final}",
                    e.tokens_before
                )));
            }
            prev = Some(e.tokens_after);
        }
        for e in self.stage(3) {
            if let Some(p) = prev {
                if p != e.tokens_before {
                    return Err(PruneError::InvalidTrace(format!(
                        "decoder layer {:?}: {} tokens expected, {} recorded",
                        e.layer_idx, p, e.tokens_before
                    )));
                }
            }
            prev = Some(e.tokens_after);
        }
        Ok(())
    }
}
