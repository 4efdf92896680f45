//! Offline feature-map rank estimation and rank-proportional token budgets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{PruneError, Result};
use crate::linalg::{rank_from_singular_values, singular_values, FeatureMatrix};
use crate::stage1::PhaseSchedule;

/// Mean and spread of one encoder's per-block ranks over a probe batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRanks {
    pub encoder_id: String,
    pub token_count: usize,
    pub mean_rank: Vec<f64>,
    pub rank_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub batch_size: usize,
    pub rel_tol: f64,
    pub encoders: Vec<EncoderRanks>,
}

impl RankProfile {
    pub fn encoder(&self, id: &str) -> Option<&EncoderRanks> {
        self.encoders.iter().find(|e| e.encoder_id == id)
    }
}

/// Runs every encoder unpruned over every batch item and records the
/// numerical rank of each block's visual feature map.
///
/// `batch[i][l]` is item `i`'s input to encoder `l`.
pub fn probe_ranks(encoders: &[EncoderState], batch: &[Vec<FeatureMatrix>], rel_tol: f64) -> Result<RankProfile> {
    if batch.is_empty() {
        return Err(PruneError::InvalidInput("probe batch is empty".into()));
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(PruneError::InvalidConfig(format!(
            "rel_tol must lie in (0, 1), got {rel_tol}"
        )));
    }
    if let Some(item) = batch.iter().find(|item| item.len() != encoders.len()) {
        return Err(PruneError::InvalidInput(format!(
            "batch item has {} inputs for {} encoders",
            item.len(),
            encoders.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..encoders.len())
        .flat_map(|l| (0..batch.len()).map(move |i| (l, i)))
        .collect();
    // ranks[job] = per-block ranks; collect keeps job order
    let ranks: Vec<Vec<usize>> = jobs
        .par_iter()
        .map(|&(l, i)| {
            encoders[l]
                .forward_all(&batch[i][l])?
                .iter()
                .map(|out| Ok(rank_from_singular_values(&singular_values(&out.features)?, rel_tol)))
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let encoders_out = encoders
        .iter()
        .enumerate()
        .map(|(l, enc)| {
            let rows = &ranks[l * batch.len()..(l + 1) * batch.len()];
            let blocks = enc.num_blocks();
            let mut mean_rank = Vec::with_capacity(blocks);
            let mut rank_std = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let vals: Vec<f64> = rows.iter().map(|r| r[b] as f64).collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                mean_rank.push(mean);
                rank_std.push(var.sqrt());
            }
            EncoderRanks {
                encoder_id: enc.spec().encoder_id.clone(),
                token_count: enc.spec().token_count,
                mean_rank,
                rank_std,
            }
        })
        .collect();
    Ok(RankProfile {
        batch_size: batch.len(),
        rel_tol,
        encoders: encoders_out,
    })
}

/// Largest spread of per-block mean ranks across several probe profiles of
/// the same encoders, per encoder and block.
pub fn mean_rank_range(profiles: &[RankProfile]) -> Vec<Vec<f64>> {
    let Some(first) = profiles.first() else {
        return Vec::new();
    };
    first
        .encoders
        .iter()
        .enumerate()
        .map(|(l, e)| {
            (0..e.mean_rank.len())
                .map(|b| {
                    let vals = profiles.iter().map(|p| p.encoders[l].mean_rank[b]);
                    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                    hi - lo
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub point_idx: usize,
    /// Phase of the prune block, per encoder.
    pub phases: Vec<usize>,
    /// Prune block, per encoder.
    pub blocks: Vec<usize>,
    pub total: usize,
    pub budgets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub encoder_ids: Vec<String>,
    pub min_tokens_per_encoder: usize,
    pub points: Vec<PrunePoint>,
}

impl BudgetPlan {
    /// Budgets of one encoder across prune points.
    pub fn budgets_for(&self, encoder: usize) -> Vec<usize> {
        self.points.iter().map(|p| p.budgets[encoder]).collect()
    }
}

/// Splits each prune point's total across encoders in proportion to the
/// mean rank of the block being pruned.
///
/// Shares are rounded by largest remainder so they sum to the total exactly.
/// Encoders below `min_tokens_per_encoder` are raised to it at the expense of
/// the largest allocations, and no encoder is given more than it kept at the
/// previous point (or its token count at the first point).
pub fn allocate_budget(
    profile: &RankProfile,
    schedules: &[PhaseSchedule],
    totals: &[usize],
    min_tokens_per_encoder: usize,
) -> Result<BudgetPlan> {
    let l = profile.encoders.len();
    if schedules.len() != l {
        return Err(PruneError::InvalidInput(format!(
            "{} schedules for {l} encoders",
            schedules.len()
        )));
    }
    if let Some(s) = schedules.iter().find(|s| s.prune_blocks.len() != totals.len()) {
        return Err(PruneError::InvalidConfig(format!(
            "schedule with {} prune blocks but {} budget totals",
            s.prune_blocks.len(),
            totals.len()
        )));
    }
    let mut caps: Vec<usize> = profile.encoders.iter().map(|e| e.token_count).collect();
    let mut points = Vec::with_capacity(totals.len());
    for (p, &total) in totals.iter().enumerate() {
        let blocks: Vec<usize> = schedules.iter().map(|s| s.prune_blocks[p]).collect();
        let mut weights = Vec::with_capacity(l);
        for (e, &b) in profile.encoders.iter().zip(&blocks) {
            let r = *e.mean_rank.get(b).ok_or_else(|| {
                PruneError::InvalidInput(format!("no rank for block {b} of `{}`", e.encoder_id))
            })?;
            weights.push(r);
        }
        let budgets = apportion(&weights, total, min_tokens_per_encoder, &caps).map_err(|e| match e {
            PruneError::DegenerateRanks { .. } => PruneError::DegenerateRanks { point: p },
            PruneError::InvalidConfig(m) => PruneError::InvalidConfig(format!("prune point {p}: {m}")),
            other => other,
        })?;
        caps.clone_from(&budgets);
        points.push(PrunePoint {
            point_idx: p,
            phases: schedules.iter().zip(&blocks).map(|(s, &b)| s.phase_of(b)).collect(),
            blocks,
            total,
            budgets,
        });
    }
    Ok(BudgetPlan {
        encoder_ids: profile.encoders.iter().map(|e| e.encoder_id.clone()).collect(),
        min_tokens_per_encoder,
        points,
    })
}

/// Fractional parts closer than this count as ties.
const TIE_GRID: f64 = 1e9;

fn quantize(x: f64) -> i64 {
    (x * TIE_GRID).round() as i64
}

/// Integer split of `total` proportional to `weights` with per-slot lower
/// bound `min_each` and upper bounds `caps`.
pub fn apportion(weights: &[f64], total: usize, min_each: usize, caps: &[usize]) -> Result<Vec<usize>> {
    let l = weights.len();
    if l == 0 {
        return Err(PruneError::InvalidInput("nothing to apportion between".into()));
    }
    if caps.len() != l {
        return Err(PruneError::InvalidInput("caps and weights differ in length".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(PruneError::InvalidInput("weights must be finite and >= 0".into()));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(PruneError::DegenerateRanks { point: 0 });
    }
    if total < l * min_each {
        return Err(PruneError::InvalidConfig(format!(
            "total {total} cannot give {l} encoders {min_each} tokens each"
        )));
    }
    if let Some(i) = caps.iter().position(|&c| c < min_each) {
        return Err(PruneError::InvalidConfig(format!(
            "encoder {i} can hold at most {} tokens, below the minimum {min_each}",
            caps[i]
        )));
    }
    if caps.iter().sum::<usize>() < total {
        return Err(PruneError::InvalidConfig(format!(
            "total {total} exceeds the {} tokens available",
            caps.iter().sum::<usize>()
        )));
    }

    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = raw.iter().map(|r| (r + r.max(1.0) / TIE_GRID).floor() as usize).collect();
    let remainders: Vec<i64> = raw
        .iter()
        .zip(&alloc)
        .map(|(r, &a)| quantize((r - a as f64).max(0.0)))
        .collect();
    let handed: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(handed)) {
        alloc[i] += 1;
    }

    let raw_q: Vec<i64> = raw.iter().map(|&r| quantize(r)).collect();
    // Floor: take from the largest allocation; among equals, the smallest
    // ideal share, then the highest index.
    for i in 0..l {
        while alloc[i] < min_each {
            let donor = (0..l)
                .filter(|&j| alloc[j] > min_each)
                .max_by(|&a, &b| {
                    alloc[a]
                        .cmp(&alloc[b])
                        .then(raw_q[b].cmp(&raw_q[a]))
                        .then(a.cmp(&b))
                })
                .expect("feasibility checked");
            alloc[donor] -= 1;
            alloc[i] += 1;
        }
    }

    // Caps: move the excess to whoever sits furthest below their ideal share.
    for i in 0..l {
        while alloc[i] > caps[i] {
            let taker = (0..l)
                .filter(|&j| alloc[j] < caps[j])
                .max_by(|&a, &b| {
                    let da = raw_q[a] - quantize(alloc[a] as f64);
                    let db = raw_q[b] - quantize(alloc[b] as f64);
                    da.cmp(&db).then(b.cmp(&a))
                })
                .expect("feasibility checked");
            alloc[i] -= 1;
            alloc[taker] += 1;
        }
    }
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_CAP: [usize; 4] = [usize::MAX / 8; 4];

    #[test]
    fn exact_proportional_split() {
        assert_eq!(apportion(&[100.0, 50.0, 25.0, 25.0], 576, 1, &NO_CAP).unwrap(), vec![288, 144, 72, 72]);
    }

    #[test]
    fn largest_remainder_tie_break() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10, 1, &NO_CAP[..3]).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn floor_rule() {
        let a = apportion(&[5.0, 0.0001, 5.0], 9, 1, &NO_CAP[..3]).unwrap();
        assert_eq!(a[1], 1);
        assert_eq!(a.iter().sum::<usize>(), 9);
        assert_eq!(a, vec![4, 1, 4]);
    }

    #[test]
    fn degenerate_and_infeasible() {
        assert!(matches!(
            apportion(&[0.0, 0.0], 4, 1, &NO_CAP[..2]),
            Err(PruneError::DegenerateRanks { .. })
        ));
        assert!(matches!(apportion(&[1.0, 1.0], 1, 1, &NO_CAP[..2]), Err(PruneError::InvalidConfig(_))));
        assert!(matches!(apportion(&[1.0, 1.0], 10, 1, &[3, 3]), Err(PruneError::InvalidConfig(_))));
    }

    #[test]
    fn caps_push_excess_elsewhere() {
        let a = apportion(&[10.0, 1.0, 1.0], 12, 1, &[4, 10, 10]).unwrap();
        assert_eq!(a, vec![4, 4, 4]);
    }
}
