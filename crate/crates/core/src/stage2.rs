//! Post-projection fusion and cross-encoder redundancy pruning.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::block::{ensure_finite, gelu};
use crate::error::{PruneError, Result};
use crate::linalg::{digest_values, nuclear_norm, top_k_indices, FeatureMatrix, ZERO_NORM};
use crate::rank_probe::apportion;
use crate::rng::{self, Role};
use crate::trace::{Criterion, TraceEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub encoder_id: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub seed: u64,
}

/// Two-layer MLP mapping one encoder's tokens into the shared space.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: ProjectorSpec,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Projector {
    pub fn new(spec: ProjectorSpec) -> Result<Self> {
        if spec.in_dim == 0 || spec.hidden_dim == 0 || spec.out_dim == 0 {
            return Err(PruneError::InvalidConfig(format!(
                "projector `{}` has a zero dimension",
                spec.encoder_id
            )));
        }
        let w1 = rng::gaussian(spec.seed, 0, Role::ProjectorIn, spec.in_dim, spec.hidden_dim, 1.0 / (spec.in_dim as f64).sqrt());
        let w2 = rng::gaussian(spec.seed, 0, Role::ProjectorOut, spec.hidden_dim, spec.out_dim, 1.0 / (spec.hidden_dim as f64).sqrt());
        let b = rng::gaussian(spec.seed, 0, Role::ProjectorBias, 2, spec.hidden_dim.max(spec.out_dim), 0.02);
        let b1 = b.row(0).slice(ndarray::s![..spec.hidden_dim]).to_owned();
        let b2 = b.row(1).slice(ndarray::s![..spec.out_dim]).to_owned();
        Ok(Self { spec, w1, b1, w2, b2 })
    }

    pub fn spec(&self) -> &ProjectorSpec {
        &self.spec
    }

    pub fn project(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.cols() != self.spec.in_dim {
            return Err(PruneError::InvalidInput(format!(
                "projector `{}` expects {} columns, got {}",
                self.spec.encoder_id,
                self.spec.in_dim,
                features.cols()
            )));
        }
        let hidden = (features.as_array().dot(&self.w1) + &self.b1).mapv(gelu);
        let out = hidden.dot(&self.w2) + &self.b2;
        ensure_finite(&out, "projector")?;
        Ok(FeatureMatrix::from_trusted(out))
    }
}

/// Where a fused row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOrigin {
    /// Position of the encoder in the fusion order.
    pub encoder: usize,
    /// Original token position inside that encoder.
    pub token: usize,
}

/// Token-wise concatenation of every encoder's projected tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokens {
    pub encoder_ids: Vec<String>,
    pub features: FeatureMatrix,
    pub origin: Vec<TokenOrigin>,
    /// Row id in the full fused sequence, for rows surviving a prune.
    pub row_ids: Vec<usize>,
}

impl FusedTokens {
    /// `parts` holds `(encoder id, projected tokens, original positions)`.
    pub fn concat(parts: &[(String, FeatureMatrix, Vec<usize>)]) -> Result<Self> {
        let mats: Vec<&FeatureMatrix> = parts.iter().map(|(_, m, _)| m).collect();
        let features = FeatureMatrix::vstack(&mats)?;
        let mut origin = Vec::with_capacity(features.rows());
        for (e, (id, m, idx)) in parts.iter().enumerate() {
            if idx.len() != m.rows() {
                return Err(PruneError::InvalidInput(format!(
                    "encoder `{id}`: {} rows but {} origin indices",
                    m.rows(),
                    idx.len()
                )));
            }
            origin.extend(idx.iter().map(|&token| TokenOrigin { encoder: e, token }));
        }
        let n = features.rows();
        Ok(Self {
            encoder_ids: parts.iter().map(|(id, _, _)| id.clone()).collect(),
            features,
            origin,
            row_ids: (0..n).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn num_encoders(&self) -> usize {
        self.encoder_ids.len()
    }

    /// Keeps the given rows, which must be ascending positions.
    pub fn retain_rows(&self, rows: &[usize]) -> FusedTokens {
        FusedTokens {
            encoder_ids: self.encoder_ids.clone(),
            features: self.features.select_rows(rows),
            origin: rows.iter().map(|&r| self.origin[r]).collect(),
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
        }
    }

    pub fn count_per_encoder(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_encoders()];
        for o in &self.origin {
            c[o.encoder] += 1;
        }
        c
    }
}

fn unit_rows(m: &FeatureMatrix) -> Array2<f64> {
    let mut u = m.as_array().clone();
    for mut row in u.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n < ZERO_NORM {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / n);
        }
    }
    u
}

fn encoder_sums(unit: &Array2<f64>, origin: &[TokenOrigin], encoders: usize) -> Array2<f64> {
    let mut sums = Array2::zeros((encoders, unit.ncols()));
    for (row, o) in unit.axis_iter(Axis(0)).zip(origin) {
        let mut s = sums.row_mut(o.encoder);
        s += &row;
    }
    sums
}

/// Summed cosine similarity of each row to every row from other encoders.
///
/// Cosine similarity is linear in the unit vectors, so each score is one dot
/// product with the summed unit vectors of the other encoders.
pub fn mutual_redundancy(fused: &FusedTokens) -> Vec<f64> {
    let unit = unit_rows(&fused.features);
    let sums = encoder_sums(&unit, &fused.origin, fused.num_encoders());
    let total: Array1<f64> = sums.sum_axis(Axis(0));
    unit.axis_iter(Axis(0))
        .zip(&fused.origin)
        .map(|(u, o)| {
            let others = &total - &sums.row(o.encoder);
            u.dot(&others)
        })
        .collect()
}

/// Summed cosine similarity of each row to the other rows of its own encoder.
pub fn self_redundancy(fused: &FusedTokens) -> Vec<f64> {
    let unit = unit_rows(&fused.features);
    let sums = encoder_sums(&unit, &fused.origin, fused.num_encoders());
    unit.axis_iter(Axis(0))
        .zip(&fused.origin)
        .map(|(u, o)| u.dot(&sums.row(o.encoder)) - u.dot(&u))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub kept: FusedTokens,
    pub entry: TraceEntry,
}

fn fusion_entry(fused: &FusedTokens, kept: &FusedTokens, scores: &[f64], requested: usize, warnings: Vec<String>) -> TraceEntry {
    TraceEntry {
        stage: 2,
        encoder_id: None,
        block_idx: None,
        phase: None,
        layer_idx: None,
        criterion: Criterion::MutualRedundancy,
        scores_digest: digest_values(scores),
        requested,
        kept_indices: kept.row_ids.clone(),
        tokens_before: fused.rows(),
        tokens_after: kept.rows(),
        warnings,
        text_guided: None,
    }
}

/// Keeps the `k` rows with the lowest mutual redundancy, scored once on the
/// full fused set.
pub fn cooperative_prune(fused: &FusedTokens, k: usize) -> Result<PruneOutcome> {
    let redundancy = mutual_redundancy(fused);
    let neg: Vec<f64> = redundancy.iter().map(|r| -r).collect();
    let selected = top_k_indices(&neg, k)?;
    let kept = fused.retain_rows(&selected.sorted_indices());
    let entry = fusion_entry(fused, &kept, &redundancy, k, Vec::new());
    Ok(PruneOutcome { kept, entry })
}

/// Greedy variant: repeatedly drops the most redundant row and rescores the
/// survivors. Ties drop the highest row index first, so the lowest indices
/// survive as in the single-shot rule.
pub fn cooperative_prune_iterative(fused: &FusedTokens, k: usize) -> Result<PruneOutcome> {
    let n = fused.rows();
    if k > n {
        return Err(PruneError::InvalidK { k, available: n });
    }
    let redundancy = mutual_redundancy(fused);
    let unit = unit_rows(&fused.features);
    let mut sums = encoder_sums(&unit, &fused.origin, fused.num_encoders());
    let mut alive = vec![true; n];
    for _ in 0..(n - k) {
        let total: Array1<f64> = sums.sum_axis(Axis(0));
        let mut worst: Option<(f64, usize)> = None;
        for i in (0..n).filter(|&i| alive[i]) {
            let o = fused.origin[i].encoder;
            let r = unit.row(i).dot(&(&total - &sums.row(o)));
            if worst.is_none_or(|(w, _)| r >= w) {
                worst = Some((r, i));
            }
        }
        let (_, drop) = worst.expect("rows remain");
        alive[drop] = false;
        let o = fused.origin[drop].encoder;
        let mut s = sums.row_mut(o);
        s -= &unit.row(drop);
    }
    let rows: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let kept = fused.retain_rows(&rows);
    let entry = fusion_entry(fused, &kept, &redundancy, k, Vec::new());
    Ok(PruneOutcome { kept, entry })
}

/// Baseline that prunes inside each encoder independently: each encoder
/// keeps a share of `k` proportional to its row count, choosing its rows
/// least similar to its own other rows.
pub fn separate_prune(fused: &FusedTokens, k: usize) -> Result<FusedTokens> {
    let n = fused.rows();
    if k > n {
        return Err(PruneError::InvalidK { k, available: n });
    }
    let counts = fused.count_per_encoder();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let quotas = apportion(&weights, k, 0, &counts)?;
    let scores = self_redundancy(fused);
    let mut rows = Vec::with_capacity(k);
    for (e, &quota) in quotas.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| fused.origin[i].encoder == e).collect();
        let neg: Vec<f64> = members.iter().map(|&i| -scores[i]).collect();
        rows.extend(top_k_indices(&neg, quota)?.indices().into_iter().map(|j| members[j]));
    }
    rows.sort_unstable();
    Ok(fused.retain_rows(&rows))
}

/// Baseline keeping `k` rows chosen uniformly at random from a seeded stream.
pub fn random_prune(fused: &FusedTokens, k: usize, seed: u64) -> Result<FusedTokens> {
    let n = fused.rows();
    if k > n {
        return Err(PruneError::InvalidK { k, available: n });
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::stream(seed, 0, Role::Shuffle));
    rows.truncate(k);
    rows.sort_unstable();
    Ok(fused.retain_rows(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub retained: usize,
    pub nuclear_norm: f64,
}

/// Nuclear norm of the unpruned set and of every pruned variant.
pub fn diversity_report(
    before: &FusedTokens,
    variants: &BTreeMap<String, FusedTokens>,
) -> Result<BTreeMap<String, DiversityRow>> {
    if variants.is_empty() {
        return Err(PruneError::InvalidInput("no variants to compare".into()));
    }
    let mut table = BTreeMap::new();
    table.insert(
        "unpruned".to_string(),
        DiversityRow {
            retained: before.rows(),
            nuclear_norm: nuclear_norm(&before.features)?,
        },
    );
    for (label, v) in variants {
        table.insert(
            label.clone(),
            DiversityRow {
                retained: v.rows(),
                nuclear_norm: nuclear_norm(&v.features)?,
            },
        );
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_encoder() -> FusedTokens {
        FusedTokens::concat(&[
            ("a".into(), FeatureMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), vec![0]),
            (
                "b".into(),
                FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                vec![0, 1],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn redundancy_hand_example() {
        assert_eq!(mutual_redundancy(&two_encoder()), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn single_encoder_scores_zero() {
        let f = FusedTokens::concat(&[(
            "a".into(),
            FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap(),
            vec![0, 1],
        )])
        .unwrap();
        assert!(mutual_redundancy(&f).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn cooperative_hand_example() {
        let out = cooperative_prune(&two_encoder(), 2).unwrap();
        assert_eq!(out.kept.row_ids, vec![0, 2]);
        assert_eq!(out.kept.origin[1], TokenOrigin { encoder: 1, token: 1 });
        let all = cooperative_prune(&two_encoder(), 3).unwrap();
        assert_eq!(all.kept, two_encoder());
        assert!(cooperative_prune(&two_encoder(), 4).is_err());
    }

    #[test]
    fn iterative_matches_on_hand_example() {
        let out = cooperative_prune_iterative(&two_encoder(), 2).unwrap();
        assert_eq!(out.kept.row_ids, vec![0, 2]);
    }

    #[test]
    fn projector_shapes() {
        let p = Projector::new(ProjectorSpec {
            encoder_id: "a".into(),
            in_dim: 4,
            hidden_dim: 8,
            out_dim: 3,
            seed: 1,
        })
        .unwrap();
        let empty = FeatureMatrix::zeros(0, 4).unwrap();
        assert_eq!(p.project(&empty).unwrap().rows(), 0);
        let x = FeatureMatrix::from_rows(&[vec![1.0, 0.5, -0.5, 2.0]]).unwrap();
        assert_eq!(p.project(&x).unwrap(), p.project(&x).unwrap());
        assert_eq!(p.project(&x).unwrap().cols(), 3);
        assert!(p.project(&FeatureMatrix::zeros(1, 3).unwrap()).is_err());
    }

    #[test]
    fn diversity_of_zero_variant() {
        let f = two_encoder();
        let zero = FusedTokens {
            features: FeatureMatrix::zeros(3, 2).unwrap(),
            ..f.clone()
        };
        let mut v = BTreeMap::new();
        v.insert("zero".to_string(), zero);
        v.insert("same".to_string(), f.clone());
        let t = diversity_report(&f, &v).unwrap();
        assert_eq!(t["zero"].nuclear_norm, 0.0);
        assert_eq!(t["same"].nuclear_norm, t["unpruned"].nuclear_norm);
    }

    #[test]
    fn separate_and_random_sizes() {
        let f = two_encoder();
        assert_eq!(separate_prune(&f, 2).unwrap().rows(), 2);
        let r = random_prune(&f, 2, 7).unwrap();
        assert_eq!(r, random_prune(&f, 2, 7).unwrap());
        assert_eq!(r.rows(), 2);
    }
}
