use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};

/// One selected position and the score that earned it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredIndex {
    pub index: usize,
    pub score: f64,
}

/// Selected positions sorted by score descending, then index ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredIndexList {
    pub entries: Vec<ScoredIndex>,
}

impl ScoredIndexList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices in selection order.
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// Indices in ascending positional order, the order rows are gathered in.
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut idx = self.indices();
        idx.sort_unstable();
        idx
    }
}

/// The `k` highest scores, ties broken by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<ScoredIndexList> {
    if k > scores.len() {
        return Err(PruneError::InvalidK {
            k,
            available: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PruneError::InvalidInput("NaN score".into()));
    }
    let mut entries: Vec<ScoredIndex> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| ScoredIndex { index, score })
        .collect();
    // NaN is excluded above, so partial_cmp is total here and -0.0 ties 0.0.
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are not NaN")
            .then(a.index.cmp(&b.index))
    });
    entries.truncate(k);
    Ok(ScoredIndexList { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_highest() {
        let r = top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap();
        assert_eq!(r.indices(), vec![1, 2]);
    }

    #[test]
    fn ties_by_index() {
        let r = top_k_indices(&[0.3; 5], 3).unwrap();
        assert_eq!(r.indices(), vec![0, 1, 2]);
    }

    #[test]
    fn k_too_large() {
        assert!(matches!(
            top_k_indices(&[1.0], 2),
            Err(PruneError::InvalidK { k: 2, available: 1 })
        ));
    }

    #[test]
    fn k_zero_and_empty() {
        assert!(top_k_indices(&[], 0).unwrap().is_empty());
        assert!(top_k_indices(&[1.0, 2.0], 0).unwrap().is_empty());
    }

    #[test]
    fn signed_zeros_tie() {
        let r = top_k_indices(&[-0.0, 0.0], 1).unwrap();
        assert_eq!(r.indices(), vec![0]);
    }
}
