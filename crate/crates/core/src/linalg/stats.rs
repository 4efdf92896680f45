use std::collections::HashMap;

use ndarray::ArrayView1;

use crate::error::{PruneError, Result};

/// Vectors shorter than this are treated as having no direction.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine similarity in `[-1, 1]`; zero when either vector has no direction.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(PruneError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(PruneError::InvalidInput("non-finite vector entry".into()));
    }
    Ok(cosine_unchecked(ArrayView1::from(u), ArrayView1::from(v)))
}

pub(crate) fn cosine_unchecked(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return 0.0;
    }
    (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(PruneError::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(PruneError::InvalidInput("non-finite logit".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(PruneError::InvalidInput("entropy of an empty distribution".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(PruneError::InvalidInput("probabilities must be finite and >= 0".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PruneError::InvalidInput(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

/// Kendall rank correlation between two orderings of the same index set.
///
/// Each list names items from best to worst. Lists of length 0 or 1 agree
/// trivially and score 1.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(PruneError::InvalidInput("rankings differ in length".into()));
    }
    let n = rank_a.len();
    let pos_b = positions(rank_b)?;
    let pos_a = positions(rank_a)?;
    if pos_a.keys().any(|k| !pos_b.contains_key(k)) {
        return Err(PruneError::InvalidInput("rankings cover different items".into()));
    }
    if n < 2 {
        return Ok(1.0);
    }
    // Walk items in a's order; a pair is concordant when b agrees.
    let in_b: Vec<usize> = rank_a.iter().map(|item| pos_b[item]).collect();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            if in_b[i] < in_b[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

fn positions(rank: &[usize]) -> Result<HashMap<usize, usize>> {
    let mut pos = HashMap::with_capacity(rank.len());
    for (i, &item) in rank.iter().enumerate() {
        if pos.insert(item, i).is_some() {
            return Err(PruneError::InvalidInput(format!("item {item} repeated")));
        }
    }
    Ok(pos)
}
