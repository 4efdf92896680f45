//! Independent reference implementations used as test oracles. Everything
//! here is written with plain loops over `Vec<f64>`, sharing no code with the
//! crate under test.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Sorted set of the `k` winners: `i` wins when fewer than `k` items beat
/// it, where `j` beats `i` on a higher score or an equal score and a lower
/// index.
pub fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let beaten_by = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            beaten_by < k
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Negated cosine similarity of each row to the mean row.
pub fn avg_similarity(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for c in 0..d {
            mean[c] += r[c];
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    rows.iter().map(|r| -cosine(r, &mean)).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Head-averaged softmax of `q_h · k_h / sqrt(dk)` over key rows.
pub fn cls_attention(q: &[f64], keys: &[Vec<f64>], head_dim: usize) -> Vec<f64> {
    let heads = q.len() / head_dim;
    let mut avg = vec![0.0; keys.len()];
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| dot(&q[lo..hi], &k[lo..hi]) / (head_dim as f64).sqrt())
            .collect();
        for (a, p) in avg.iter_mut().zip(softmax(&logits)) {
            *a += p;
        }
    }
    avg.iter().map(|a| a / heads as f64).collect()
}

/// Pairwise sum of cosine similarity to rows of other encoders.
pub fn mutual_redundancy(rows: &[Vec<f64>], encoder: &[usize]) -> Vec<f64> {
    (0..rows.len())
        .map(|i| {
            (0..rows.len())
                .filter(|&j| encoder[j] != encoder[i])
                .map(|j| cosine(&rows[i], &rows[j]))
                .sum()
        })
        .collect()
}

/// Rank by Gaussian elimination with partial pivoting; pivots below
/// `tol * max |a|` count as zero.
pub fn elimination_rank(rows: &[Vec<f64>], tol: f64) -> usize {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let n = a.len();
    if n == 0 {
        return 0;
    }
    let d = a[0].len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for c in 0..d {
        if rank == n {
            break;
        }
        let (p, pv) = (rank..n)
            .map(|r| (r, a[r][c].abs()))
            .fold((rank, -1.0), |best, x| if x.1 > best.1 { x } else { best });
        if pv <= tol * scale {
            continue;
        }
        a.swap(rank, p);
        for r in rank + 1..n {
            let f = a[r][c] / a[rank][c];
            let pivot = a[rank].clone();
            for (x, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                *x -= f * p;
            }
        }
        rank += 1;
    }
    rank
}

/// Nuclear norm from the eigenvalues of `[[0, A], [Aᵀ, 0]]`, which are
/// `±σᵢ` plus zeros.
pub fn eigen_nuclear_norm(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let mut m = DMatrix::<f64>::zeros(n + d, n + d);
    for i in 0..n {
        for j in 0..d {
            m[(i, n + j)] = rows[i][j];
            m[(n + j, i)] = rows[i][j];
        }
    }
    let eig = m.symmetric_eigen();
    eig.eigenvalues.iter().map(|v| v.abs()).sum::<f64>() / 2.0
}

/// τ of a permutation against the identity via inversion count.
pub fn tau_by_inversions(perm: &[usize]) -> f64 {
    let n = perm.len();
    if n < 2 {
        return 1.0;
    }
    let mut inv = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if perm[i] > perm[j] {
                inv += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    (pairs as f64 - 2.0 * inv as f64) / pairs as f64
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Multiply and elementwise-op counts of a naive pre-norm block forward.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub mults: u64,
    pub elementwise: u64,
}

/// Runs a scalar transformer block over `x` (n x d) with random weights and
/// counts every multiply in the matrix products plus every softmax, norm
/// and activation element.
pub fn instrumented_block(x: &[Vec<f64>], heads: usize, d_ff: usize, seed: u64) -> OpCount {
    let n = x.len();
    let d = if n == 0 { 0 } else { x[0].len() };
    let mut c = OpCount::default();
    if n == 0 {
        return c;
    }
    let mut r = rng(seed);
    let mut w = |rows: usize, cols: usize| gaussian_rows(&mut r, rows, cols);
    let (wq, wk, wv, wo) = (w(d, d), w(d, d), w(d, d), w(d, d));
    let (w1, w2) = (w(d, d_ff), w(d_ff, d));

    let matmul = |a: &[Vec<f64>], b: &[Vec<f64>], c: &mut OpCount| -> Vec<Vec<f64>> {
        let inner = b.len();
        let cols = b[0].len();
        a.iter()
            .map(|row| {
                (0..cols)
                    .map(|j| {
                        let mut s = 0.0;
                        for k in 0..inner {
                            s += row[k] * b[k][j];
                            c.mults += 1;
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let norm = |a: &[Vec<f64>], c: &mut OpCount| -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / row.len() as f64;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
                c.elementwise += row.len() as u64;
                row.iter().map(|x| (x - m) / (v + 1e-5).sqrt()).collect()
            })
            .collect()
    };

    let h = norm(x, &mut c);
    let q = matmul(&h, &wq, &mut c);
    let k = matmul(&h, &wk, &mut c);
    let v = matmul(&h, &wv, &mut c);
    let dk = d / heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..heads {
        let lo = head * dk;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for t in lo..lo + dk {
                        s += q[i][t] * k[j][t];
                        c.mults += 1;
                    }
                    s
                })
                .collect();
            let p = softmax(&logits);
            c.elementwise += n as u64;
            for t in lo..lo + dk {
                for j in 0..n {
                    ctx[i][t] += p[j] * v[j][t];
                    c.mults += 1;
                }
            }
        }
    }
    let attn = matmul(&ctx, &wo, &mut c);
    let x1: Vec<Vec<f64>> = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let h2 = norm(&x1, &mut c);
    let hidden: Vec<Vec<f64>> = matmul(&h2, &w1, &mut c)
        .into_iter()
        .map(|row| {
            c.elementwise += row.len() as u64;
            row.into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect();
    let _out = matmul(&hidden, &w2, &mut c);
    c
}
