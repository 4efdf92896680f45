//! Pre-norm transformer block shared by the toy encoders and decoder.

use ndarray::{s, Array2, Axis};

use crate::error::{PruneError, Result};
use crate::linalg::softmax_in_place;
use crate::rng::{self, Role};

const LN_EPS: f64 = 1e-5;

/// Per-row layer norm without learned scale or shift.
pub(crate) fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Extra attention behaviour beyond plain bidirectional softmax attention.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct AttentionOptions {
    pub causal: bool,
    /// Additive logit bias for queries at positions `>= prefix` attending to
    /// keys at positions `< prefix`.
    pub prefix_bias: Option<(usize, f64)>,
}

impl AttentionOptions {
    fn bias(&self, query: usize, key: usize) -> f64 {
        match self.prefix_bias {
            Some((prefix, b)) if query >= prefix && key < prefix => b,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub heads: usize,
    /// Multiplies every query; zero gives uniform attention.
    pub logit_scale: f64,
}

/// Result of running one block.
pub(crate) struct BlockPass {
    pub output: Array2<f64>,
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    /// Per-head `n x n` attention, only when requested.
    pub attention: Vec<Array2<f64>>,
}

impl BlockWeights {
    /// Draws a block from the `(seed, layer)` streams. `out_basis`, when
    /// given as `(left, right)`, replaces the attention output and MLP output
    /// projections by low-rank products `left * right`.
    pub fn random(
        seed: u64,
        layer: u64,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        logit_scale: f64,
        out_basis: Option<&Array2<f64>>,
    ) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let s_ff = 1.0 / (mlp_dim as f64).sqrt();
        let (wo, w2) = match out_basis {
            None => (
                rng::gaussian(seed, layer, Role::AttnOut, dim, dim, s),
                rng::gaussian(seed, layer, Role::MlpOut, mlp_dim, dim, s_ff),
            ),
            Some(basis) => {
                // basis is r x dim with orthonormal rows
                let r = basis.nrows();
                let left_o = rng::gaussian(seed, layer, Role::AttnOut, dim, r, s);
                let left_m = rng::gaussian(seed, layer, Role::MlpOut, mlp_dim, r, s_ff);
                let scale = (dim as f64 / r as f64).sqrt();
                (left_o.dot(basis) * scale, left_m.dot(basis) * scale)
            }
        };
        Self {
            wq: rng::gaussian(seed, layer, Role::Query, dim, dim, s),
            wk: rng::gaussian(seed, layer, Role::Key, dim, dim, s),
            wv: rng::gaussian(seed, layer, Role::Value, dim, dim, s),
            wo,
            w1: rng::gaussian(seed, layer, Role::MlpIn, dim, mlp_dim, s),
            w2,
            heads,
            logit_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>, opts: AttentionOptions, keep_attention: bool) -> BlockPass {
        let n = x.nrows();
        let dk = self.head_dim();
        let h = layer_norm(x);
        let q = h.dot(&self.wq) * self.logit_scale;
        let k = h.dot(&self.wk);
        let v = h.dot(&self.wv);
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut ctx = Array2::zeros((n, self.dim()));
        let mut attention = Vec::new();
        for head in 0..self.heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * inv_sqrt;
            for (i, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
                for (j, l) in row.iter_mut().enumerate() {
                    if opts.causal && j > i {
                        *l = f64::NEG_INFINITY;
                    } else {
                        *l += opts.bias(i, j);
                    }
                }
                softmax_in_place(row.as_slice_mut().expect("standard layout"));
            }
            ctx.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            if keep_attention {
                attention.push(logits);
            }
        }
        let x1 = x + &ctx.dot(&self.wo);
        let h2 = layer_norm(&x1);
        let hidden = h2.dot(&self.w1).mapv(gelu);
        let output = x1 + hidden.dot(&self.w2);
        BlockPass {
            output,
            queries: q,
            keys: k,
            attention,
        }
    }

    /// Attention of the last position over every position, one row per head.
    pub fn last_row_attention(&self, x: &Array2<f64>, opts: AttentionOptions) -> Vec<Vec<f64>> {
        let n = x.nrows();
        let dk = self.head_dim();
        let h = layer_norm(x);
        let q_last = h.row(n - 1).dot(&self.wq) * self.logit_scale;
        let k = h.dot(&self.wk);
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        (0..self.heads)
            .map(|head| {
                let qh = q_last.slice(s![head * dk..(head + 1) * dk]);
                let kh = k.slice(s![.., head * dk..(head + 1) * dk]);
                let mut row: Vec<f64> = kh
                    .axis_iter(Axis(0))
                    .enumerate()
                    .map(|(j, kj)| qh.dot(&kj) * inv_sqrt + opts.bias(n - 1, j))
                    .collect();
                softmax_in_place(&mut row);
                row
            })
            .collect()
    }
}

pub(crate) fn ensure_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PruneError::Numerical(format!("{what} produced non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows() {
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]];
        let y = layer_norm(&x);
        assert!(y.row(0).sum().abs() < 1e-12);
        assert!(y.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gelu_shape() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 3.0).abs() < 0.01);
        assert!(gelu(-3.0).abs() < 0.01);
    }

    #[test]
    fn causal_rows_sum_to_one() {
        let w = BlockWeights::random(3, 0, 8, 16, 2, 1.0, None);
        let x = rng::gaussian(9, 0, Role::Image, 5, 8, 1.0);
        let pass = w.forward(
            &x,
            AttentionOptions {
                causal: true,
                prefix_bias: Some((2, 1.5)),
            },
            true,
        );
        for a in &pass.attention {
            for (i, row) in a.axis_iter(Axis(0)).enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
            }
        }
        let last = w.last_row_attention(
            &x,
            AttentionOptions {
                causal: true,
                prefix_bias: Some((2, 1.5)),
            },
        );
        for (head, row) in last.iter().enumerate() {
            let full = pass.attention[head].row(4);
            for (a, b) in row.iter().zip(full.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
