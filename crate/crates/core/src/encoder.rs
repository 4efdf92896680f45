//! Seeded toy vision encoders with a cls token.
//!
//! These stand in for pretrained encoders: a token embedding followed by
//! pre-norm transformer blocks over `[cls; visual tokens]`. When a synthetic
//! rank `r` is configured, the embedding and every block's output
//! projections map into one shared `r`-dimensional row space, which caps the
//! rank of every visual feature map at `r`.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::{ensure_finite, AttentionOptions, BlockWeights};
use crate::error::{PruneError, Result};
use crate::linalg::FeatureMatrix;
use crate::rng::{self, Role};

fn default_logit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub encoder_id: String,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Visual tokens entering the first block, cls excluded.
    pub token_count: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_rank: Option<usize>,
    /// Multiplies attention logits; `0` makes every attention row uniform.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
}

impl EncoderSpec {
    pub fn new(encoder_id: &str, num_blocks: usize, num_heads: usize, token_count: usize, dim: usize, seed: u64) -> Self {
        Self {
            encoder_id: encoder_id.to_string(),
            num_blocks,
            num_heads,
            token_count,
            dim,
            mlp_dim: 2 * dim,
            seed,
            synthetic_rank: None,
            logit_scale: 1.0,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.synthetic_rank = Some(rank);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PruneError::InvalidConfig(format!("encoder `{}`: {m}", self.encoder_id)));
        if self.encoder_id.is_empty() {
            return Err(PruneError::InvalidConfig("encoder id is empty".into()));
        }
        if self.num_heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return bad(format!("dim {} not divisible by num_heads {}", self.dim, self.num_heads));
        }
        if self.num_blocks < 3 {
            return bad(format!("needs at least 3 blocks, has {}", self.num_blocks));
        }
        if self.token_count == 0 {
            return bad("token_count must be >= 1".into());
        }
        if self.mlp_dim == 0 {
            return bad("mlp_dim must be >= 1".into());
        }
        if let Some(r) = self.synthetic_rank {
            if r == 0 || r > self.dim {
                return bad(format!("synthetic_rank {r} outside 1..={}", self.dim));
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale >= 0.0) {
            return bad("logit_scale must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Immutable weights of one encoder.
#[derive(Debug, Clone)]
pub struct EncoderState {
    spec: EncoderSpec,
    embed: Array2<f64>,
    cls: Array1<f64>,
    blocks: Vec<BlockWeights>,
}

/// Visual tokens after a block plus what the cls criterion needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    /// Visual tokens only.
    pub features: FeatureMatrix,
    /// Residual-stream state of the cls token.
    pub cls: Vec<f64>,
    /// Query of the cls token inside the block that produced this output
    /// (all heads concatenated). Empty before the first block.
    pub cls_query: Vec<f64>,
    /// Keys of the visual tokens inside that block.
    pub keys: FeatureMatrix,
    /// Original token position of every current row, strictly increasing.
    pub kept_global_indices: Vec<usize>,
}

impl BlockOutput {
    pub fn token_count(&self) -> usize {
        self.features.rows()
    }

    /// Keeps the given rows (ascending positions) of features, keys and the
    /// index map.
    pub fn retain_rows(&self, rows: &[usize]) -> BlockOutput {
        BlockOutput {
            features: self.features.select_rows(rows),
            cls: self.cls.clone(),
            cls_query: self.cls_query.clone(),
            keys: if self.keys.rows() == self.features.rows() {
                self.keys.select_rows(rows)
            } else {
                self.keys.clone()
            },
            kept_global_indices: rows.iter().map(|&r| self.kept_global_indices[r]).collect(),
        }
    }
}

pub fn build_encoder(spec: &EncoderSpec) -> Result<EncoderState> {
    spec.validate()?;
    let d = spec.dim;
    let (embed, basis) = match spec.synthetic_rank {
        None => (rng::orthonormal(spec.seed, 0, Role::Embed, d, d), None),
        Some(r) => {
            let basis = rng::orthonormal(spec.seed, 0, Role::Basis, d, r).t().to_owned();
            let left = rng::orthonormal(spec.seed, 0, Role::BasisLeft, d, r);
            (left.dot(&basis), Some(basis))
        }
    };
    let cls = rng::gaussian(spec.seed, 0, Role::ClsToken, 1, d, 1.0).row(0).to_owned();
    let blocks = (0..spec.num_blocks)
        .map(|b| {
            BlockWeights::random(
                spec.seed,
                b as u64 + 1,
                d,
                spec.mlp_dim,
                spec.num_heads,
                spec.logit_scale,
                basis.as_ref(),
            )
        })
        .collect();
    Ok(EncoderState {
        spec: spec.clone(),
        embed,
        cls,
        blocks,
    })
}

impl EncoderState {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Digest over every weight.
    pub fn weight_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |a: &Array2<f64>| {
            for v in a.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        feed(&self.embed);
        feed(&self.cls.clone().insert_axis(Axis(0)));
        for b in &self.blocks {
            for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                feed(w);
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Embeds raw image tokens into the state entering block 0.
    pub fn embed_input(&self, image: &FeatureMatrix) -> Result<BlockOutput> {
        if image.cols() != self.spec.dim {
            return Err(PruneError::InvalidInput(format!(
                "encoder `{}` expects {} input columns, got {}",
                self.spec.encoder_id,
                self.spec.dim,
                image.cols()
            )));
        }
        if image.rows() != self.spec.token_count {
            return Err(PruneError::InvalidInput(format!(
                "encoder `{}` expects {} input tokens, got {}",
                self.spec.encoder_id,
                self.spec.token_count,
                image.rows()
            )));
        }
        let features = FeatureMatrix::checked(image.as_array().dot(&self.embed), "embedding")?;
        let n = features.rows();
        Ok(BlockOutput {
            features,
            cls: self.cls.to_vec(),
            cls_query: Vec::new(),
            keys: FeatureMatrix::from_trusted(Array2::zeros((0, self.spec.dim))),
            kept_global_indices: (0..n).collect(),
        })
    }

    fn sequence(&self, input: &BlockOutput) -> Array2<f64> {
        let d = self.spec.dim;
        let n = input.features.rows();
        let mut x = Array2::zeros((n + 1, d));
        x.row_mut(0).assign(&ndarray::ArrayView1::from(&input.cls[..]));
        x.slice_mut(s![1.., ..]).assign(input.features.as_array());
        x
    }

    /// Runs one block. Token count is unchanged.
    pub fn forward_block(&self, block_idx: usize, input: &BlockOutput) -> Result<BlockOutput> {
        let block = self.block(block_idx)?;
        let x = self.sequence(input);
        let pass = block.forward(&x, AttentionOptions::default(), false);
        ensure_finite(&pass.output, "encoder block")?;
        Ok(BlockOutput {
            features: FeatureMatrix::from_trusted(pass.output.slice(s![1.., ..]).to_owned()),
            cls: pass.output.row(0).to_vec(),
            cls_query: pass.queries.row(0).to_vec(),
            keys: FeatureMatrix::checked(pass.keys.slice(s![1.., ..]).to_owned(), "encoder keys")?,
            kept_global_indices: input.kept_global_indices.clone(),
        })
    }

    /// Per-head attention over `[cls; visual]` for one block.
    pub fn attention_maps(&self, block_idx: usize, input: &BlockOutput) -> Result<Vec<Array2<f64>>> {
        let block = self.block(block_idx)?;
        Ok(block.forward(&self.sequence(input), AttentionOptions::default(), true).attention)
    }

    /// Unpruned forward through every block; one output per block.
    pub fn forward_all(&self, image: &FeatureMatrix) -> Result<Vec<BlockOutput>> {
        let mut cur = self.embed_input(image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            cur = self.forward_block(b, &cur)?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    fn block(&self, block_idx: usize) -> Result<&BlockWeights> {
        self.blocks.get(block_idx).ok_or_else(|| {
            PruneError::InvalidInput(format!(
                "block {block_idx} out of range for encoder `{}` with {} blocks",
                self.spec.encoder_id,
                self.blocks.len()
            ))
        })
    }
}

/// Seeded stand-in for an image as seen by one encoder: `token_count x dim`
/// standard normal tokens. `ordinal` separates encoders viewing one image.
pub fn synthetic_image(spec: &EncoderSpec, image_seed: u64, ordinal: usize) -> FeatureMatrix {
    let key = rng::stream_key(image_seed, ordinal as u64, Role::Image);
    FeatureMatrix::from_trusted(rng::gaussian(key, 0, Role::Image, spec.token_count, spec.dim, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;

    fn small(seed: u64) -> EncoderSpec {
        EncoderSpec::new("enc", 3, 2, 12, 16, seed)
    }

    #[test]
    fn deterministic_weights() {
        let a = build_encoder(&small(1)).unwrap();
        let b = build_encoder(&small(1)).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = build_encoder(&small(2)).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(1);
        s.num_heads = 3;
        assert!(matches!(build_encoder(&s), Err(PruneError::InvalidConfig(_))));
        let mut s = small(1);
        s.num_blocks = 2;
        assert!(build_encoder(&s).is_err());
        let mut s = small(1);
        s.token_count = 0;
        assert!(build_encoder(&s).is_err());
        assert!(build_encoder(&small(1).with_rank(17)).is_err());
    }

    #[test]
    fn rank_cap_holds_at_every_block() {
        let spec = small(4).with_rank(4);
        let enc = build_encoder(&spec).unwrap();
        let img = synthetic_image(&spec, 9, 0);
        for out in enc.forward_all(&img).unwrap() {
            assert!(numerical_rank(&out.features, 1e-6).unwrap() <= 4);
        }
    }

    #[test]
    fn single_token_and_determinism() {
        let mut spec = small(3);
        spec.token_count = 1;
        let enc = build_encoder(&spec).unwrap();
        let img = synthetic_image(&spec, 1, 0);
        let a = enc.forward_all(&img).unwrap();
        let b = enc.forward_all(&img).unwrap();
        assert_eq!(a.last().unwrap().features.rows(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let spec = small(5);
        let enc = build_encoder(&spec).unwrap();
        let mut cur = enc.embed_input(&synthetic_image(&spec, 2, 0)).unwrap();
        for b in 0..enc.num_blocks() {
            for head in enc.attention_maps(b, &cur).unwrap() {
                for row in head.axis_iter(Axis(0)) {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
            cur = enc.forward_block(b, &cur).unwrap();
        }
    }

    #[test]
    fn wrong_input_shape() {
        let enc = build_encoder(&small(1)).unwrap();
        let img = FeatureMatrix::zeros(12, 8).unwrap();
        assert!(matches!(enc.embed_input(&img), Err(PruneError::InvalidInput(_))));
        assert!(enc.forward_block(9, &enc.embed_input(&synthetic_image(&small(1), 0, 0)).unwrap()).is_err());
    }
}
