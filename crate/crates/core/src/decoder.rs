//! Seeded toy decoder with causal attention over `[visual ∥ text]`.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::block::{ensure_finite, AttentionOptions, BlockWeights};
use crate::error::{PruneError, Result};
use crate::linalg::FeatureMatrix;
use crate::rng::{self, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub depth: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub seed: u64,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(PruneError::InvalidConfig("decoder depth must be >= 1".into()));
        }
        if self.num_heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(PruneError::InvalidConfig(format!(
                "decoder dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.mlp_dim == 0 {
            return Err(PruneError::InvalidConfig("decoder mlp_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Instruction tokens plus a logit prior from text queries toward visual
/// keys. The prior stands in for how strongly a prompt draws on the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: FeatureMatrix,
    pub visual_bias: f64,
}

pub fn synthetic_prompt(spec: &DecoderSpec, seed: u64, text_tokens: usize, visual_bias: f64) -> Result<Prompt> {
    if text_tokens == 0 {
        return Err(PruneError::InvalidConfig("prompt needs at least one text token".into()));
    }
    if !visual_bias.is_finite() {
        return Err(PruneError::InvalidConfig("visual_bias must be finite".into()));
    }
    Ok(Prompt {
        text: FeatureMatrix::from_trusted(rng::gaussian(seed, 0, Role::Text, text_tokens, spec.dim, 1.0)),
        visual_bias,
    })
}

/// Running decoder state: visual rows first, text rows after.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderContext {
    pub visual: FeatureMatrix,
    pub text: FeatureMatrix,
    pub visual_bias: f64,
}

impl DecoderContext {
    pub fn new(visual: FeatureMatrix, prompt: &Prompt) -> Result<Self> {
        if visual.cols() != prompt.text.cols() {
            return Err(PruneError::InvalidInput(format!(
                "visual tokens have dim {} but text tokens {}",
                visual.cols(),
                prompt.text.cols()
            )));
        }
        Ok(Self {
            visual,
            text: prompt.text.clone(),
            visual_bias: prompt.visual_bias,
        })
    }

    pub fn visual_len(&self) -> usize {
        self.visual.rows()
    }

    fn sequence(&self) -> Array2<f64> {
        let views = [self.visual.view(), self.text.view()];
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    }

    fn options(&self) -> AttentionOptions {
        AttentionOptions {
            causal: true,
            prefix_bias: Some((self.visual_len(), self.visual_bias)),
        }
    }

    pub fn retain_visual(&mut self, rows: &[usize]) {
        self.visual = self.visual.select_rows(rows);
    }
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    spec: DecoderSpec,
    layers: Vec<BlockWeights>,
}

impl ToyDecoder {
    pub fn build(spec: &DecoderSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.depth)
            .map(|l| BlockWeights::random(spec.seed, l as u64 + 1, spec.dim, spec.mlp_dim, spec.num_heads, 1.0, None))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.spec.num_heads
    }

    fn layer(&self, idx: usize) -> Result<&BlockWeights> {
        self.layers
            .get(idx)
            .ok_or_else(|| PruneError::InvalidInput(format!("decoder has no layer {idx}")))
    }

    /// Attention of the final (last instruction) token in layer `idx`,
    /// one full row per head.
    pub fn last_token_attention(&self, idx: usize, ctx: &DecoderContext) -> Result<Vec<Vec<f64>>> {
        Ok(self.layer(idx)?.last_row_attention(&ctx.sequence(), ctx.options()))
    }

    pub fn forward_layer(&self, idx: usize, ctx: &mut DecoderContext) -> Result<()> {
        let layer = self.layer(idx)?;
        let pass = layer.forward(&ctx.sequence(), ctx.options(), false);
        ensure_finite(&pass.output, "decoder layer")?;
        let v = ctx.visual_len();
        ctx.visual = FeatureMatrix::from_trusted(pass.output.slice(s![..v, ..]).to_owned());
        ctx.text = FeatureMatrix::from_trusted(pass.output.slice(s![v.., ..]).to_owned());
        Ok(())
    }
}
