//! Numerical primitives shared by every pruning stage.

mod matrix;
mod select;
mod stats;
mod svd;

pub use matrix::{digest_values, FeatureMatrix};
pub use select::{top_k_indices, ScoredIndex, ScoredIndexList};
pub use stats::{cosine_similarity, kendall_tau, shannon_entropy, softmax, ZERO_NORM};
pub use svd::{nuclear_norm, numerical_rank, singular_values, svd, SvdResult};

pub(crate) use stats::{cosine_unchecked, softmax_in_place};
pub(crate) use svd::rank_from_singular_values;
