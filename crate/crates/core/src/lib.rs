pub mod error;
pub mod linalg;
pub mod report;
pub mod rng;

mod block;
pub mod config;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod flops;
pub mod pipeline;
pub mod rank_probe;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod tensor_io;
pub mod trace;

pub use error::{PruneError, Result};
pub use linalg::FeatureMatrix;
