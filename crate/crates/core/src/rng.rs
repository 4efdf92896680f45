//! Counter-based random streams keyed by `(seed, layer, role)`.
//!
//! Every weight tensor and synthetic input draws from its own ChaCha stream,
//! so generation order never affects values.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Embed = 1,
    Query = 2,
    Key = 3,
    Value = 4,
    AttnOut = 5,
    MlpIn = 6,
    MlpOut = 7,
    ClsToken = 8,
    Basis = 9,
    BasisLeft = 10,
    ProjectorIn = 11,
    ProjectorOut = 12,
    ProjectorBias = 13,
    Image = 14,
    Text = 15,
    Shuffle = 16,
    Instance = 17,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(seed: u64, layer: u64, role: Role) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ layer) ^ role as u64)
}

pub fn stream(seed: u64, layer: u64, role: Role) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, layer, role))
}

/// Matrix of independent normal draws times `scale`.
pub fn gaussian(seed: u64, layer: u64, role: Role, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = stream(seed, layer, role);
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(&mut rng);
        x * scale
    })
}

/// `n x r` matrix with orthonormal columns (`r <= n`), from Gram-Schmidt on
/// a Gaussian draw.
pub fn orthonormal(seed: u64, layer: u64, role: Role, n: usize, r: usize) -> Array2<f64> {
    assert!(r <= n, "cannot fit {r} orthonormal columns in dimension {n}");
    let mut m = gaussian(seed, layer, role, n, r, 1.0);
    for j in 0..r {
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for k in 0..j {
                let proj = m.column(j).dot(&m.column(k));
                let ck = m.column(k).to_owned();
                m.column_mut(j).scaled_add(-proj, &ck);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}
