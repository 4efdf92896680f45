//! Binary tensor files.
//!
//! Layout, all little-endian: 8-byte magic `METEORT1`, dtype byte (`0x01`
//! for f32), ndim byte (1 to 3), `ndim` u64 dims, then the f32 payload in
//! row-major order.

use std::fs;
use std::path::Path;

use crate::error::{PruneError, Result};
use crate::linalg::FeatureMatrix;

pub const MAGIC: &[u8; 8] = b"METEORT1";
pub const DTYPE_F32: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFileHeader {
    pub dtype: u8,
    pub dims: Vec<usize>,
}

impl TensorFileHeader {
    pub fn encoded_len(&self) -> usize {
        10 + 8 * self.dims.len()
    }
}

/// Dense f32 tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if !(1..=3).contains(&dims.len()) {
            return Err(PruneError::UnsupportedFormat(format!("ndim {} not in 1..=3", dims.len())));
        }
        let n = element_count(&dims).ok_or_else(|| PruneError::InvalidInput("tensor dims overflow".into()))?;
        if n != data.len() {
            return Err(PruneError::InvalidInput(format!(
                "dims {:?} need {n} values, got {}",
                dims,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Narrows a matrix to f32.
    pub fn from_matrix(m: &FeatureMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.to_row_major().into_iter().map(|v| v as f32).collect(),
        }
    }

    /// Widens a rank-2 tensor to a matrix.
    pub fn to_matrix(&self) -> Result<FeatureMatrix> {
        match self.dims[..] {
            [r, c] => FeatureMatrix::from_row_major(r, c, self.data.iter().map(|&v| f64::from(v)).collect()),
            _ => Err(PruneError::InvalidInput(format!("expected a 2-d tensor, got dims {:?}", self.dims))),
        }
    }

    /// Splits a rank-3 tensor into matrices along its first axis; a rank-2
    /// tensor yields one matrix.
    pub fn to_matrices(&self) -> Result<Vec<FeatureMatrix>> {
        match self.dims[..] {
            [_, _] => Ok(vec![self.to_matrix()?]),
            [b, r, c] => (0..b)
                .map(|i| {
                    let chunk = &self.data[i * r * c..(i + 1) * r * c];
                    FeatureMatrix::from_row_major(r, c, chunk.iter().map(|&v| f64::from(v)).collect())
                })
                .collect(),
            _ => Err(PruneError::InvalidInput(format!("expected a 2-d or 3-d tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TensorFileHeader {
            dtype: DTYPE_F32,
            dims: self.dims.clone(),
        };
        let mut out = Vec::with_capacity(header.encoded_len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let n = element_count(&header.dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| PruneError::CorruptFile(format!("dims {:?} overflow", header.dims)))?;
        let payload = &bytes[header.encoded_len()..];
        if payload.len() != n {
            return Err(PruneError::CorruptFile(format!(
                "payload has {} bytes, dims {:?} need {n}",
                payload.len(),
                header.dims
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims: header.dims, data })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn parse_header(bytes: &[u8]) -> Result<TensorFileHeader> {
    if bytes.len() < 10 {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(PruneError::UnsupportedFormat("bad magic".into()));
        }
        return Err(PruneError::CorruptFile(format!("{} bytes is too short for a header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(PruneError::UnsupportedFormat(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 {
        return Err(PruneError::UnsupportedFormat(format!("dtype code {dtype:#04x}")));
    }
    let ndim = bytes[9] as usize;
    if !(1..=3).contains(&ndim) {
        return Err(PruneError::UnsupportedFormat(format!("ndim {ndim} not in 1..=3")));
    }
    if bytes.len() < 10 + 8 * ndim {
        return Err(PruneError::CorruptFile("header truncated inside dims".into()));
    }
    let dims = bytes[10..10 + 8 * ndim]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().expect("8 bytes"));
            usize::try_from(d).map_err(|_| PruneError::CorruptFile(format!("dim {d} overflows")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TensorFileHeader { dtype, dims })
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    read_tensor(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_is_fifty_bytes() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), 50);
        assert_eq!(Tensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn rejects_bad_files() {
        let t = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let mut b = t.to_bytes();
        b[7] = b'0';
        assert!(matches!(Tensor::from_bytes(&b), Err(PruneError::UnsupportedFormat(_))));
        let b = t.to_bytes();
        assert!(matches!(Tensor::from_bytes(&b[..b.len() - 1]), Err(PruneError::CorruptFile(_))));
        let mut b = t.to_bytes();
        b[8] = 0x02;
        assert!(matches!(Tensor::from_bytes(&b), Err(PruneError::UnsupportedFormat(_))));
        let mut b = t.to_bytes();
        b[9] = 4;
        assert!(matches!(Tensor::from_bytes(&b), Err(PruneError::UnsupportedFormat(_))));
        let mut b = Tensor::new(vec![1, 1], vec![0.0]).unwrap().to_bytes();
        b[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        b[18..26].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&b), Err(PruneError::CorruptFile(_))));
    }

    #[test]
    fn rank3_splits() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ms = t.to_matrices().unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[1].to_row_major(), vec![3.0, 4.0]);
    }
}
