use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PruneError, Result};

/// Dense token-by-dimension matrix of finite values.
///
/// Every stage of the pipeline consumes and produces these: encoder block
/// outputs, projected tokens, the fused token sequence and decoder context.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(PruneError::InvalidInput(
                "feature matrix needs at least one column".into(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(PruneError::InvalidInput(format!(
                "non-finite entry at flat position {pos}"
            )));
        }
        Ok(Self(data))
    }

    /// Wraps an array the caller has already checked.
    pub(crate) fn from_trusted(data: Array2<f64>) -> Self {
        debug_assert!(data.ncols() > 0);
        Self(data)
    }

    /// Like [`FeatureMatrix::new`] but reports non-finite values as a
    /// numerical failure instead of bad input.
    pub(crate) fn checked(data: Array2<f64>, what: &str) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PruneError::Numerical(format!("{what} produced non-finite values")));
        }
        Ok(Self::from_trusted(data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PruneError::InvalidInput(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| PruneError::InvalidInput(e.to_string()))?;
        Self::new(arr)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(PruneError::InvalidInput("ragged rows".into()));
        }
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[[r, c]]
    }

    /// Rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select(Axis(0), indices))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&FeatureMatrix]) -> Result<Self> {
        let cols = parts
            .first()
            .map(|p| p.cols())
            .ok_or_else(|| PruneError::InvalidInput("nothing to stack".into()))?;
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(PruneError::InvalidInput("column counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| PruneError::InvalidInput(e.to_string()))?;
        Ok(Self(stacked))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.t().to_owned())
    }

    /// Row-major values.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    /// Short hex digest over shape and exact bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows() as u64).to_le_bytes());
        h.update((self.cols() as u64).to_le_bytes());
        for v in self.0.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        short_hex(&h.finalize())
    }
}

/// Digest of a score vector, used in trace entries.
pub fn digest_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    short_hex(&h.finalize())
}

fn short_hex(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Serialize for FeatureMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("FeatureMatrix", 3)?;
        st.serialize_field("rows", &self.rows())?;
        st.serialize_field("cols", &self.cols())?;
        st.serialize_field("data", &self.to_row_major())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for FeatureMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        FeatureMatrix::from_row_major(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let err = FeatureMatrix::from_row_major(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, PruneError::InvalidInput(_)));
    }

    #[test]
    fn zero_rows_allowed_zero_cols_rejected() {
        assert_eq!(FeatureMatrix::zeros(0, 3).unwrap().rows(), 0);
        assert!(FeatureMatrix::zeros(3, 0).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = FeatureMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![1.0, 2.0 + f64::EPSILON * 2.0]]).unwrap();
        assert_eq!(a.checksum(), a.clone().checksum());
        assert_ne!(a.checksum(), b.checksum());
    }
}
