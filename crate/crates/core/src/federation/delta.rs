use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::sketching::IndexBitmap;

/// One client's round update restricted to its active columns/rows.
///
/// `b_cols` is `m×k` (column `t` belongs to `indices[t]`), `a_rows` is `k×n`.
/// When top-k compression was applied, `kept` marks which flat payload
/// entries survive; the rest are exact zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDelta {
    pub client: usize,
    pub round: usize,
    rank: usize,
    indices: Vec<usize>,
    b_cols: Matrix,
    a_rows: Matrix,
    kept: Option<Vec<bool>>,
}

impl SparseDelta {
    pub fn new(
        client: usize,
        round: usize,
        rank: usize,
        indices: Vec<usize>,
        b_cols: Matrix,
        a_rows: Matrix,
    ) -> Result<Self> {
        if b_cols.cols() != indices.len() || a_rows.rows() != indices.len() {
            return Err(Error::shape("SparseDelta::new", b_cols.shape(), a_rows.shape()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&j| j >= rank) {
            return Err(Error::Range("delta indices must be strictly increasing and < rank".into()));
        }
        Ok(Self {
            client,
            round,
            rank,
            indices,
            b_cols,
            a_rows,
            kept: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn b_cols(&self) -> &Matrix {
        &self.b_cols
    }

    pub fn a_rows(&self) -> &Matrix {
        &self.a_rows
    }

    pub fn m(&self) -> usize {
        self.b_cols.rows()
    }

    pub fn n(&self) -> usize {
        self.a_rows.cols()
    }

    pub fn kept(&self) -> Option<&[bool]> {
        self.kept.as_deref()
    }

    /// Number of scalars in the payload: `k(m + n)`.
    pub fn payload_len(&self) -> usize {
        self.indices.len() * (self.m() + self.n())
    }

    /// Flat payload: the B columns one after another, then the A rows.
    pub fn payload(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.payload_len());
        for t in 0..self.indices.len() {
            out.extend(self.b_cols.col(t));
        }
        out.extend_from_slice(self.a_rows.as_slice());
        out
    }

    /// Replaces the payload, keeping indices and shape.
    pub fn with_payload(&self, payload: &[f64], kept: Option<Vec<bool>>) -> Result<Self> {
        if payload.len() != self.payload_len() || kept.as_ref().is_some_and(|k| k.len() != payload.len()) {
            return Err(Error::shape(
                "SparseDelta::with_payload",
                (payload.len(), 1),
                (self.payload_len(), 1),
            ));
        }
        let (m, k) = (self.m(), self.indices.len());
        let b_cols = Matrix::from_fn(m, k, |i, t| payload[t * m + i]);
        let a_rows = Matrix::new(k, self.n(), payload[m * k..].to_vec())?;
        Ok(Self {
            b_cols,
            a_rows,
            kept,
            ..self.clone()
        })
    }

    /// Dense `(ΔB, ΔA)` of shapes `m×r` and `r×n`, zero outside the indices.
    pub fn densify(&self) -> (Matrix, Matrix) {
        let mut db = Matrix::zeros(self.m(), self.rank);
        let mut da = Matrix::zeros(self.rank, self.n());
        for (t, &j) in self.indices.iter().enumerate() {
            for i in 0..self.m() {
                db.set(i, j, self.b_cols.get(i, t));
            }
            da.row_mut(j).copy_from_slice(self.a_rows.row(t));
        }
        (db, da)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.b_cols.frobenius_sq() + self.a_rows.frobenius_sq()
    }

    /// Uplink encoding with 4-byte floats. Uncompressed: the payload only
    /// (indices are known to the server from the round plan). Compressed:
    /// a `⌈payload/8⌉`-byte keep-bitmap followed by the kept values.
    pub fn to_wire(&self) -> Vec<u8> {
        let payload = self.payload();
        match &self.kept {
            None => payload.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
            Some(kept) => {
                let mut bytes = vec![0u8; kept.len().div_ceil(8)];
                for (i, _) in kept.iter().enumerate().filter(|(_, k)| **k) {
                    bytes[i / 8] |= 1 << (i % 8);
                }
                for (v, _) in payload.iter().zip(kept).filter(|(_, k)| **k) {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                bytes
            }
        }
    }

    /// Active-set bitmap over the global rank.
    pub fn index_bitmap(&self) -> IndexBitmap {
        let mut bytes = vec![0u8; self.rank.div_ceil(8)];
        for &j in &self.indices {
            bytes[j / 8] |= 1 << (j % 8);
        }
        IndexBitmap::from_bytes(&bytes, self.rank).expect("bitmap built from valid indices")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseDelta {
        let b = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let a = Matrix::from_rows(&[[7.0, 8.0], [9.0, 10.0]]).unwrap();
        SparseDelta::new(0, 0, 4, vec![1, 3], b, a).unwrap()
    }

    #[test]
    fn densify_places_columns_and_rows() {
        let (db, da) = sample().densify();
        assert_eq!(db.col(0), vec![0.0; 3]);
        assert_eq!(db.col(1), vec![1.0, 3.0, 5.0]);
        assert_eq!(db.col(3), vec![2.0, 4.0, 6.0]);
        assert_eq!(da.row(3), &[9.0, 10.0]);
        assert_eq!(da.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn payload_round_trip() {
        let d = sample();
        assert_eq!(d.payload(), vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(d.with_payload(&d.payload(), None).unwrap(), d);
    }

    #[test]
    fn wire_size() {
        let d = sample();
        assert_eq!(d.to_wire().len(), 4 * 10);
        let kept = vec![true, false, false, false, false, false, false, false, false, true];
        let c = d.with_payload(&d.payload(), Some(kept)).unwrap();
        assert_eq!(c.to_wire().len(), 2 + 4 * 2);
    }

    #[test]
    fn rejects_malformed() {
        let b = Matrix::zeros(3, 2);
        let a = Matrix::zeros(2, 2);
        assert!(SparseDelta::new(0, 0, 4, vec![3, 1], b.clone(), a.clone()).is_err());
        assert!(SparseDelta::new(0, 0, 2, vec![1, 2], b.clone(), a.clone()).is_err());
        assert!(SparseDelta::new(0, 0, 4, vec![1], b, a).is_err());
    }
}
