//! Random-k diagonal sketches.
//!
//! A sketch over global rank `r` keeps `k` diagonal positions, each scaled by
//! `r / k`; everything else is zero. Applying it on the right of `B` keeps `k`
//! columns, on the left of `A` keeps `k` rows.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SketchSpec {
    r: usize,
    k: usize,
}

impl SketchSpec {
    pub fn new(r: usize, k: usize) -> Result<Self> {
        if k == 0 || k > r {
            return Err(Error::Range(format!("sketch needs 1 <= k <= r, got k={k}, r={r}")));
        }
        Ok(Self { r, k })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ratio(&self) -> f64 {
        self.k as f64 / self.r as f64
    }
}

/// A sampled sketch. Indices are kept sorted ascending; equality is
/// structural and the scale is derived from the spec.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sketch {
    spec: SketchSpec,
    indices: Vec<usize>,
}

impl Sketch {
    pub fn identity(r: usize) -> Result<Self> {
        Ok(Self {
            spec: SketchSpec::new(r, r)?,
            indices: (0..r).collect(),
        })
    }

    /// Validates and canonicalizes an index set for `spec`.
    pub fn from_indices(spec: SketchSpec, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.len() != spec.k {
            return Err(Error::Range(format!(
                "sketch expects {} indices, got {}",
                spec.k,
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Range("duplicate sketch index".into()));
        }
        if indices.last().is_some_and(|&j| j >= spec.r) {
            return Err(Error::Range(format!("sketch index outside [0, {})", spec.r)));
        }
        Ok(Self { spec, indices })
    }

    pub fn spec(&self) -> SketchSpec {
        self.spec
    }

    pub fn r(&self) -> usize {
        self.spec.r
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scale(&self) -> f64 {
        self.spec.r as f64 / self.spec.k as f64
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn is_identity(&self) -> bool {
        self.spec.k == self.spec.r
    }

    /// Diagonal of the dense `r×r` sketch matrix.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.spec.r];
        let scale = self.scale();
        for &j in &self.indices {
            d[j] = scale;
        }
        d
    }

    pub fn dense(&self) -> Matrix {
        Matrix::diag(&self.diagonal())
    }
}

/// Uniform k-subset of `[0, r)`.
pub fn sample_random_k(spec: SketchSpec, stream: &RngStream) -> Sketch {
    sample_random_k_with(spec, &mut stream.rng())
}

pub fn sample_random_k_with<R: Rng + ?Sized>(spec: SketchSpec, rng: &mut R) -> Sketch {
    let mut indices = if spec.k == spec.r {
        (0..spec.r).collect()
    } else {
        index::sample(rng, spec.r, spec.k).into_vec()
    };
    indices.sort_unstable();
    Sketch { spec, indices }
}

/// `b · S`: column `j` scaled if selected, zeroed otherwise.
pub fn apply_right(b: &Matrix, s: &Sketch) -> Result<Matrix> {
    if b.cols() != s.r() {
        return Err(Error::shape("apply_right", b.shape(), (s.r(), s.r())));
    }
    let diag = s.diagonal();
    Ok(Matrix::from_fn(b.rows(), b.cols(), |i, j| {
        if diag[j] == 0.0 {
            0.0
        } else {
            b.get(i, j) * diag[j]
        }
    }))
}

/// `S · a`: row `j` scaled if selected, zeroed otherwise.
pub fn apply_left(a: &Matrix, s: &Sketch) -> Result<Matrix> {
    if a.rows() != s.r() {
        return Err(Error::shape("apply_left", (s.r(), s.r()), a.shape()));
    }
    let diag = s.diagonal();
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        if diag[i] == 0.0 {
            0.0
        } else {
            a.get(i, j) * diag[i]
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMetric {
    /// `‖b_j‖ · ‖a_j‖`
    NormProduct,
    /// `‖b_j‖ + ‖a_j‖`
    NormSum,
}

/// Per-component scores `‖b_j‖ ∘ ‖a_j‖` for the chosen metric.
pub fn importance_scores(b: &Matrix, a: &Matrix, metric: ImportanceMetric) -> Result<Vec<f64>> {
    if b.cols() != a.rows() {
        return Err(Error::shape("importance_scores", b.shape(), a.shape()));
    }
    Ok((0..b.cols())
        .map(|j| {
            let bn = b.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let an = a.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            match metric {
                ImportanceMetric::NormProduct => bn * an,
                ImportanceMetric::NormSum => bn + an,
            }
        })
        .collect())
}

/// Importance-weighted sketch: `k` components drawn without replacement with
/// probability proportional to their score. The `r/k` scale is kept, which
/// makes the estimator biased whenever the scores are not uniform.
pub fn sample_importance<R: Rng + ?Sized>(
    b: &Matrix,
    a: &Matrix,
    k: usize,
    metric: ImportanceMetric,
    rng: &mut R,
) -> Result<Sketch> {
    let scores = importance_scores(b, a, metric)?;
    let spec = SketchSpec::new(scores.len(), k)?;
    if k == spec.r {
        return Sketch::identity(spec.r);
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Range("importance scores must be finite and non-negative".into()));
    }
    if scores.iter().all(|s| *s == 0.0) {
        return Err(Error::DegenerateScores);
    }

    let mut remaining: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    let mut chosen = Vec::with_capacity(k);
    while chosen.len() < k {
        let total: f64 = remaining.iter().map(|(_, s)| s).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = remaining.len() - 1;
            for (pos, (_, s)) in remaining.iter().enumerate() {
                if *s > 0.0 && target < *s {
                    pick = pos;
                    break;
                }
                target -= s;
            }
            // guard against round-off landing on a zero-score tail entry
            while remaining[pick].1 == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // only zero-score components left
            rng.random_range(0..remaining.len())
        };
        chosen.push(remaining.remove(pick).0);
    }
    Sketch::from_indices(spec, chosen)
}

/// Bit `j` set iff column/row `j` is active.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct IndexBitmap {
    bits: Vec<bool>,
}

impl IndexBitmap {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    /// Packs into `⌈r/8⌉` bytes; bit `j` lands in byte `j / 8` at position `j % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (j, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            out[j / 8] |= 1 << (j % 8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], r: usize) -> Result<Self> {
        if bytes.len() != r.div_ceil(8) {
            return Err(Error::Format(format!(
                "bitmap for r={r} needs {} bytes, got {}",
                r.div_ceil(8),
                bytes.len()
            )));
        }
        let bits: Vec<bool> = (0..r).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect();
        let padding_set = (r..bytes.len() * 8).any(|j| bytes[j / 8] >> (j % 8) & 1 == 1);
        if padding_set {
            return Err(Error::Format("bitmap padding bits must be zero".into()));
        }
        Ok(Self { bits })
    }
}

impl fmt::Display for IndexBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for IndexBitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IndexBitmap({self})")
    }
}

pub fn encode_indices(s: &Sketch) -> IndexBitmap {
    let mut bits = vec![false; s.r()];
    for &j in s.indices() {
        bits[j] = true;
    }
    IndexBitmap { bits }
}

/// Inverse of [`encode_indices`]; the popcount must match `spec.k`.
pub fn decode_indices(bitmap: &IndexBitmap, spec: SketchSpec) -> Result<Sketch> {
    if bitmap.len() != spec.r {
        return Err(Error::Format(format!(
            "bitmap length {} does not match r={}",
            bitmap.len(),
            spec.r
        )));
    }
    let indices = (0..spec.r).filter(|&j| bitmap.get(j)).collect();
    Sketch::from_indices(spec, indices)
}
