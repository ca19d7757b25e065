//! Frozen base, adapter pair, sketched forward map and its gradients.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::SparseDelta;
use crate::numerics::{gaussian_matrix, matmul, Matrix, RngStream};
use crate::sketching::{apply_left, apply_right, Sketch};

/// The base weight `W0` (m×n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBase {
    w0: Matrix,
}

impl FrozenBase {
    pub fn new(w0: Matrix) -> Self {
        Self { w0 }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    /// SHA-256 over the little-endian bytes of `W0`.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.w0.rows() as u64).to_le_bytes());
        h.update((self.w0.cols() as u64).to_le_bytes());
        h.update(self.w0.to_le_bytes());
        hex_digest(&h.finalize())
    }

    /// In-place merge of a product into the base. Only the stacking baseline
    /// is allowed to do this.
    pub(crate) fn merge(&mut self, update: &Matrix) -> Result<()> {
        self.w0.add_assign(update)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trainable pair `B` (m×r), `A` (r×n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub b: Matrix,
    pub a: Matrix,
}

impl AdapterPair {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::shape("AdapterPair::new", b.shape(), a.shape()));
        }
        Ok(Self { b, a })
    }

    pub fn zeros(m: usize, n: usize, r: usize) -> Self {
        Self {
            b: Matrix::zeros(m, r),
            a: Matrix::zeros(r, n),
        }
    }

    /// Classical LoRA init: `B = 0`, `A ~ N(0, 1/r)` entrywise.
    pub fn init(m: usize, n: usize, r: usize, stream: &RngStream) -> Result<Self> {
        let a = gaussian_matrix(r, n, stream, (1.0 / r as f64).sqrt())?;
        Ok(Self {
            b: Matrix::zeros(m, r),
            a,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn m(&self) -> usize {
        self.b.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    /// `B · A`.
    pub fn product(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter pair invariant b.cols == a.rows")
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.b.frobenius_sq() + self.a.frobenius_sq()
    }

    pub fn sub(&self, other: &AdapterPair) -> Result<AdapterPair> {
        Ok(AdapterPair {
            b: self.b.sub(&other.b)?,
            a: self.a.sub(&other.a)?,
        })
    }

    pub fn bit_eq(&self, other: &AdapterPair) -> bool {
        self.b.bit_eq(&other.b) && self.a.bit_eq(&other.a)
    }

    /// First `k` columns of `B` and rows of `A`.
    pub fn truncate(&self, k: usize) -> AdapterPair {
        AdapterPair {
            b: self.b.leading_cols(k),
            a: self.a.leading_rows(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub gb: Matrix,
    pub ga: Matrix,
}

impl AdapterGrads {
    pub fn frobenius_norm(&self) -> f64 {
        (self.gb.frobenius_sq() + self.ga.frobenius_sq()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.gb.is_finite() && self.ga.is_finite()
    }
}

fn check_shapes(base: &Matrix, ad: &AdapterPair, s: &Sketch) -> Result<()> {
    if base.rows() != ad.m() || base.cols() != ad.n() {
        return Err(Error::shape("base vs adapters", base.shape(), (ad.m(), ad.n())));
    }
    if ad.rank() != s.r() {
        return Err(Error::shape("adapters vs sketch", ad.b.shape(), (s.r(), s.r())));
    }
    Ok(())
}

/// `W0 + B·S·A`.
pub fn effective_weight(base: &FrozenBase, ad: &AdapterPair, s: &Sketch) -> Result<Matrix> {
    effective_weight_scaled(base, ad, s, 1.0)
}

/// `W0 + α·B·S·A`; `α = 1` takes exactly the unscaled path.
pub fn effective_weight_scaled(
    base: &FrozenBase,
    ad: &AdapterPair,
    s: &Sketch,
    scaling: f64,
) -> Result<Matrix> {
    check_shapes(base.w0(), ad, s)?;
    let mut update = matmul(&apply_right(&ad.b, s)?, &ad.a)?;
    if scaling != 1.0 {
        update = update.scale(scaling);
    }
    base.w0().add(&update)
}

/// Gradients with respect to `B` and `A` given `g = ∇ℓ` at `W0 + B·S·A`:
/// `∇_B = g·Aᵀ·Sᵀ`, `∇_A = Sᵀ·Bᵀ·g`.
pub fn adapter_grads(g: &Matrix, ad: &AdapterPair, s: &Sketch) -> Result<AdapterGrads> {
    adapter_grads_scaled(g, ad, s, 1.0)
}

pub fn adapter_grads_scaled(g: &Matrix, ad: &AdapterPair, s: &Sketch, scaling: f64) -> Result<AdapterGrads> {
    check_shapes(g, ad, s)?;
    let mut gb = apply_right(&matmul(g, &ad.a.transpose())?, s)?;
    let mut ga = apply_left(&matmul(&ad.b.transpose(), g)?, s)?;
    if scaling != 1.0 {
        gb = gb.scale(scaling);
        ga = ga.scale(scaling);
    }
    Ok(AdapterGrads { gb, ga })
}

/// `B ← B − lr·∇_B`, `A ← A − lr·∇_A`.
pub fn sgd_step(ad: &AdapterPair, grads: &AdapterGrads, lr: f64) -> Result<AdapterPair> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Range(format!("learning rate {lr} must be finite and >= 0")));
    }
    if !grads.is_finite() {
        return Err(Error::numerical("sgd_step: non-finite gradient", 0));
    }
    if grads.gb.shape() != ad.b.shape() || grads.ga.shape() != ad.a.shape() {
        return Err(Error::shape("sgd_step", ad.b.shape(), grads.gb.shape()));
    }
    let step = |x: &Matrix, g: &Matrix| {
        let data = x
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(x, g)| x - lr * g)
            .collect();
        Matrix::new(x.rows(), x.cols(), data).expect("same shape")
    };
    Ok(AdapterPair {
        b: step(&ad.b, &grads.gb),
        a: step(&ad.a, &grads.ga),
    })
}

/// Packs `after − before` into the sketch's columns/rows. Fails if anything
/// outside the sketch moved.
pub fn extract_delta(
    before: &AdapterPair,
    after: &AdapterPair,
    s: &Sketch,
    client: usize,
    round: usize,
) -> Result<SparseDelta> {
    if before.b.shape() != after.b.shape() || before.a.shape() != after.a.shape() {
        return Err(Error::shape("extract_delta", before.b.shape(), after.b.shape()));
    }
    if before.rank() != s.r() {
        return Err(Error::shape("extract_delta vs sketch", before.b.shape(), (s.r(), s.r())));
    }
    let (m, n) = (before.m(), before.n());
    for j in (0..s.r()).filter(|&j| !s.contains(j)) {
        let b_moved = (0..m).any(|i| after.b.get(i, j) - before.b.get(i, j) != 0.0);
        let a_moved = (0..n).any(|c| after.a.get(j, c) - before.a.get(j, c) != 0.0);
        if b_moved || a_moved {
            return Err(Error::ContractViolation(format!(
                "client {client} round {round}: update leaked into inactive index {j}"
            )));
        }
    }
    let idx = s.indices();
    let b_cols = Matrix::from_fn(m, idx.len(), |i, t| after.b.get(i, idx[t]) - before.b.get(i, idx[t]));
    let a_rows = Matrix::from_fn(idx.len(), n, |t, c| after.a.get(idx[t], c) - before.a.get(idx[t], c));
    SparseDelta::new(client, round, s.r(), idx.to_vec(), b_cols, a_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::domain;
    use crate::sketching::{sample_random_k, SketchSpec};
    use rand::Rng;

    // Test-only objective ℓ(W) = ½‖W·X − Y‖², ∇ℓ = (W·X − Y)·Xᵀ.
    struct Quadratic {
        x: Matrix,
        y: Matrix,
    }

    impl Quadratic {
        fn random(m: usize, n: usize, stream: &RngStream) -> Self {
            Self {
                x: gaussian_matrix(n, 4, &stream.derive(50, 0), 1.0).unwrap(),
                y: gaussian_matrix(m, 4, &stream.derive(50, 1), 1.0).unwrap(),
            }
        }

        fn loss(&self, w: &Matrix) -> f64 {
            0.5 * matmul(w, &self.x).unwrap().sub(&self.y).unwrap().frobenius_sq()
        }

        fn grad(&self, w: &Matrix) -> Matrix {
            let resid = matmul(w, &self.x).unwrap().sub(&self.y).unwrap();
            matmul(&resid, &self.x.transpose()).unwrap()
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_pair(m: usize, n: usize, r: usize, stream: &RngStream) -> AdapterPair {
        AdapterPair::new(
            gaussian_matrix(m, r, &stream.derive(60, 0), 0.7).unwrap(),
            gaussian_matrix(r, n, &stream.derive(60, 1), 0.7).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_adapters_leave_base() {
        let base = FrozenBase::new(gaussian_matrix(3, 4, &RngStream::new(1, 0), 1.0).unwrap());
        let sk = Sketch::identity(2).unwrap();
        let w = effective_weight(&base, &AdapterPair::zeros(3, 4, 2), &sk).unwrap();
        assert!(w.bit_eq(base.w0()));
    }

    #[test]
    fn identity_sketch_is_plain_lora() {
        let stream = RngStream::new(2, 0);
        let base = FrozenBase::new(gaussian_matrix(3, 4, &stream, 1.0).unwrap());
        let ad = random_pair(3, 4, 2, &stream);
        let w = effective_weight(&base, &ad, &Sketch::identity(2).unwrap()).unwrap();
        assert!(w.bit_eq(&base.w0().add(&ad.product()).unwrap()));
    }

    #[test]
    fn effective_weight_matches_dense_oracle() {
        let stream = RngStream::new(3, 0);
        let base = FrozenBase::new(gaussian_matrix(5, 6, &stream, 1.0).unwrap());
        let ad = random_pair(5, 6, 8, &stream);
        let s = sample_random_k(SketchSpec::new(8, 3).unwrap(), &stream.derive(1, 1));
        let oracle = base
            .w0()
            .add(&matmul(&matmul(&ad.b, &s.dense()).unwrap(), &ad.a).unwrap())
            .unwrap();
        assert!(effective_weight(&base, &ad, &s).unwrap().bit_eq(&oracle));
    }

    #[test]
    fn identity_grads_case() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let ad = AdapterPair::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let grads = adapter_grads(&g, &ad, &Sketch::identity(2).unwrap()).unwrap();
        assert_eq!(grads.gb, g);
        assert_eq!(grads.ga, g);
    }

    #[test]
    fn single_index_sketch_grads() {
        let stream = RngStream::new(4, 0);
        let g = gaussian_matrix(3, 3, &stream, 1.0).unwrap();
        let ad = random_pair(3, 3, 2, &stream);
        let s = Sketch::from_indices(SketchSpec::new(2, 1).unwrap(), vec![0]).unwrap();
        let grads = adapter_grads(&g, &ad, &s).unwrap();
        let chain = matmul(&g, &ad.a.transpose()).unwrap();
        assert_eq!(grads.gb.col(1), vec![0.0; 3]);
        let expected: Vec<f64> = chain.col(0).iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.gb.col(0), expected);
        assert!(grads.ga.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut cfg_rng = RngStream::new(2025, 0).rng();
        for trial in 0..20 {
            let stream = RngStream::new(7, trial);
            let m = cfg_rng.random_range(1..=12);
            let n = cfg_rng.random_range(1..=12);
            let r = cfg_rng.random_range(1..=8);
            let k = cfg_rng.random_range(1..=r);
            let task = Quadratic::random(m, n, &stream);
            let base = FrozenBase::new(gaussian_matrix(m, n, &stream.derive(1, 0), 1.0).unwrap());
            let ad = random_pair(m, n, r, &stream);
            let s = sample_random_k(SketchSpec::new(r, k).unwrap(), &stream.derive(domain::SKETCH, 0));
            let w = effective_weight(&base, &ad, &s).unwrap();
            let grads = adapter_grads(&task.grad(&w), &ad, &s).unwrap();

            let h = 1e-6;
            let f = |pair: &AdapterPair| task.loss(&effective_weight(&base, pair, &s).unwrap());
            for i in 0..m {
                for j in 0..r {
                    let (mut plus, mut minus) = (ad.clone(), ad.clone());
                    plus.b.set(i, j, ad.b.get(i, j) + h);
                    minus.b.set(i, j, ad.b.get(i, j) - h);
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    assert!(rel_err(fd, grads.gb.get(i, j)) <= 1e-5, "gb {fd} vs {}", grads.gb.get(i, j));
                }
            }
            for i in 0..r {
                for j in 0..n {
                    let (mut plus, mut minus) = (ad.clone(), ad.clone());
                    plus.a.set(i, j, ad.a.get(i, j) + h);
                    minus.a.set(i, j, ad.a.get(i, j) - h);
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    assert!(rel_err(fd, grads.ga.get(i, j)) <= 1e-5, "ga {fd} vs {}", grads.ga.get(i, j));
                }
            }
        }
    }

    #[test]
    fn sparsity_pattern_is_exact() {
        for t in 0..50 {
            let stream = RngStream::new(8, t);
            let ad = random_pair(4, 5, 8, &stream);
            let g = gaussian_matrix(4, 5, &stream.derive(2, 0), 1.0).unwrap();
            let s = sample_random_k(SketchSpec::new(8, 1 + (t as usize % 8)).unwrap(), &stream.derive(3, 0));
            let grads = adapter_grads(&g, &ad, &s).unwrap();
            for j in (0..8).filter(|&j| !s.contains(j)) {
                assert!(grads.gb.col(j).iter().all(|v| v.to_bits() == 0));
                assert!(grads.ga.row(j).iter().all(|v| v.to_bits() == 0));
            }
        }
    }

    #[test]
    fn identity_grads_are_classical_lora() {
        let stream = RngStream::new(9, 0);
        let ad = random_pair(4, 6, 3, &stream);
        let g = gaussian_matrix(4, 6, &stream.derive(4, 0), 1.0).unwrap();
        let grads = adapter_grads(&g, &ad, &Sketch::identity(3).unwrap()).unwrap();
        assert!(grads.gb.bit_eq(&matmul(&g, &ad.a.transpose()).unwrap()));
        assert!(grads.ga.bit_eq(&matmul(&ad.b.transpose(), &g).unwrap()));
    }

    #[test]
    fn sgd_step_cases() {
        let stream = RngStream::new(10, 0);
        let ad = random_pair(3, 4, 2, &stream);
        let zero = AdapterGrads {
            gb: Matrix::zeros(3, 2),
            ga: Matrix::zeros(2, 4),
        };
        assert!(sgd_step(&ad, &zero, 0.5).unwrap().bit_eq(&ad));

        let same = AdapterGrads {
            gb: ad.b.clone(),
            ga: ad.a.clone(),
        };
        let out = sgd_step(&ad, &same, 1.0).unwrap();
        assert!(out.b.as_slice().iter().all(|v| *v == 0.0));
        assert!(out.a.as_slice().iter().all(|v| *v == 0.0));

        let bad = AdapterGrads {
            gb: Matrix::from_fn(3, 2, |_, _| f64::NAN),
            ga: Matrix::zeros(2, 4),
        };
        assert!(matches!(sgd_step(&ad, &bad, 0.1), Err(Error::Numerical { .. })));
    }

    #[test]
    fn two_steps_match_scripted_oracle() {
        // scalar-ish case: m = n = r = 1, W0 = 0, ℓ(w) = ½(w − 3)²
        let base = FrozenBase::new(Matrix::zeros(1, 1));
        let s = Sketch::identity(1).unwrap();
        let mut ad = AdapterPair::new(Matrix::from_rows(&[[0.5]]).unwrap(), Matrix::from_rows(&[[2.0]]).unwrap()).unwrap();
        let (mut b, mut a) = (0.5f64, 2.0f64);
        for _ in 0..2 {
            let w = effective_weight(&base, &ad, &s).unwrap();
            let g = Matrix::from_rows(&[[w.get(0, 0) - 3.0]]).unwrap();
            ad = sgd_step(&ad, &adapter_grads(&g, &ad, &s).unwrap(), 0.1).unwrap();

            let gw = b * a - 3.0;
            let (nb, na) = (b - 0.1 * gw * a, a - 0.1 * b * gw);
            b = nb;
            a = na;
        }
        assert!((ad.b.get(0, 0) - b).abs() <= 1e-12);
        assert!((ad.a.get(0, 0) - a).abs() <= 1e-12);
    }

    #[test]
    fn extract_delta_cases() {
        let stream = RngStream::new(11, 0);
        let before = random_pair(3, 4, 4, &stream);
        let s = Sketch::from_indices(SketchSpec::new(4, 1).unwrap(), vec![2]).unwrap();

        let d = extract_delta(&before, &before, &s, 0, 0).unwrap();
        assert!(d.payload().iter().all(|v| *v == 0.0));

        let mut after = before.clone();
        after.b.set(1, 2, after.b.get(1, 2) + 1.0);
        after.a.set(2, 0, after.a.get(2, 0) - 0.5);
        let d = extract_delta(&before, &after, &s, 0, 0).unwrap();
        assert_eq!(d.b_cols().shape(), (3, 1));
        assert_eq!(d.a_rows().shape(), (1, 4));
        let (db, da) = d.densify();
        assert!(db.bit_eq(&after.b.sub(&before.b).unwrap()));
        assert!(da.bit_eq(&after.a.sub(&before.a).unwrap()));

        after.b.set(0, 0, after.b.get(0, 0) + 1e-9);
        assert!(matches!(
            extract_delta(&before, &after, &s, 0, 0),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn checksum_tracks_content() {
        let a = FrozenBase::new(Matrix::identity(3));
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.merge(&Matrix::from_fn(3, 3, |_, _| 1e-12)).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }
}
