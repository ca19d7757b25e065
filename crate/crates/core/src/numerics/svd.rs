//! Truncated SVD via one-sided (Hestenes) Jacobi rotations.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 80;

/// `m ≈ u · diag(s) · vᵀ` with `s` non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul(&self.v.transpose())
            .expect("svd factors have consistent shapes")
    }
}

/// Best rank-`target_rank` approximation factors of `m` in Frobenius norm.
pub fn truncated_svd(m: &Matrix, target_rank: usize) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if target_rank == 0 || target_rank > rows.min(cols) {
        return Err(Error::Range(format!(
            "target rank {target_rank} outside [1, {}]",
            rows.min(cols)
        )));
    }
    if rows >= cols {
        let full = jacobi_tall(m)?;
        Ok(truncate(full, target_rank))
    } else {
        let full = jacobi_tall(&m.transpose())?;
        let t = truncate(full, target_rank);
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn truncate(full: Svd, k: usize) -> Svd {
    Svd {
        u: full.u.leading_cols(k),
        s: full.s[..k].to_vec(),
        v: full.v.leading_cols(k),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full thin SVD for rows ≥ cols.
fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-15;
    // columns this small are numerically zero; rotating them never settles
    let floor = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || alpha <= floor || beta <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical("one-sided Jacobi SVD", sweeps));
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::numerical("one-sided Jacobi SVD (non-finite input)", sweeps));
    }
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms[order[0]];
    let negligible = smax * (rows as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut s = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    for &j in &order {
        let sigma = norms[j];
        if sigma > negligible && sigma > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(Vec::new());
            s.push(0.0);
        }
        v_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, rows);

    let u = Matrix::from_fn(rows, cols, |i, j| u_cols[j][i]);
    let v = Matrix::from_fn(cols, cols, |i, j| v_cols[j][i]);
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty slots (null singular directions) with unit vectors orthogonal
/// to every filled slot, by Gram-Schmidt over the canonical basis.
fn complete_basis(cols: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if !cols[slot].is_empty() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, RngStream};

    fn orthonormality_error(q: &Matrix) -> f64 {
        let gram = q.transpose().matmul(q).unwrap();
        gram.max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let svd = truncated_svd(&Matrix::identity(3), 3).unwrap();
        for s in &svd.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_reconstruction() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.7, -1.1];
        let m = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let svd = truncated_svd(&m, 1).unwrap();
        assert!(svd.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-10);
    }

    #[test]
    fn rank_two_truncated_residual_is_second_singular_value() {
        // M = 5 u1 v1ᵀ + 2 u2 v2ᵀ with orthonormal u's and v's
        let h = 0.5;
        let u1 = [h, h, h, h];
        let u2 = [h, -h, h, -h];
        let v1 = [h, h, -h, -h];
        let v2 = [h, -h, -h, h];
        let m = Matrix::from_fn(4, 4, |i, j| 5.0 * u1[i] * v1[j] + 2.0 * u2[i] * v2[j]);
        let svd = truncated_svd(&m, 1).unwrap();
        assert!((svd.s[0] - 5.0).abs() < 1e-12);
        let residual = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!((residual - 2.0).abs() < 1e-8, "{residual}");
    }

    #[test]
    fn postconditions_on_random_wide_and_tall() {
        for (rows, cols, k) in [(6, 4, 3), (4, 7, 4), (5, 5, 2)] {
            let m = gaussian_matrix(rows, cols, &RngStream::new(3, rows as u64), 1.0).unwrap();
            let svd = truncated_svd(&m, k).unwrap();
            assert_eq!(svd.u.shape(), (rows, k));
            assert_eq!(svd.v.shape(), (cols, k));
            assert!(orthonormality_error(&svd.u) < 1e-8);
            assert!(orthonormality_error(&svd.v) < 1e-8);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(svd.s.iter().all(|s| *s >= 0.0));
        }
    }

    #[test]
    fn full_rank_reconstructs() {
        let m = gaussian_matrix(7, 5, &RngStream::new(8, 1), 2.0).unwrap();
        let svd = truncated_svd(&m, 5).unwrap();
        let rel = svd.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let m = Matrix::zeros(4, 3);
        let svd = truncated_svd(&m, 3).unwrap();
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(svd.s.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn rank_out_of_range() {
        let m = Matrix::identity(3);
        assert!(matches!(truncated_svd(&m, 0), Err(Error::Range(_))));
        assert!(matches!(truncated_svd(&m, 4), Err(Error::Range(_))));
    }
}
