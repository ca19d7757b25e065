//! Pairwise additive masks supported on sketch-index intersections.

use crate::error::{Error, Result};
use crate::federation::SparseDelta;
use crate::numerics::{domain, gaussian_matrix, Matrix, RngStream};
use crate::sketching::Sketch;

/// Pre-shared pair seeds, modeled as streams derived from one root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSeeds {
    root: RngStream,
}

impl PairSeeds {
    pub fn new(root: RngStream) -> Self {
        Self { root }
    }

    /// Stream shared by clients `i < j` for `round`.
    pub fn stream(&self, i: usize, j: usize, round: usize) -> RngStream {
        let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
        self.root
            .derive(domain::PAIR, (lo << 32) | hi)
            .derive(domain::MASK, round as u64)
    }
}

/// `M_ij` for `i < j`; `M_ji` is `−M_ij`. `b` is `m×|support|` and `a` is
/// `|support|×n`, column/row `t` belonging to `support[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMask {
    pub i: usize,
    pub j: usize,
    pub support: Vec<usize>,
    pub b: Matrix,
    pub a: Matrix,
}

/// `R_i = Σ_{j>i} M_ij − Σ_{j<i} M_ji` in dense form (`m×r`, `r×n`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClientMask {
    pub client: usize,
    pub b: Matrix,
    pub a: Matrix,
}

impl ClientMask {
    pub fn is_zero(&self) -> bool {
        self.b.as_slice().iter().chain(self.a.as_slice()).all(|v| *v == 0.0)
    }
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|j| b.binary_search(j).is_ok()).collect()
}

/// One mask per unordered pair of participants, in lexicographic `(i, j)`
/// order. Pairs with disjoint index sets get an empty support.
pub fn derive_pair_masks(
    sketches: &[(usize, &Sketch)],
    seeds: &PairSeeds,
    round: usize,
    m: usize,
    n: usize,
    stddev: f64,
) -> Result<Vec<PairMask>> {
    let mut ordered: Vec<(usize, &Sketch)> = sketches.to_vec();
    ordered.sort_by_key(|(id, _)| *id);
    if ordered.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol("duplicate participant in mask derivation".into()));
    }
    let mut pairs = Vec::new();
    for (x, &(i, si)) in ordered.iter().enumerate() {
        for &(j, sj) in &ordered[x + 1..] {
            let support = intersect(si.indices(), sj.indices());
            let stream = seeds.stream(i, j, round);
            let b = gaussian_matrix(m, support.len(), &stream.derive(domain::MASK, 0), stddev)?;
            let a = gaussian_matrix(support.len(), n, &stream.derive(domain::MASK, 1), stddev)?;
            pairs.push(PairMask { i, j, support, b, a });
        }
    }
    Ok(pairs)
}

fn accumulate(mask: &mut ClientMask, pair: &PairMask, sign: f64) {
    for (t, &col) in pair.support.iter().enumerate() {
        for row in 0..mask.b.rows() {
            let v = mask.b.get(row, col) + sign * pair.b.get(row, t);
            mask.b.set(row, col, v);
        }
        for (dst, src) in mask.a.row_mut(col).iter_mut().zip(pair.a.row(t)) {
            *dst += sign * *src;
        }
    }
}

/// Client masks in the same order as `sketches`.
pub fn derive_masks(
    sketches: &[(usize, &Sketch)],
    seeds: &PairSeeds,
    round: usize,
    m: usize,
    n: usize,
    stddev: f64,
) -> Result<Vec<ClientMask>> {
    let pairs = derive_pair_masks(sketches, seeds, round, m, n, stddev)?;
    let mut masks: Vec<ClientMask> = sketches
        .iter()
        .map(|(id, s)| ClientMask {
            client: *id,
            b: Matrix::zeros(m, s.r()),
            a: Matrix::zeros(s.r(), n),
        })
        .collect();
    let slot = |id: usize| sketches.iter().position(|(c, _)| *c == id).expect("pair member is a participant");
    for pair in &pairs {
        accumulate(&mut masks[slot(pair.i)], pair, 1.0);
        accumulate(&mut masks[slot(pair.j)], pair, -1.0);
    }
    Ok(masks)
}

/// Reference cancellation: each pair mask is added and immediately
/// subtracted, so the result is exactly zero.
pub fn canonical_mask_sum(pairs: &[PairMask], m: usize, n: usize, r: usize) -> (Matrix, Matrix) {
    let mut total = ClientMask {
        client: usize::MAX,
        b: Matrix::zeros(m, r),
        a: Matrix::zeros(r, n),
    };
    for pair in pairs {
        accumulate(&mut total, pair, 1.0);
        accumulate(&mut total, pair, -1.0);
    }
    (total.b, total.a)
}

/// Shifts the payload by the mask. The mask must vanish outside the
/// delta's index set.
pub fn mask_delta(delta: &SparseDelta, mask: &ClientMask) -> Result<SparseDelta> {
    if mask.client != delta.client {
        return Err(Error::Protocol(format!(
            "mask for client {} applied to client {}",
            mask.client, delta.client
        )));
    }
    if mask.b.shape() != (delta.m(), delta.rank()) || mask.a.shape() != (delta.rank(), delta.n()) {
        return Err(Error::shape("mask_delta", mask.b.shape(), (delta.m(), delta.rank())));
    }
    if delta.kept().is_some() {
        return Err(Error::Protocol("masking a top-k compressed delta would expose its sparsity".into()));
    }
    let idx = delta.indices();
    for j in (0..delta.rank()).filter(|j| idx.binary_search(j).is_err()) {
        let leaks = mask.b.col(j).iter().any(|v| *v != 0.0) || mask.a.row(j).iter().any(|v| *v != 0.0);
        if leaks {
            return Err(Error::Protocol(format!(
                "mask for client {} writes outside its index set at {j}",
                delta.client
            )));
        }
    }
    let b_cols = Matrix::from_fn(delta.m(), idx.len(), |i, t| delta.b_cols().get(i, t) + mask.b.get(i, idx[t]));
    let a_rows = Matrix::from_fn(idx.len(), delta.n(), |t, c| delta.a_rows().get(t, c) + mask.a.get(idx[t], c));
    SparseDelta::new(delta.client, delta.round, delta.rank(), idx.to_vec(), b_cols, a_rows)
}

/// Sum of the densified masked deltas in ascending client id. Every
/// expected participant must be present exactly once.
pub fn secure_aggregate(masked: &[SparseDelta], participants: &[usize]) -> Result<(Matrix, Matrix)> {
    let mut got: Vec<usize> = masked.iter().map(|d| d.client).collect();
    got.sort_unstable();
    let mut want = participants.to_vec();
    want.sort_unstable();
    if got != want {
        return Err(Error::Protocol(format!(
            "masked deltas from {got:?} but round participants are {want:?}; masks would not cancel"
        )));
    }
    let first = masked
        .first()
        .ok_or_else(|| Error::Protocol("no masked deltas to aggregate".into()))?;
    let mut ordered: Vec<&SparseDelta> = masked.iter().collect();
    ordered.sort_by_key(|d| d.client);
    let mut sum_b = Matrix::zeros(first.m(), first.rank());
    let mut sum_a = Matrix::zeros(first.rank(), first.n());
    for d in ordered {
        let (db, da) = d.densify();
        sum_b.add_assign(&db)?;
        sum_a.add_assign(&da)?;
    }
    Ok((sum_b, sum_a))
}
