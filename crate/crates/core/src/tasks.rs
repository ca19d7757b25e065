//! Synthetic objectives with analytic gradients and non-IID sharding.
//!
//! Every task hides a low-rank perturbation `W* = W0 + B*·A*` of a random
//! base, so adapters of sufficient rank can represent the optimum exactly.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix_with, matmul, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    LeastSquares,
    MultinomialLogistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub m: usize,
    pub n: usize,
    pub true_rank: usize,
    pub samples: usize,
    pub noise: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Range("task shape must be non-empty".into()));
        }
        if self.true_rank > self.m.min(self.n) {
            return Err(Error::Range(format!(
                "true rank {} exceeds min(m, n) = {}",
                self.true_rank,
                self.m.min(self.n)
            )));
        }
        if self.samples == 0 {
            return Err(Error::Range("sample count must be >= 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Range(format!("noise stddev {} must be >= 0", self.noise)));
        }
        if self.kind == TaskKind::MultinomialLogistic && self.m < 2 {
            return Err(Error::Range("logistic task needs at least 2 classes (m >= 2)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `samples × m`
    Regression(Matrix),
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub noise: f64,
    pub true_rank: usize,
    /// `samples × n`, one input per row.
    pub inputs: Matrix,
    pub targets: Targets,
    pub w0: Matrix,
    pub w_star: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.w0.rows()
    }

    pub fn n(&self) -> usize {
        self.w0.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        match &self.targets {
            Targets::Labels(l) => Some(l[i]),
            Targets::Regression(_) => None,
        }
    }

    /// Fresh samples from the same generative process (same `W0`, `W*`).
    pub fn resample(&self, count: usize, stream: &RngStream) -> Dataset {
        let mut rng = stream.rng();
        let (inputs, targets) = draw_samples(self.kind, &self.w_star, count, self.noise, &mut rng);
        Dataset {
            inputs,
            targets,
            ..self.clone()
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn draw_samples<R: Rng + ?Sized>(
    kind: TaskKind,
    w_star: &Matrix,
    count: usize,
    noise: f64,
    rng: &mut R,
) -> (Matrix, Targets) {
    let (m, n) = w_star.shape();
    let inputs = Matrix::from_fn(count, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let targets = match kind {
        TaskKind::LeastSquares => {
            let mut y = Matrix::zeros(count, m);
            for s in 0..count {
                let clean = matvec(w_star, inputs.row(s));
                for (i, v) in clean.into_iter().enumerate() {
                    let eps = if noise > 0.0 {
                        noise * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    y.set(s, i, v + eps);
                }
            }
            Targets::Regression(y)
        }
        TaskKind::MultinomialLogistic => {
            let labels = (0..count)
                .map(|s| {
                    let p = softmax(&matvec(w_star, inputs.row(s)));
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    p.iter()
                        .position(|pi| {
                            acc += pi;
                            u < acc
                        })
                        .unwrap_or(m - 1)
                })
                .collect();
            Targets::Labels(labels)
        }
    };
    (inputs, targets)
}

/// Draws `W0`, a rank-`true_rank` perturbation and `samples` observations.
pub fn generate_task(spec: &TaskSpec, stream: &RngStream) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream.rng();
    let (m, n, t) = (spec.m, spec.n, spec.true_rank);
    let w0 = gaussian_matrix_with(m, n, &mut rng, 1.0 / (n as f64).sqrt())?;
    let w_star = if t == 0 {
        w0.clone()
    } else {
        let b_star = gaussian_matrix_with(m, t, &mut rng, 1.0 / (t as f64).sqrt())?;
        let a_star = gaussian_matrix_with(t, n, &mut rng, 1.0 / (n as f64).sqrt())?;
        w0.add(&matmul(&b_star, &a_star)?)?
    };
    let (inputs, targets) = draw_samples(spec.kind, &w_star, spec.samples, spec.noise, &mut rng);
    Ok(Dataset {
        kind: spec.kind,
        noise: spec.noise,
        true_rank: t,
        inputs,
        targets,
        w0,
        w_star,
    })
}

/// Mean loss and `∇_W` over the given sample indices.
///
/// Least squares: `ℓ = ½‖Wx − y‖²`, `∇ = (Wx − y)xᵀ`.
/// Logistic: `ℓ = −log softmax(Wx)_y`, `∇ = (softmax(Wx) − e_y)xᵀ`.
pub fn loss_and_weight_grad(w: &Matrix, data: &Dataset, batch: &[usize]) -> Result<(f64, Matrix)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if w.shape() != data.w0.shape() {
        return Err(Error::shape("loss_and_weight_grad", w.shape(), data.w0.shape()));
    }
    let (m, n) = w.shape();
    let mut grad = Matrix::zeros(m, n);
    let mut loss = 0.0;
    for &s in batch {
        let x = data.input(s);
        let pred = matvec(w, x);
        let resid: Vec<f64> = match &data.targets {
            Targets::Regression(y) => {
                let r: Vec<f64> = pred.iter().zip(y.row(s)).map(|(p, t)| p - t).collect();
                loss += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
                r
            }
            Targets::Labels(labels) => {
                let y = labels[s];
                let mut p = softmax(&pred);
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                p
            }
        };
        for (i, ri) in resid.iter().enumerate() {
            if *ri == 0.0 {
                continue;
            }
            for (g, xj) in grad.row_mut(i).iter_mut().zip(x) {
                *g += ri * xj;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grad = grad.scale(scale);
    let loss = loss * scale;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::numerical("loss_and_weight_grad: non-finite output", 0));
    }
    Ok((loss, grad))
}

/// Samples owned by one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

const MAX_PARTITION_ATTEMPTS: usize = 100_000;

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Range(format!("dirichlet alpha {alpha}: {e}")))?;
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(g.into_iter().map(|v| v / total).collect());
        }
    }
}

/// Largest-remainder rounding of `shares · total`; ties go to the lower index.
fn apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet(α) split. Least squares splits sizes; logistic splits each
/// class separately. Draws are repeated until every client owns a sample.
pub fn dirichlet_partition(
    data: &Dataset,
    n_clients: usize,
    alpha: f64,
    stream: &RngStream,
) -> Result<Vec<Shard>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Range(format!("dirichlet alpha {alpha} must be > 0")));
    }
    if n_clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if n_clients > data.len() {
        return Err(Error::InfeasiblePartition {
            clients: n_clients,
            samples: data.len(),
        });
    }
    let mut rng = stream.rng();
    if n_clients == 1 {
        return Ok(vec![Shard {
            owner: 0,
            indices: data.all_indices(),
        }]);
    }

    let groups: Vec<Vec<usize>> = match &data.targets {
        Targets::Regression(_) => vec![data.all_indices()],
        Targets::Labels(labels) => {
            let classes = data.m();
            let mut g = vec![Vec::new(); classes];
            for (i, &c) in labels.iter().enumerate() {
                g[c].push(i);
            }
            g.into_iter().filter(|v| !v.is_empty()).collect()
        }
    };

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut owned = vec![Vec::new(); n_clients];
        for group in &groups {
            let shares = dirichlet(alpha, n_clients, &mut rng)?;
            let counts = apportion(&shares, group.len());
            let mut members = group.clone();
            members.shuffle(&mut rng);
            let mut start = 0;
            for (client, c) in counts.into_iter().enumerate() {
                owned[client].extend_from_slice(&members[start..start + c]);
                start += c;
            }
        }
        if owned.iter().all(|o| !o.is_empty()) {
            return Ok(owned
                .into_iter()
                .enumerate()
                .map(|(owner, mut indices)| {
                    indices.sort_unstable();
                    Shard { owner, indices }
                })
                .collect());
        }
    }
    Err(Error::numerical("dirichlet_partition re-draw", MAX_PARTITION_ATTEMPTS))
}

/// Shuffled near-equal split (sizes differ by at most one).
pub fn iid_partition(data: &Dataset, n_clients: usize, stream: &RngStream) -> Result<Vec<Shard>> {
    if n_clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if n_clients > data.len() {
        return Err(Error::InfeasiblePartition {
            clients: n_clients,
            samples: data.len(),
        });
    }
    let mut order = data.all_indices();
    order.shuffle(&mut stream.rng());
    let base = data.len() / n_clients;
    let extra = data.len() % n_clients;
    let mut start = 0;
    Ok((0..n_clients)
        .map(|owner| {
            let size = base + usize::from(owner < extra);
            let mut indices = order[start..start + size].to_vec();
            start += size;
            indices.sort_unstable();
            Shard { owner, indices }
        })
        .collect())
}

const MAGIC: &[u8; 8] = b"FSLDSET1";

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Binary dataset layout, all little-endian:
///
/// ```text
/// magic "FSLDSET1"
/// u64 kind (0 least-squares, 1 logistic), m, n, true_rank, samples
/// f64 noise
/// f64 W0 (m·n, row-major), W* (m·n), inputs (samples·n)
/// f64 targets: samples·m for least squares, one label value per sample for logistic
/// ```
pub fn write_dataset(data: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let kind = match data.kind {
        TaskKind::LeastSquares => 0,
        TaskKind::MultinomialLogistic => 1,
    };
    for v in [kind, data.m() as u64, data.n() as u64, data.true_rank as u64, data.len() as u64] {
        put_u64(w, v)?;
    }
    put_f64s(w, &[data.noise])?;
    put_f64s(w, data.w0.as_slice())?;
    put_f64s(w, data.w_star.as_slice())?;
    put_f64s(w, data.inputs.as_slice())?;
    match &data.targets {
        Targets::Regression(y) => put_f64s(w, y.as_slice())?,
        Targets::Labels(l) => put_f64s(w, &l.iter().map(|v| *v as f64).collect::<Vec<_>>())?,
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let kind = match get_u64(r)? {
        0 => TaskKind::LeastSquares,
        1 => TaskKind::MultinomialLogistic,
        other => return Err(Error::Format(format!("unknown task kind {other}"))),
    };
    let m = get_u64(r)? as usize;
    let n = get_u64(r)? as usize;
    let true_rank = get_u64(r)? as usize;
    let samples = get_u64(r)? as usize;
    let noise = get_f64s(r, 1)?[0];
    let w0 = Matrix::new(m, n, get_f64s(r, m * n)?)?;
    let w_star = Matrix::new(m, n, get_f64s(r, m * n)?)?;
    let inputs = Matrix::new(samples, n, get_f64s(r, samples * n)?)?;
    let targets = match kind {
        TaskKind::LeastSquares => Targets::Regression(Matrix::new(samples, m, get_f64s(r, samples * m)?)?),
        TaskKind::MultinomialLogistic => {
            let raw = get_f64s(r, samples)?;
            let labels: Vec<usize> = raw.iter().map(|v| *v as usize).collect();
            if raw.iter().zip(&labels).any(|(v, l)| *v != *l as f64 || *l >= m) {
                return Err(Error::Format("invalid class label".into()));
            }
            Targets::Labels(labels)
        }
    };
    Ok(Dataset {
        kind,
        noise,
        true_rank,
        inputs,
        targets,
        w0,
        w_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{adapter_grads, effective_weight, sgd_step, AdapterPair, FrozenBase};
    use crate::sketching::Sketch;

    fn spec(kind: TaskKind, noise: f64) -> TaskSpec {
        TaskSpec {
            kind,
            m: 6,
            n: 5,
            true_rank: 2,
            samples: 200,
            noise,
        }
    }

    #[test]
    fn noiseless_targets_are_consistent() {
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(1, 0)).unwrap();
        let (loss, g) = loss_and_weight_grad(&d.w_star, &d, &d.all_indices()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_true_rank_means_no_perturbation() {
        let mut s = spec(TaskKind::LeastSquares, 0.1);
        s.true_rank = 0;
        let d = generate_task(&s, &RngStream::new(2, 0)).unwrap();
        assert!(d.w_star.bit_eq(&d.w0));
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [TaskKind::LeastSquares, TaskKind::MultinomialLogistic] {
            let a = generate_task(&spec(kind, 0.3), &RngStream::new(3, 0)).unwrap();
            let b = generate_task(&spec(kind, 0.3), &RngStream::new(3, 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbation_rank_bounded() {
        use crate::numerics::truncated_svd;
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(4, 0)).unwrap();
        let diff = d.w_star.sub(&d.w0).unwrap();
        let svd = truncated_svd(&diff, 5).unwrap();
        assert!(svd.s[2] < 1e-10 * svd.s[0]);
    }

    #[test]
    fn hand_computed_single_sample() {
        let mut d = generate_task(
            &TaskSpec {
                kind: TaskKind::LeastSquares,
                m: 2,
                n: 2,
                true_rank: 0,
                samples: 1,
                noise: 0.0,
            },
            &RngStream::new(0, 0),
        )
        .unwrap();
        d.inputs = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        d.targets = Targets::Regression(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let (loss, g) = loss_and_weight_grad(&Matrix::zeros(2, 2), &d, &[0]).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(g, Matrix::from_rows(&[[-1.0, 0.0], [0.0, 0.0]]).unwrap());
    }

    #[test]
    fn empty_batch_rejected() {
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(5, 0)).unwrap();
        assert!(matches!(
            loss_and_weight_grad(&d.w0, &d, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        for kind in [TaskKind::LeastSquares, TaskKind::MultinomialLogistic] {
            let d = generate_task(&spec(kind, 0.2), &RngStream::new(6, 0)).unwrap();
            let batch: Vec<usize> = (0..17).collect();
            let w = d.w0.scale(0.7);
            let (_, g) = loss_and_weight_grad(&w, &d, &batch).unwrap();
            let h = 1e-6;
            for i in 0..d.m() {
                for j in 0..d.n() {
                    let mut plus = w.clone();
                    let mut minus = w.clone();
                    plus.set(i, j, w.get(i, j) + h);
                    minus.set(i, j, w.get(i, j) - h);
                    let fd = (loss_and_weight_grad(&plus, &d, &batch).unwrap().0
                        - loss_and_weight_grad(&minus, &d, &batch).unwrap().0)
                        / (2.0 * h);
                    let rel = (fd - g.get(i, j)).abs() / fd.abs().max(g.get(i, j).abs()).max(1e-3);
                    assert!(rel <= 1e-6, "{kind:?} ({i},{j}): fd {fd} vs {}", g.get(i, j));
                }
            }
        }
    }

    #[test]
    fn task_is_realizable_by_adapters() {
        let s = TaskSpec {
            kind: TaskKind::LeastSquares,
            m: 8,
            n: 6,
            true_rank: 2,
            samples: 100,
            noise: 0.0,
        };
        let d = generate_task(&s, &RngStream::new(7, 0)).unwrap();
        let base = FrozenBase::new(d.w0.clone());
        let sk = Sketch::identity(3).unwrap();
        let mut ad = AdapterPair::init(8, 6, 3, &RngStream::new(7, 1)).unwrap();
        let all = d.all_indices();
        let mut loss = f64::INFINITY;
        for _ in 0..20_000 {
            let w = effective_weight(&base, &ad, &sk).unwrap();
            let (l, g) = loss_and_weight_grad(&w, &d, &all).unwrap();
            loss = l;
            if loss < 1e-7 {
                break;
            }
            ad = sgd_step(&ad, &adapter_grads(&g, &ad, &sk).unwrap(), 0.1).unwrap();
        }
        assert!(loss < 1e-6, "final loss {loss}");
    }

    fn check_partition(shards: &[Shard], total: usize) {
        let mut seen = vec![false; total];
        for s in shards {
            assert!(!s.indices.is_empty());
            for &i in &s.indices {
                assert!(!seen[i], "sample {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.into_iter().all(|v| v));
    }

    #[test]
    fn single_client_gets_everything() {
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(8, 0)).unwrap();
        let shards = dirichlet_partition(&d, 1, 0.1, &RngStream::new(8, 1)).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, d.all_indices());
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        for kind in [TaskKind::LeastSquares, TaskKind::MultinomialLogistic] {
            let d = generate_task(&spec(kind, 0.1), &RngStream::new(9, 0)).unwrap();
            for (seed, alpha, clients) in [(0, 0.1, 10), (1, 1.0, 7), (2, 100.0, 3)] {
                let shards = dirichlet_partition(&d, clients, alpha, &RngStream::new(seed, 2)).unwrap();
                assert_eq!(shards.len(), clients);
                check_partition(&shards, d.len());
            }
            check_partition(&iid_partition(&d, 9, &RngStream::new(0, 3)).unwrap(), d.len());
        }
    }

    #[test]
    fn infeasible_partition() {
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(10, 0)).unwrap();
        assert!(matches!(
            dirichlet_partition(&d, 201, 1.0, &RngStream::new(0, 0)),
            Err(Error::InfeasiblePartition { .. })
        ));
        assert!(dirichlet_partition(&d, 2, 0.0, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn large_alpha_is_nearly_even() {
        let mut s = spec(TaskKind::LeastSquares, 0.0);
        s.samples = 10_000;
        let d = generate_task(&s, &RngStream::new(11, 0)).unwrap();
        let shards = dirichlet_partition(&d, 10, 1000.0, &RngStream::new(11, 1)).unwrap();
        for sh in shards {
            assert!((900..=1100).contains(&sh.indices.len()), "{}", sh.indices.len());
        }
    }

    #[test]
    fn small_alpha_is_skewed() {
        let d = generate_task(&spec(TaskKind::LeastSquares, 0.0), &RngStream::new(12, 0)).unwrap();
        let skewed = (0..100)
            .filter(|&seed| {
                let shards = dirichlet_partition(&d, 10, 0.1, &RngStream::new(seed, 4)).unwrap();
                let max = shards.iter().map(|s| s.indices.len()).max().unwrap();
                max as f64 / d.len() as f64 >= 0.25
            })
            .count();
        assert!(skewed >= 50, "{skewed} of 100 seeds skewed");
    }

    #[test]
    fn dataset_file_round_trip() {
        for kind in [TaskKind::LeastSquares, TaskKind::MultinomialLogistic] {
            let d = generate_task(&spec(kind, 0.2), &RngStream::new(13, 0)).unwrap();
            let mut buf = Vec::new();
            write_dataset(&d, &mut buf).unwrap();
            let back = read_dataset(&mut buf.as_slice()).unwrap();
            assert_eq!(back, d);
        }
        assert!(read_dataset(&mut &b"NOTADATA"[..]).is_err());
    }
}
