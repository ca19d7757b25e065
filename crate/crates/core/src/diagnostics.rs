//! Empirical estimators for gradient norms, sketched smoothness, variance
//! and client dissimilarity.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lora::{adapter_grads_scaled, effective_weight_scaled, AdapterGrads, AdapterPair, FrozenBase};
use crate::numerics::{domain, gaussian_matrix, RngStream};
use crate::sketching::{sample_random_k_with, Sketch, SketchSpec};
use crate::tasks::{loss_and_weight_grad, Dataset};

/// Sketch expectations are enumerated exactly up to this many subsets.
pub const MAX_EXACT_SUBSETS: u64 = 5_000;

/// One client's local objective.
#[derive(Clone, Copy, Debug)]
pub struct ClientProblem<'a> {
    pub base: &'a FrozenBase,
    pub data: &'a Dataset,
    pub shard: &'a [usize],
    pub scaling: f64,
}

impl ClientProblem<'_> {
    pub fn gradient(&self, x: &AdapterPair, s: &Sketch, batch: &[usize]) -> Result<AdapterGrads> {
        let w = effective_weight_scaled(self.base, x, s, self.scaling)?;
        let (_, g) = loss_and_weight_grad(&w, self.data, batch)?;
        adapter_grads_scaled(&g, x, s, self.scaling)
    }
}

/// Flattened `[∇_B; ∇_A]`.
fn flat(g: &AdapterGrads) -> Vec<f64> {
    g.gb.as_slice().iter().chain(g.ga.as_slice()).copied().collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// `C(r, k)` for `k ≤ r`, saturating.
pub fn binomial(r: usize, k: usize) -> u64 {
    let k = k.min(r - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((r - i) as u64) / (i as u64 + 1))
}

/// All `k`-subsets of `0..r` in lexicographic order.
pub fn all_sketches(spec: SketchSpec) -> Vec<Sketch> {
    let (r, k) = (spec.r(), spec.k());
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(Sketch::from_indices(spec, idx.clone()).expect("valid subset"));
        let mut p = k;
        while p > 0 && idx[p - 1] == r - k + p - 1 {
            p -= 1;
        }
        if p == 0 {
            return out;
        }
        idx[p - 1] += 1;
        for q in p..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// How to take `E_S[·]`.
#[derive(Clone, Copy, Debug)]
pub enum SketchAverage {
    /// Every subset when there are at most [`MAX_EXACT_SUBSETS`], else
    /// `draws` Monte Carlo sketches from `stream`.
    Auto { draws: usize, stream: RngStream },
    MonteCarlo { draws: usize, stream: RngStream },
}

impl SketchAverage {
    pub fn sketches(&self, spec: SketchSpec) -> Vec<Sketch> {
        match *self {
            SketchAverage::Auto { .. } if binomial(spec.r(), spec.k()) <= MAX_EXACT_SUBSETS => all_sketches(spec),
            SketchAverage::Auto { draws, stream } | SketchAverage::MonteCarlo { draws, stream } => {
                let mut rng = stream.rng();
                (0..draws).map(|_| sample_random_k_with(spec, &mut rng)).collect()
            }
        }
    }
}

/// `∇f^S(X) = E_S ∇_X f(X; S)` over a fixed list of sketches (full shard).
pub fn sketched_gradient(problem: &ClientProblem<'_>, x: &AdapterPair, sketches: &[Sketch]) -> Result<Vec<f64>> {
    let parts = sketches
        .par_iter()
        .map(|s| problem.gradient(x, s, problem.shard).map(|g| flat(&g)))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; parts.first().map_or(0, Vec::len)];
    for p in &parts {
        add_into(&mut acc, p);
    }
    let count = parts.len() as f64;
    Ok(acc.into_iter().map(|v| v / count).collect())
}

/// Random adapter states for probing: `B ~ N(0, b_std²)`, `A` at the
/// classical init scale.
pub fn sample_states(m: usize, n: usize, r: usize, count: usize, b_std: f64, stream: &RngStream) -> Result<Vec<AdapterPair>> {
    (0..count)
        .map(|i| {
            let s = stream.derive(domain::PROBE, i as u64);
            AdapterPair::new(
                gaussian_matrix(m, r, &s.derive(domain::PROBE, 0), b_std)?,
                gaussian_matrix(r, n, &s.derive(domain::PROBE, 1), (1.0 / r as f64).sqrt())?,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradNormStats {
    pub per_state: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// For each state, the mean of `‖∇_X ℓ̃(X, ξ; S)‖` over `draws` pairs of a
/// uniform sample `ξ` and a random-`k` sketch.
pub fn grad_norm_stats(
    problem: &ClientProblem<'_>,
    states: &[AdapterPair],
    k: usize,
    draws: usize,
    stream: &RngStream,
) -> Result<GradNormStats> {
    if states.is_empty() || draws == 0 {
        return Err(Error::Argument("grad_norm_stats needs at least one state and one draw".into()));
    }
    let per_state = states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let spec = SketchSpec::new(x.rank(), k)?;
            let mut rng = stream.derive(domain::DIAGNOSE, i as u64).rng();
            let mut total = 0.0;
            for _ in 0..draws {
                let xi = problem.shard[rng.random_range(0..problem.shard.len())];
                let s = sample_random_k_with(spec, &mut rng);
                total += problem.gradient(x, &s, &[xi])?.frobenius_norm();
            }
            Ok(total / draws as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let min = per_state.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_state.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(GradNormStats { per_state, min, max })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessProbe {
    pub r: usize,
    pub k: usize,
    /// Largest gradient-difference quotient of the sketched objective.
    pub sketched: f64,
    /// Same probes, identity sketch.
    pub unsketched: f64,
    pub ratio: f64,
    /// `r/k`.
    pub bound: f64,
    pub skipped: usize,
    pub exact: bool,
}

/// Estimates `sup ‖∇f^S(X) − ∇f^S(Y)‖ / ‖X − Y‖` on shared probe pairs and
/// divides by the unsketched estimate. Pairs are `Y = X + step·D` with a
/// random unit direction `D`; a zero displacement is skipped and counted.
pub fn smoothness_ratio_probe(
    problem: &ClientProblem<'_>,
    states: &[AdapterPair],
    k: usize,
    step: f64,
    average: SketchAverage,
    stream: &RngStream,
) -> Result<SmoothnessProbe> {
    let first = states
        .first()
        .ok_or_else(|| Error::Argument("smoothness probe needs at least one state".into()))?;
    let (m, n, r) = (first.m(), first.n(), first.rank());
    let spec = SketchSpec::new(r, k)?;
    let sketches = average.sketches(spec);
    let identity = [Sketch::identity(r)?];
    let mut sketched: f64 = 0.0;
    let mut unsketched: f64 = 0.0;
    let mut skipped = 0;
    for (p, x) in states.iter().enumerate() {
        let ds = stream.derive(domain::PROBE, p as u64);
        let db = gaussian_matrix(m, r, &ds.derive(domain::PROBE, 0), 1.0)?;
        let da = gaussian_matrix(r, n, &ds.derive(domain::PROBE, 1), 1.0)?;
        let dnorm = (db.frobenius_sq() + da.frobenius_sq()).sqrt();
        let y = AdapterPair::new(
            x.b.add(&db.scale(step / dnorm))?,
            x.a.add(&da.scale(step / dnorm))?,
        )?;
        let disp = (y.b.sub(&x.b)?.frobenius_sq() + y.a.sub(&x.a)?.frobenius_sq()).sqrt();
        if !(disp > 0.0) {
            skipped += 1;
            continue;
        }
        let gs = norm(&sub(&sketched_gradient(problem, x, &sketches)?, &sketched_gradient(problem, &y, &sketches)?));
        let gu = norm(&sub(&sketched_gradient(problem, x, &identity)?, &sketched_gradient(problem, &y, &identity)?));
        sketched = sketched.max(gs / disp);
        unsketched = unsketched.max(gu / disp);
    }
    let ratio = if unsketched > 0.0 { sketched / unsketched } else { f64::NAN };
    Ok(SmoothnessProbe {
        r,
        k,
        sketched,
        unsketched,
        ratio,
        bound: r as f64 / k as f64,
        skipped,
        exact: binomial(r, k) <= MAX_EXACT_SUBSETS && matches!(average, SketchAverage::Auto { .. }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasednessCheck {
    pub draws: usize,
    pub relative_error: f64,
    pub expected_norm: f64,
}

/// Monte Carlo mean of single-sample sketched gradients against the exact
/// `∇f^S` computed by enumerating every subset.
pub fn unbiasedness_check(
    problem: &ClientProblem<'_>,
    x: &AdapterPair,
    k: usize,
    draws: usize,
    stream: &RngStream,
) -> Result<UnbiasednessCheck> {
    let spec = SketchSpec::new(x.rank(), k)?;
    if binomial(spec.r(), k) > MAX_EXACT_SUBSETS {
        return Err(Error::Argument(format!("C({}, {k}) subsets is too many to enumerate", spec.r())));
    }
    let exact = sketched_gradient(problem, x, &all_sketches(spec))?;
    const CHUNKS: usize = 64;
    let partials = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.derive(domain::DIAGNOSE, c as u64).rng();
            let mut acc = vec![0.0; exact.len()];
            for _ in (c..draws).step_by(CHUNKS) {
                let xi = problem.shard[rng.random_range(0..problem.shard.len())];
                let s = sample_random_k_with(spec, &mut rng);
                add_into(&mut acc, &flat(&problem.gradient(x, &s, &[xi])?));
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; exact.len()];
    for p in &partials {
        add_into(&mut mean, p);
    }
    for v in &mut mean {
        *v /= draws as f64;
    }
    let expected_norm = norm(&exact);
    Ok(UnbiasednessCheck {
        draws,
        relative_error: norm(&sub(&mean, &exact)) / expected_norm,
        expected_norm,
    })
}

/// Non-negative least squares for `y ≈ slope·x + intercept`.
pub fn fit_nonnegative(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    if slope >= 0.0 && intercept >= 0.0 {
        return (slope, intercept);
    }
    if slope < 0.0 {
        return (0.0, my.max(0.0));
    }
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (if xx > 0.0 { (xy / xx).max(0.0) } else { 0.0 }, 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientGradNorms {
    pub client: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionEstimates {
    pub r: usize,
    pub k: usize,
    pub states: usize,
    pub draws: usize,
    pub grad_norms: Vec<ClientGradNorms>,
    /// Variance fit `E‖∇ℓ̃ − ∇f^S‖² ≈ ρ‖∇f^S‖² + σ²`.
    pub rho: f64,
    pub sigma2: f64,
    /// Dissimilarity fit `mean_i ‖∇f_i^S − ∇f^S‖² ≈ c_h‖∇f^S‖² + δ_h²`.
    pub c_h: f64,
    pub delta_h2: f64,
    pub smoothness: Vec<SmoothnessProbe>,
}

#[derive(Clone, Debug)]
pub struct DiagnoseSettings {
    pub k: usize,
    pub states: usize,
    pub draws: usize,
    pub sketch_draws: usize,
    pub probes: usize,
    pub probe_ks: Vec<usize>,
    pub probe_step: f64,
    pub b_std: f64,
}

/// Runs every estimator over the given clients at shared random states.
pub fn estimate_assumptions(
    base: &FrozenBase,
    data: &Dataset,
    shards: &[(usize, &[usize])],
    r: usize,
    scaling: f64,
    settings: &DiagnoseSettings,
    stream: &RngStream,
) -> Result<AssumptionEstimates> {
    if shards.is_empty() || settings.states == 0 || settings.draws == 0 {
        return Err(Error::Argument("diagnostics need clients, states and draws".into()));
    }
    let (m, n) = base.shape();
    let states = sample_states(m, n, r, settings.states, settings.b_std, &stream.derive(domain::DIAGNOSE, 0))?;
    let spec = SketchSpec::new(r, settings.k)?;
    let average = SketchAverage::Auto {
        draws: settings.sketch_draws,
        stream: stream.derive(domain::DIAGNOSE, 1),
    };
    let sketches = average.sketches(spec);
    let problems: Vec<ClientProblem<'_>> = shards
        .iter()
        .map(|(_, shard)| ClientProblem { base, data, shard, scaling })
        .collect();

    let mut grad_norms = Vec::new();
    for ((client, _), p) in shards.iter().zip(&problems) {
        let stats = grad_norm_stats(p, &states, settings.k, settings.draws, &stream.derive(domain::CLIENT, *client as u64))?;
        grad_norms.push(ClientGradNorms {
            client: *client,
            min: stats.min,
            max: stats.max,
        });
    }

    let mut var_x = Vec::new();
    let mut var_y = Vec::new();
    let mut dis_x = Vec::new();
    let mut dis_y = Vec::new();
    for (si, x) in states.iter().enumerate() {
        let per_client = problems
            .iter()
            .map(|p| sketched_gradient(p, x, &sketches))
            .collect::<Result<Vec<_>>>()?;
        let mut global = vec![0.0; per_client[0].len()];
        for g in &per_client {
            add_into(&mut global, g);
        }
        for v in &mut global {
            *v /= per_client.len() as f64;
        }
        let gnorm2 = norm(&global).powi(2);
        dis_x.push(gnorm2);
        dis_y.push(per_client.iter().map(|g| norm(&sub(g, &global)).powi(2)).sum::<f64>() / per_client.len() as f64);

        // variance of the single-sample estimator around client 0's mean
        let p = &problems[0];
        let mut rng = stream.derive(domain::DIAGNOSE, 100 + si as u64).rng();
        let mut acc = 0.0;
        for _ in 0..settings.draws {
            let xi = p.shard[rng.random_range(0..p.shard.len())];
            let s = sample_random_k_with(spec, &mut rng);
            acc += norm(&sub(&flat(&p.gradient(x, &s, &[xi])?), &per_client[0])).powi(2);
        }
        var_x.push(norm(&per_client[0]).powi(2));
        var_y.push(acc / settings.draws as f64);
    }
    let (rho, sigma2) = fit_nonnegative(&var_x, &var_y);
    let (c_h, delta_h2) = fit_nonnegative(&dis_x, &dis_y);

    let probe_states = &states[..settings.probes.min(states.len())];
    let smoothness = settings
        .probe_ks
        .iter()
        .map(|&k| {
            let average = SketchAverage::Auto {
                draws: settings.sketch_draws,
                stream: stream.derive(domain::DIAGNOSE, 2),
            };
            smoothness_ratio_probe(&problems[0], probe_states, k, settings.probe_step, average, &stream.derive(domain::DIAGNOSE, 3))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AssumptionEstimates {
        r,
        k: settings.k,
        states: settings.states,
        draws: settings.draws,
        grad_norms,
        rho,
        sigma2,
        c_h,
        delta_h2,
        smoothness,
    })
}
