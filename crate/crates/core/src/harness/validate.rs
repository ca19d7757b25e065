use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{average_product, flora_round, run_baseline, stack_adapters, svd_factors};
use crate::costs::{downlink_bytes, uplink_bytes, CostParams, Method, BYTES_PER_PARAM};
use crate::diagnostics::{
    sample_states, smoothness_ratio_probe, unbiasedness_check, ClientProblem, SketchAverage,
};
use crate::error::{Error, Result};
use crate::federation::{plan_round, run_experiment, train_local, ClientConfig, RankSchedule, SparseDelta};
use crate::lora::{adapter_grads, effective_weight, extract_delta, AdapterPair, FrozenBase};
use crate::numerics::{gaussian_matrix, matmul, truncated_svd, Matrix, RngStream};
use crate::secure_agg::{derive_masks, mask_delta, secure_aggregate, PairSeeds};
use crate::sketching::{apply_right, sample_random_k, sample_random_k_with, Sketch, SketchSpec};
use crate::tasks::{generate_task, loss_and_weight_grad, Dataset, Shard, TaskKind, TaskSpec};

use super::config::{standard_config, Config};
use super::run::{diff_artifacts, replay, run_config, MANIFEST_FILE, TOPK_LOSS_FACTOR_LIMIT};

/// Deliberate defects that a check must catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Drops the `Sᵀ` factor from `∇_A`.
    DropSketch,
}

#[derive(Clone, Debug, Default)]
pub struct ValidateOptions {
    /// Check names to run; empty runs the whole suite.
    pub only: Vec<String>,
    pub mutation: Option<Mutation>,
    pub seed: u64,
    /// Skip the multi-seed trend experiments.
    pub quick: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

type CheckFn = fn(&ValidateOptions) -> Result<(bool, String)>;

/// `(name, slow, check)`.
pub const CHECKS: &[(&str, bool, CheckFn)] = &[
    ("sketched-gradient", false, check_sketched_gradient),
    ("sketch-unbiased", false, check_sketch_unbiased),
    ("sketch-bounds", false, check_sketch_bounds),
    ("fedlora-equivalence", false, check_fedlora_equivalence),
    ("secure", false, check_secure),
    ("costs", false, check_costs),
    ("sparsity", false, check_sparsity),
    ("flexlora", false, check_flexlora),
    ("flora", false, check_flora),
    ("smoothness", false, check_smoothness),
    ("gradient-unbiased", false, check_gradient_unbiased),
    ("determinism", false, check_determinism),
    ("ratio-trend", true, check_ratio_trend),
    ("local-steps-trend", true, check_local_steps_trend),
    ("topk", true, check_topk),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _, _)| *n).collect()
}

/// Runs the selected checks in order. A check that errors counts as failed.
pub fn run_validation(opts: &ValidateOptions) -> Result<Vec<CheckOutcome>> {
    let unknown: Vec<&str> = opts
        .only
        .iter()
        .map(String::as_str)
        .filter(|n| !CHECKS.iter().any(|(c, _, _)| c == n))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Argument(format!(
            "unknown checks {unknown:?}; available: {}",
            check_names().join(", ")
        )));
    }
    let selected = CHECKS.iter().filter(|(name, slow, _)| {
        if opts.only.is_empty() {
            !(*slow && opts.quick)
        } else {
            opts.only.iter().any(|o| o == name)
        }
    });
    Ok(selected
        .map(|(name, _, check)| {
            let started = Instant::now();
            let (passed, detail) = match check(opts) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                millis: started.elapsed().as_millis(),
            }
        })
        .collect())
}

fn rel(diff: f64, reference: f64) -> f64 {
    diff / reference.max(f64::MIN_POSITIVE)
}

fn flat(b: &Matrix, a: &Matrix) -> Vec<f64> {
    b.as_slice().iter().chain(a.as_slice()).copied().collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ls_task(m: usize, n: usize, samples: usize, noise: f64, stream: &RngStream) -> Result<Dataset> {
    generate_task(
        &TaskSpec {
            kind: TaskKind::LeastSquares,
            m,
            n,
            true_rank: 1,
            samples,
            noise,
        },
        stream,
    )
}

/// Largest relative error between the analytic adapter gradients and
/// central differences of the task loss over 20 random configurations.
pub fn sketched_gradient_max_error(seed: u64, mutation: Option<Mutation>) -> Result<f64> {
    let root = RngStream::new(seed, 301);
    let mut rng = root.rng();
    let mut worst: f64 = 0.0;
    for c in 0..20 {
        let m = rng.random_range(2..=12);
        let n = rng.random_range(2..=12);
        let r = rng.random_range(2..=8);
        let k = [1, r / 2, r][c % 3];
        let s = root.derive(1, c as u64);
        let data = ls_task(m, n, 16, 0.1, &s.derive(1, 0))?;
        let base = FrozenBase::new(data.w0.clone());
        let ad = AdapterPair::new(
            gaussian_matrix(m, r, &s.derive(1, 1), 0.5)?,
            gaussian_matrix(r, n, &s.derive(1, 2), 0.5)?,
        )?;
        let sketch = sample_random_k(SketchSpec::new(r, k)?, &s.derive(1, 3));
        let batch = data.all_indices();
        let loss = |p: &AdapterPair| -> Result<f64> {
            Ok(loss_and_weight_grad(&effective_weight(&base, p, &sketch)?, &data, &batch)?.0)
        };
        let (_, g) = loss_and_weight_grad(&effective_weight(&base, &ad, &sketch)?, &data, &batch)?;
        let mut grads = adapter_grads(&g, &ad, &sketch)?;
        if mutation == Some(Mutation::DropSketch) {
            grads.ga = matmul(&ad.b.transpose(), &g)?;
        }
        let analytic = flat(&grads.gb, &grads.ga);
        let h = 1e-6;
        let mut fd = Vec::with_capacity(analytic.len());
        for which in 0..2 {
            let len = if which == 0 { m * r } else { r * n };
            for idx in 0..len {
                let mut plus = ad.clone();
                let mut minus = ad.clone();
                let (p, q) = if which == 0 {
                    (&mut plus.b, &mut minus.b)
                } else {
                    (&mut plus.a, &mut minus.a)
                };
                p.as_mut_slice()[idx] += h;
                q.as_mut_slice()[idx] -= h;
                fd.push((loss(&plus)? - loss(&minus)?) / (2.0 * h));
            }
        }
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(rel(norm(&diff), norm(&fd)));
    }
    Ok(worst)
}

fn check_sketched_gradient(o: &ValidateOptions) -> Result<(bool, String)> {
    let err = sketched_gradient_max_error(o.seed, o.mutation)?;
    Ok((err <= 1e-5, format!("max relative error {err:.3e} over 20 configs (limit 1e-5)")))
}

fn check_sketch_unbiased(o: &ValidateOptions) -> Result<(bool, String)> {
    let spec = SketchSpec::new(8, 2)?;
    let draws = 100_000;
    let mut rng = RngStream::new(o.seed, 302).rng();
    let mut diag = [0.0; 8];
    for _ in 0..draws {
        let s = sample_random_k_with(spec, &mut rng);
        for &j in s.indices() {
            diag[j] += s.scale();
        }
    }
    let mean: Vec<f64> = diag.iter().map(|d| d / draws as f64).collect();
    let s_mean = Matrix::diag(&mean);
    let b = gaussian_matrix(5, 8, &RngStream::new(o.seed, 303), 1.0)?;
    let a = gaussian_matrix(8, 6, &RngStream::new(o.seed, 304), 1.0)?;
    let ba = matmul(&b, &a)?;
    let bsa = matmul(&matmul(&b, &s_mean)?, &a)?;
    let err = rel(bsa.sub(&ba)?.frobenius_norm(), ba.frobenius_norm());
    let in_band = mean.iter().all(|v| (0.97..=1.03).contains(v));
    let (lo, hi) = mean.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
    Ok((
        in_band && err <= 0.02,
        format!("diagonal mean in [{lo:.4}, {hi:.4}], B·S·A relative error {err:.4}"),
    ))
}

fn check_sketch_bounds(o: &ValidateOptions) -> Result<(bool, String)> {
    let (r, k) = (8, 2);
    let spec = SketchSpec::new(r, k)?;
    let x = gaussian_matrix(32, r, &RngStream::new(o.seed, 305), 1.0)?;
    let x2 = x.frobenius_sq();
    let factor = (r as f64 / k as f64).powi(2);
    let mut rng = RngStream::new(o.seed, 306).rng();
    let mut violations = 0;
    let mut acc = 0.0;
    for _ in 0..1000 {
        let xs = apply_right(&x, &sample_random_k_with(spec, &mut rng))?.frobenius_sq();
        if xs > factor * x2 * (1.0 + 1e-12) {
            violations += 1;
        }
        acc += xs;
    }
    let expected = r as f64 / k as f64 * x2;
    let err = rel((acc / 1000.0 - expected).abs(), expected);
    Ok((
        violations == 0 && err <= 0.02,
        format!("{violations} bound violations, E‖XS‖² relative error {err:.4}"),
    ))
}

fn small_config(seed: u64) -> Config {
    let mut c = standard_config(seed, 1.0);
    c.rounds = 50;
    c.rank = 4;
    c.task.m = 8;
    c.task.n = 6;
    c.task.true_rank = 2;
    c.task.samples = 200;
    c.task.eval_samples = 100;
    c.partition.clients = 4;
    c.clients.local_steps = 3;
    c.clients.lr = 0.01;
    c.clients.batch_size = Some(8);
    c
}

fn check_fedlora_equivalence(o: &ValidateOptions) -> Result<(bool, String)> {
    let config = small_config(o.seed);
    let env = config.environment()?;
    let mut opts = config.options();
    opts.record_trajectory = true;
    let fs = run_experiment(&env, &opts)?;
    let fed = run_baseline(Method::FedLora, &env, &opts)?;
    if let Some(e) = fs.failure.or(fed.failure) {
        return Err(e);
    }
    let worst = fs
        .trajectory
        .iter()
        .zip(&fed.trajectory)
        .map(|(x, y)| x.b.max_abs_diff(&y.b).max(x.a.max_abs_diff(&y.a)))
        .fold(0.0, f64::max);
    let rounds = fs.trajectory.len().min(fed.trajectory.len());
    Ok((
        rounds == 50 && worst <= 1e-12,
        format!("{rounds} rounds, max entrywise gap {worst:.3e}"),
    ))
}

fn check_secure(o: &ValidateOptions) -> Result<(bool, String)> {
    let root = RngStream::new(o.seed, 307);
    let mut rng = root.rng();
    let mut worst: f64 = 0.0;
    for c in 0..100 {
        let clients = [2, 5, 10][c % 3];
        let (m, n, r) = (rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(2..=6));
        let s = root.derive(2, c as u64);
        let sketches: Vec<Sketch> = (0..clients)
            .map(|i| {
                let k = rng.random_range(1..=r);
                sample_random_k(SketchSpec::new(r, k).expect("k in range"), &s.derive(1, i as u64))
            })
            .collect();
        let deltas = sketches
            .iter()
            .enumerate()
            .map(|(i, sk)| {
                SparseDelta::new(
                    i,
                    c,
                    r,
                    sk.indices().to_vec(),
                    gaussian_matrix(m, sk.k(), &s.derive(2, i as u64), 1.0)?,
                    gaussian_matrix(sk.k(), n, &s.derive(3, i as u64), 1.0)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut plain_b = Matrix::zeros(m, r);
        let mut plain_a = Matrix::zeros(r, n);
        for d in &deltas {
            let (b, a) = d.densify();
            plain_b.add_assign(&b)?;
            plain_a.add_assign(&a)?;
        }
        let pairs: Vec<(usize, &Sketch)> = sketches.iter().enumerate().collect();
        let masks = derive_masks(&pairs, &PairSeeds::new(s.derive(4, 0)), c, m, n, 1.0)?;
        let masked = deltas
            .iter()
            .zip(&masks)
            .map(|(d, mk)| mask_delta(d, mk))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<usize> = (0..clients).collect();
        let (sb, sa) = secure_aggregate(&masked, &ids)?;
        worst = worst.max(sb.max_abs_diff(&plain_b)).max(sa.max_abs_diff(&plain_a));
    }
    Ok((worst <= 1e-10, format!("max gap {worst:.3e} over 100 configs")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub method: String,
    pub round: usize,
    pub measured_uplink: u64,
    pub predicted_uplink: u64,
    pub measured_downlink: u64,
    pub predicted_downlink: u64,
}

impl CostRow {
    pub fn matches(&self) -> bool {
        self.measured_uplink == self.predicted_uplink && self.measured_downlink == self.predicted_downlink
    }
}

/// Runs every method on `config` and pairs the measured bytes of each
/// round with closed forms computed from the round plan. FedLoRA runs with
/// every client at full rank. Top-k and masking, when configured, apply
/// to the FSLoRA rows only.
pub fn cost_table(config: &Config) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut c = config.clone();
        c.method = method;
        if method == Method::FedLora {
            c.clients.sketch_ratio = None;
            c.clients.k = Some(c.rank);
            c.clients.ks = None;
            c.clients.schedule = None;
        }
        if method != Method::FsLora {
            c.federation.topk_ratio = None;
            c.federation.secure = false;
        }
        let env = c.environment()?;
        let opts = c.options();
        let out = run_baseline(method, &env, &opts)?;
        if let Some(e) = out.failure {
            return Err(e);
        }
        let mut state = opts.initial_state(&FrozenBase::new(env.train.w0.clone()))?;
        for metric in &out.metrics {
            state.round = metric.round;
            let plan = plan_round(&state, &env.clients, opts.participation, &opts.master)?;
            let params = CostParams::new(c.task.m, c.task.n, c.rank, plan.ranks(), c.clients.local_steps)?;
            let up = (0..plan.participants.len())
                .map(|i| uplink_bytes(&params, method, i, opts.topk))
                .sum::<Result<u64>>()?;
            rows.push(CostRow {
                method: method.to_string(),
                round: metric.round,
                measured_uplink: metric.uplink_bytes,
                predicted_uplink: up,
                measured_downlink: metric.downlink_bytes,
                predicted_downlink: downlink_bytes(&params, method),
            });
        }
    }
    Ok(rows)
}

/// Four clients at ranks 1..=4 of 4, three of them per round, three rounds.
pub fn cost_check_config(seed: u64) -> Config {
    let mut c = small_config(seed);
    c.rounds = 3;
    c.clients.sketch_ratio = None;
    c.clients.ks = Some(vec![1, 2, 3, 4]);
    c.federation.participation = Some(3);
    c
}

fn check_costs(o: &ValidateOptions) -> Result<(bool, String)> {
    let mut rows = cost_table(&cost_check_config(o.seed))?;
    let mut topk = cost_check_config(o.seed);
    topk.federation.topk_ratio = Some(0.5);
    rows.extend(cost_table(&topk)?.into_iter().filter(|r| r.method == "fslora"));
    let mut secure = cost_check_config(o.seed);
    secure.federation.secure = true;
    rows.extend(cost_table(&secure)?.into_iter().filter(|r| r.method == "fslora"));
    let bad = rows.iter().filter(|r| !r.matches()).count();

    let params: u64 = 66_060_288;
    let mib = (params * BYTES_PER_PARAM) as f64 / (1024.0 * 1024.0);
    let wide = CostParams::new(4096, 4096, 64, vec![64; 100], 1)?;
    let index_bytes = downlink_bytes(&wide, Method::FsLora) - wide.q();
    let examples = mib == 252.0 && index_bytes == 800;
    Ok((
        bad == 0 && examples,
        format!(
            "{} rounds reconciled, {bad} mismatches; 66,060,288 params = {mib:.1} MiB, 100 bitmaps = {:.2} KB",
            rows.len(),
            index_bytes as f64 / 1024.0
        ),
    ))
}

fn check_sparsity(o: &ValidateOptions) -> Result<(bool, String)> {
    let data = ls_task(8, 6, 100, 0.1, &RngStream::new(o.seed, 308))?;
    let base = FrozenBase::new(data.w0.clone());
    let mut ok = true;
    for t in 0..20 {
        let s = RngStream::new(o.seed, 309).derive(1, t);
        let start = AdapterPair::new(gaussian_matrix(8, 6, &s.derive(1, 0), 0.3)?, gaussian_matrix(6, 6, &s.derive(1, 1), 0.3)?)?;
        let sketch = sample_random_k(SketchSpec::new(6, 1 + t as usize % 6)?, &s.derive(1, 2));
        let cfg = ClientConfig {
            id: 0,
            schedule: RankSchedule::Constant { k: sketch.k() },
            shard: Shard {
                owner: 0,
                indices: data.all_indices(),
            },
            local_steps: 5,
            lr: 0.01,
            batch_size: Some(10),
        };
        let (after, _) = train_local(&base, &start, &sketch, &data, &cfg, &s.derive(1, 3), 1.0, 0)?;
        for j in (0..6).filter(|&j| !sketch.contains(j)) {
            let b_same = (0..8).all(|i| after.b.get(i, j).to_bits() == start.b.get(i, j).to_bits());
            let a_same = (0..6).all(|c| after.a.get(j, c).to_bits() == start.a.get(j, c).to_bits());
            ok &= b_same && a_same;
        }
        let delta = extract_delta(&start, &after, &sketch, 0, 0)?;
        let (db, da) = delta.densify();
        let zero = AdapterPair::zeros(8, 6, 6);
        let again = extract_delta(&zero, &AdapterPair::new(db, da)?, &sketch, 0, 0)?;
        ok &= again.b_cols().bit_eq(delta.b_cols()) && again.a_rows().bit_eq(delta.a_rows());
    }
    Ok((ok, "20 local rounds: inactive entries bit-identical, densify round-trip exact".into()))
}

fn check_flexlora(o: &ValidateOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for t in 0..20 {
        let s = RngStream::new(o.seed, 310).derive(1, t);
        let locals = (0..3)
            .map(|i| AdapterPair::new(gaussian_matrix(7, 2, &s.derive(1, i), 1.0)?, gaussian_matrix(2, 6, &s.derive(2, i), 1.0)?))
            .collect::<Result<Vec<_>>>()?;
        let avg = average_product(&locals)?;
        let full = truncated_svd(&avg, 6)?;
        for k in 1..=6 {
            let approx = svd_factors(&avg, k)?.product();
            let residual = avg.sub(&approx)?.frobenius_sq();
            let tail: f64 = full.s[k..].iter().map(|v| v * v).sum();
            worst = worst.max((residual - tail).abs());
        }
    }
    Ok((worst <= 1e-8, format!("max |residual − tail energy| {worst:.3e}")))
}

fn check_flora(o: &ValidateOptions) -> Result<(bool, String)> {
    let s = RngStream::new(o.seed, 311);
    let ks = [1, 3, 2, 4];
    let locals = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| AdapterPair::new(gaussian_matrix(6, k, &s.derive(1, i as u64), 1.0)?, gaussian_matrix(k, 5, &s.derive(2, i as u64), 1.0)?))
        .collect::<Result<Vec<_>>>()?;
    let (b, a) = stack_adapters(&locals)?;
    let mut sum = Matrix::zeros(6, 5);
    for l in &locals {
        sum.add_assign(&l.product())?;
    }
    let block = matmul(&b, &a)?.max_abs_diff(&sum);

    let base = FrozenBase::new(gaussian_matrix(6, 5, &s.derive(3, 0), 1.0)?);
    let mut before = base.w0().clone();
    before.add_assign(&sum.scale(1.0 / locals.len() as f64))?;
    let reinit: Vec<RngStream> = (0..4).map(|i| s.derive(4, i)).collect();
    let out = flora_round(&[base], &locals, &ks, &reinit)?;
    let after = effective_weight(&out.bases[0], &out.adapters[0], &Sketch::identity(ks[0])?)?;
    let merge = after.max_abs_diff(&before);
    Ok((
        block <= 1e-10 && merge <= 1e-12,
        format!("stacking gap {block:.3e}, post-merge weight gap {merge:.3e}"),
    ))
}

fn check_smoothness(o: &ValidateOptions) -> Result<(bool, String)> {
    let (m, n, r) = (12, 12, 8);
    let data = ls_task(m, n, 120, 0.1, &RngStream::new(o.seed, 312))?;
    let base = FrozenBase::new(data.w0.clone());
    let shard = data.all_indices();
    let problem = ClientProblem {
        base: &base,
        data: &data,
        shard: &shard,
        scaling: 1.0,
    };
    let states = sample_states(m, n, r, 20, 0.3, &RngStream::new(o.seed, 313))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [r / 4, r / 2, r] {
        let average = SketchAverage::Auto {
            draws: 256,
            stream: RngStream::new(o.seed, 314),
        };
        let p = smoothness_ratio_probe(&problem, &states, k, 1e-4, average, &RngStream::new(o.seed, 315))?;
        ok &= p.ratio <= p.bound * 1.10;
        parts.push(format!("k={k}: {:.3} (bound {:.1})", p.ratio, p.bound));
    }
    Ok((ok, parts.join(", ")))
}

fn check_gradient_unbiased(o: &ValidateOptions) -> Result<(bool, String)> {
    let data = ls_task(6, 6, 200, 0.0, &RngStream::new(o.seed, 316))?;
    let base = FrozenBase::new(data.w0.clone());
    let shard = data.all_indices();
    let problem = ClientProblem {
        base: &base,
        data: &data,
        shard: &shard,
        scaling: 1.0,
    };
    let x = sample_states(6, 6, 4, 1, 0.3, &RngStream::new(o.seed, 317))?.remove(0);
    let check = unbiasedness_check(&problem, &x, 2, 200_000, &RngStream::new(o.seed, 318))?;
    Ok((
        check.relative_error <= 0.02,
        format!("relative error {:.4} over {} draws", check.relative_error, check.draws),
    ))
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("fslora-validate-{}-{tag}", std::process::id()))
}

fn check_determinism(o: &ValidateOptions) -> Result<(bool, String)> {
    let mut config = small_config(o.seed);
    config.rounds = 5;
    config.clients.sketch_ratio = Some(0.5);
    config.federation.participation = Some(3);
    let first = scratch_dir("a");
    let second = scratch_dir("b");
    let result = (|| {
        run_config(&config, &first)?;
        replay(&first.join(MANIFEST_FILE), &second)?;
        diff_artifacts(&first, &second)
    })();
    let _ = fs::remove_dir_all(&first);
    let _ = fs::remove_dir_all(&second);
    let diff = result?;
    Ok((diff.is_empty(), if diff.is_empty() { "replay identical".into() } else { format!("differs: {diff:?}") }))
}

/// Seed-averaged final eval loss of the standard scenario at each ratio.
pub fn ratio_trend(ratios: &[f64], seeds: &[u64]) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&ratio| {
            let losses = seeds
                .par_iter()
                .map(|&seed| final_loss(&standard_config(seed, ratio)))
                .collect::<Result<Vec<_>>>()?;
            Ok((ratio, losses.iter().sum::<f64>() / losses.len() as f64))
        })
        .collect()
}

fn final_loss(config: &Config) -> Result<f64> {
    let out = run_baseline(config.method, &config.environment()?, &config.options())?;
    match out.failure {
        Some(e) => Err(e),
        None => Ok(out.final_eval_loss()),
    }
}

/// Seed-averaged rounds until eval loss reaches `fraction` of its initial
/// value, per local step count. Runs that never get there count as
/// `rounds + 1`.
pub fn local_steps_trend(steps: &[usize], seeds: &[u64], ratio: f64, fraction: f64) -> Result<Vec<(usize, f64)>> {
    steps
        .iter()
        .map(|&h| {
            let counts = seeds
                .par_iter()
                .map(|&seed| {
                    let mut config = standard_config(seed, ratio);
                    config.clients.local_steps = h;
                    let out = run_baseline(config.method, &config.environment()?, &config.options())?;
                    if let Some(e) = out.failure {
                        return Err(e);
                    }
                    let threshold = fraction * out.initial_eval_loss;
                    Ok(out.rounds_to(threshold).unwrap_or(config.rounds + 1) as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((h, counts.iter().sum::<f64>() / counts.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopkComparison {
    pub plain_loss: f64,
    pub topk_loss: f64,
    pub factor: f64,
    pub plain_uplink: u64,
    pub topk_uplink: u64,
}

/// Standard scenario at `ratio` with and without top-`compression` uploads.
/// Uplink is the first-round total of the first seed.
pub fn topk_comparison(ratio: f64, compression: f64, seeds: &[u64]) -> Result<TopkComparison> {
    let run = |seed: u64, topk: Option<f64>| -> Result<(f64, u64)> {
        let mut config = standard_config(seed, ratio);
        config.federation.topk_ratio = topk;
        let out = run_baseline(config.method, &config.environment()?, &config.options())?;
        if let Some(e) = out.failure {
            return Err(e);
        }
        Ok((out.final_eval_loss(), out.metrics[0].uplink_bytes))
    };
    let plain = seeds.par_iter().map(|&s| run(s, None)).collect::<Result<Vec<_>>>()?;
    let topk = seeds.par_iter().map(|&s| run(s, Some(compression))).collect::<Result<Vec<_>>>()?;
    let mean = |v: &[(f64, u64)]| v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64;
    let (plain_loss, topk_loss) = (mean(&plain), mean(&topk));
    Ok(TopkComparison {
        plain_loss,
        topk_loss,
        factor: topk_loss / plain_loss,
        plain_uplink: plain[0].1,
        topk_uplink: topk[0].1,
    })
}

fn seeds(o: &ValidateOptions, count: u64) -> Vec<u64> {
    (0..count).map(|i| o.seed + i).collect()
}

fn check_ratio_trend(o: &ValidateOptions) -> Result<(bool, String)> {
    let trend = ratio_trend(&[0.125, 0.25, 0.5, 1.0], &seeds(o, 10))?;
    let monotone = trend.windows(2).all(|w| w[1].1 <= w[0].1);
    let text = trend.iter().map(|(r, l)| format!("{r}: {l:.4}")).collect::<Vec<_>>().join(", ");
    Ok((monotone, text))
}

fn check_local_steps_trend(o: &ValidateOptions) -> Result<(bool, String)> {
    let trend = local_steps_trend(&[1, 5, 20], &seeds(o, 5), 0.5, 0.1)?;
    let monotone = trend.windows(2).all(|w| w[1].1 <= w[0].1);
    let text = trend.iter().map(|(h, t)| format!("H={h}: {t:.1}")).collect::<Vec<_>>().join(", ");
    Ok((monotone, text))
}

fn check_topk(o: &ValidateOptions) -> Result<(bool, String)> {
    let cmp = topk_comparison(0.5, 0.5, &seeds(o, 10))?;
    // 10 clients, 8 active columns of a 32×32 pair: 512 entries each.
    let expected = 10 * (4 * 256 + 512 / 8);
    let ok = cmp.topk_uplink == expected && cmp.plain_uplink == 10 * 4 * 512 && cmp.factor <= TOPK_LOSS_FACTOR_LIMIT;
    Ok((
        ok,
        format!(
            "uplink {} -> {} bytes, loss factor {:.4} (limit {TOPK_LOSS_FACTOR_LIMIT})",
            cmp.plain_uplink, cmp.topk_uplink, cmp.factor
        ),
    ))
}
