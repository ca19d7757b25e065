use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::topk_compress;
use crate::costs::{downlink_bytes, uplink_bytes, CostParams, Method};
use crate::error::{Error, Result};
use crate::lora::{AdapterPair, FrozenBase};
use crate::numerics::{domain, matmul, Matrix, RngStream};
use crate::secure_agg::{derive_masks, mask_delta, secure_aggregate, PairSeeds};
use crate::sketching::encode_indices;
use crate::tasks::{loss_and_weight_grad, Dataset};

use super::{aggregate, apply_mean_update, local_rounds, plan_round, ClientConfig, Denominator, GlobalState, Participation, RoundPlan};

/// Training data, held-out evaluation data and the client roster.
#[derive(Clone, Debug)]
pub struct Environment {
    pub train: Dataset,
    pub eval: Dataset,
    pub clients: Vec<ClientConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecureOptions {
    pub mask_stddev: f64,
}

impl Default for SecureOptions {
    fn default() -> Self {
        Self { mask_stddev: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOptions {
    pub rank: usize,
    pub rounds: usize,
    pub participation: Participation,
    pub denominator: Denominator,
    /// LoRA `α/r`-style multiplier on the adapter product.
    pub scaling: f64,
    pub master: RngStream,
    pub secure: Option<SecureOptions>,
    pub topk: Option<f64>,
    /// Keep the global adapters after every round in the output.
    pub record_trajectory: bool,
}

impl ExperimentOptions {
    pub fn new(rank: usize, rounds: usize, seed: u64) -> Self {
        Self {
            rank,
            rounds,
            participation: Participation::All,
            denominator: Denominator::ParticipantCount,
            scaling: 1.0,
            master: RngStream::new(seed, 0),
            secure: None,
            topk: None,
            record_trajectory: false,
        }
    }

    pub fn initial_state(&self, base: &FrozenBase) -> Result<GlobalState> {
        let (m, n) = base.shape();
        Ok(GlobalState {
            base: base.clone(),
            adapters: AdapterPair::init(m, n, self.rank, &self.master.derive(domain::INIT, 0))?,
            round: 0,
        })
    }
}

pub struct RoundContext<'a> {
    pub env: &'a Environment,
    pub opts: &'a ExperimentOptions,
}

/// What a method reports after one round. Byte counts are measured from
/// the serialized messages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundReport {
    pub train_loss: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

/// A federated training strategy driven by [`run_method`].
pub trait FederatedMethod: Send {
    fn method(&self) -> Method;
    /// Executes `plan` and advances the method's global state by one round.
    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport>;
    /// The server's adapter pair and round counter.
    fn state(&self) -> &GlobalState;
    /// Unsketched weight used for evaluation.
    fn eval_weight(&self, scaling: f64) -> Result<Matrix>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub grad_norm: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Final model state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub method: Method,
    pub round: usize,
    pub adapters: AdapterPair,
    pub eval_weight: Matrix,
}

impl Snapshot {
    const MAGIC: &'static [u8; 8] = b"FSLSNAP1";

    /// `MAGIC`, method tag, `u64` round/m/n/r, then `B`, `A` and the
    /// evaluation weight as row-major little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::MAGIC.to_vec();
        let tag = self.method.as_str().as_bytes();
        out.extend((tag.len() as u64).to_le_bytes());
        out.extend(tag);
        for v in [self.round, self.adapters.m(), self.adapters.n(), self.adapters.rank()] {
            out.extend((v as u64).to_le_bytes());
        }
        out.extend(self.adapters.b.to_le_bytes());
        out.extend(self.adapters.a.to_le_bytes());
        out.extend(self.eval_weight.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.strip_prefix(Self::MAGIC.as_slice()) {
            Some(rest) => parse_snapshot(rest),
            None => Err(Error::Format("bad snapshot magic".into())),
        }
    }
}

fn parse_snapshot(mut cur: &[u8]) -> Result<Snapshot> {
    fn u64_at(cur: &mut &[u8]) -> Result<usize> {
        if cur.len() < 8 {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let (head, tail) = cur.split_at(8);
        *cur = tail;
        Ok(u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize)
    }
    fn matrix_at(cur: &mut &[u8], rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows * cols * 8;
        if cur.len() < len {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let (head, tail) = cur.split_at(len);
        *cur = tail;
        let data = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data)
    }
    let tag_len = u64_at(&mut cur)?;
    if cur.len() < tag_len {
        return Err(Error::Format("snapshot truncated".into()));
    }
    let tag = std::str::from_utf8(&cur[..tag_len]).map_err(|_| Error::Format("bad method tag".into()))?;
    let method: Method = tag.parse()?;
    cur = &cur[tag_len..];
    let round = u64_at(&mut cur)?;
    let m = u64_at(&mut cur)?;
    let n = u64_at(&mut cur)?;
    let r = u64_at(&mut cur)?;
    let b = matrix_at(&mut cur, m, r)?;
    let a = matrix_at(&mut cur, r, n)?;
    let eval_weight = matrix_at(&mut cur, m, n)?;
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after snapshot".into()));
    }
    Ok(Snapshot {
        method,
        round,
        adapters: AdapterPair::new(b, a)?,
        eval_weight,
    })
}

#[derive(Debug)]
pub struct RunOutput {
    pub method: Method,
    pub initial_eval_loss: f64,
    pub metrics: Vec<RoundMetrics>,
    /// Global adapters after each round, when requested.
    pub trajectory: Vec<AdapterPair>,
    pub snapshot: Snapshot,
    /// Set when the run stopped early; `metrics` holds the completed rounds.
    pub failure: Option<Error>,
}

impl RunOutput {
    pub fn final_eval_loss(&self) -> f64 {
        self.metrics.last().map_or(self.initial_eval_loss, |m| m.eval_loss)
    }

    /// First completed round (1-based count) whose eval loss is at or below
    /// `threshold`, if any.
    pub fn rounds_to(&self, threshold: f64) -> Option<usize> {
        self.metrics.iter().position(|m| m.eval_loss <= threshold).map(|p| p + 1)
    }
}

/// Bytes of a dense adapter pair on the wire (4-byte floats).
pub fn pair_wire_bytes(pair: &AdapterPair) -> Vec<u8> {
    pair.b
        .as_slice()
        .iter()
        .chain(pair.a.as_slice())
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect()
}

fn evaluate(method: &dyn FederatedMethod, eval: &Dataset, scaling: f64) -> Result<(f64, f64)> {
    let w = method.eval_weight(scaling)?;
    let (loss, g) = loss_and_weight_grad(&w, eval, &eval.all_indices())?;
    if !loss.is_finite() {
        return Err(Error::numerical(format!("eval loss diverged after round {}", method.state().round), 0));
    }
    let pair = &method.state().adapters;
    let gb = matmul(&g, &pair.a.transpose())?.frobenius_sq();
    let ga = matmul(&pair.b.transpose(), &g)?.frobenius_sq();
    Ok((loss, scaling.abs() * (gb + ga).sqrt()))
}

fn reconcile(ctx: &RoundContext<'_>, method: Method, plan: &RoundPlan, report: &RoundReport) -> Result<()> {
    let env = ctx.env;
    let h = env.clients.first().map_or(1, |c| c.local_steps);
    let params = CostParams::new(env.train.m(), env.train.n(), ctx.opts.rank, plan.ranks(), h)?;
    let topk = if method == Method::FsLora { ctx.opts.topk } else { None };
    let up: u64 = (0..plan.participants.len())
        .map(|i| uplink_bytes(&params, method, i, topk))
        .sum::<Result<u64>>()?;
    let down = downlink_bytes(&params, method);
    if up != report.uplink_bytes || down != report.downlink_bytes {
        return Err(Error::ContractViolation(format!(
            "{method} round {}: measured {}/{} bytes up/down, closed form {up}/{down}",
            plan.round, report.uplink_bytes, report.downlink_bytes
        )));
    }
    Ok(())
}

/// Drives `method` for `opts.rounds` rounds. On failure the completed
/// rounds are kept and the error is returned inside the output.
pub fn run_method(method: &mut dyn FederatedMethod, env: &Environment, opts: &ExperimentOptions) -> Result<RunOutput> {
    for c in &env.clients {
        c.validate(opts.rank)?;
    }
    if opts.rounds == 0 {
        return Err(Error::Argument("rounds must be >= 1".into()));
    }
    let ctx = RoundContext { env, opts };
    let (initial_eval_loss, _) = evaluate(method, &env.eval, opts.scaling)?;
    let mut metrics = Vec::with_capacity(opts.rounds);
    let mut trajectory = Vec::new();
    let mut failure = None;
    for _ in 0..opts.rounds {
        let started = Instant::now();
        let step = (|| {
            let plan = plan_round(method.state(), &env.clients, opts.participation, &opts.master)?;
            let report = method.round(&ctx, &plan)?;
            reconcile(&ctx, method.method(), &plan, &report)?;
            let (eval_loss, grad_norm) = evaluate(method, &env.eval, opts.scaling)?;
            Ok::<_, Error>(RoundMetrics {
                round: plan.round,
                train_loss: report.train_loss,
                eval_loss,
                grad_norm,
                uplink_bytes: report.uplink_bytes,
                downlink_bytes: report.downlink_bytes,
                wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            })
        })();
        match step {
            Ok(row) => {
                metrics.push(row);
                if opts.record_trajectory {
                    trajectory.push(method.state().adapters.clone());
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let state = method.state();
    let snapshot = Snapshot {
        method: method.method(),
        round: state.round,
        adapters: state.adapters.clone(),
        eval_weight: method.eval_weight(opts.scaling)?,
    };
    Ok(RunOutput {
        method: method.method(),
        initial_eval_loss,
        metrics,
        trajectory,
        snapshot,
        failure,
    })
}

/// The sketched method, optionally with top-k uploads and masked
/// aggregation.
#[derive(Clone, Debug)]
pub struct FsLora {
    state: GlobalState,
}

impl FsLora {
    pub fn new(state: GlobalState) -> Self {
        Self { state }
    }
}

impl FederatedMethod for FsLora {
    fn method(&self) -> Method {
        Method::FsLora
    }

    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport> {
        let opts = ctx.opts;
        let snapshot = self.state.clone();
        let outcomes = local_rounds(&snapshot, &ctx.env.train, &ctx.env.clients, plan, &opts.master, opts.scaling)?;
        let train_loss = outcomes.iter().map(|o| o.train_loss).sum::<f64>() / outcomes.len() as f64;
        let mut deltas: Vec<_> = outcomes.into_iter().map(|o| o.delta).collect();
        if let Some(ratio) = opts.topk {
            deltas = deltas
                .par_iter()
                .map(|d| topk_compress(d, ratio))
                .collect::<Result<Vec<_>>>()?;
        }

        let downlink = pair_wire_bytes(&snapshot.adapters).len()
            + plan.sketches.iter().map(|s| encode_indices(s).to_bytes().len()).sum::<usize>();

        let (next, uplink) = match opts.secure {
            None => {
                let up = deltas.iter().map(|d| d.to_wire().len()).sum::<usize>();
                let next = aggregate(&snapshot, &deltas, opts.denominator, ctx.env.clients.len())?;
                (next, up)
            }
            Some(secure) => {
                let seeds = PairSeeds::new(opts.master.derive(domain::MASK, 0));
                let sketches: Vec<_> = plan.participants.iter().copied().zip(plan.sketches.iter()).collect();
                let (m, n) = (snapshot.adapters.m(), snapshot.adapters.n());
                let masks = derive_masks(&sketches, &seeds, plan.round, m, n, secure.mask_stddev)?;
                let masked = deltas
                    .iter()
                    .zip(&masks)
                    .map(|(d, mask)| mask_delta(d, mask))
                    .collect::<Result<Vec<_>>>()?;
                let up = masked.iter().map(|d| d.to_wire().len()).sum::<usize>();
                let (sum_b, sum_a) = secure_aggregate(&masked, &plan.participants)?;
                let mut touched = vec![false; snapshot.adapters.rank()];
                for s in &plan.sketches {
                    for &j in s.indices() {
                        touched[j] = true;
                    }
                }
                let count = match opts.denominator {
                    Denominator::ParticipantCount => deltas.len(),
                    Denominator::TotalClients => ctx.env.clients.len(),
                };
                (apply_mean_update(&snapshot, &sum_b, &sum_a, &touched, count)?, up)
            }
        };
        self.state = next;
        Ok(RoundReport {
            train_loss,
            uplink_bytes: uplink as u64,
            downlink_bytes: downlink as u64,
        })
    }

    fn state(&self) -> &GlobalState {
        &self.state
    }

    fn eval_weight(&self, scaling: f64) -> Result<Matrix> {
        unsketched_weight(&self.state, scaling)
    }
}

/// `W0 + α·B·A`.
pub fn unsketched_weight(state: &GlobalState, scaling: f64) -> Result<Matrix> {
    let mut update = state.adapters.product();
    if scaling != 1.0 {
        update = update.scale(scaling);
    }
    state.base.w0().add(&update)
}

/// Runs the sketched method from the standard initialization.
pub fn run_experiment(env: &Environment, opts: &ExperimentOptions) -> Result<RunOutput> {
    let base = FrozenBase::new(env.train.w0.clone());
    let mut method = FsLora::new(opts.initial_state(&base)?);
    run_method(&mut method, env, opts)
}
