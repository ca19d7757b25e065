//! Rival federated LoRA schemes and top-k upload compression.
//!
//! Every scheme implements [`FederatedMethod`] so that it runs under the
//! same round driver, plan and metrics as the sketched method.

use rayon::prelude::*;

use crate::costs::{check_topk_ratio, topk_keep_count, Method};
use crate::error::{Error, Result};
use crate::federation::{
    batch_stream, pair_wire_bytes, run_method, sample_batch, train_local, unsketched_weight, ClientConfig,
    Denominator, Environment, ExperimentOptions, FederatedMethod, FsLora, GlobalState, RankSchedule,
    RoundContext, RoundPlan, RoundReport, RunOutput, SparseDelta,
};
use crate::lora::{AdapterPair, FrozenBase};
use crate::numerics::{domain, gaussian_matrix, matmul, truncated_svd, Matrix, RngStream};
use crate::sketching::Sketch;
use crate::tasks::loss_and_weight_grad;

/// Keeps the `⌈ratio·payload⌉` largest-magnitude payload entries. Ties go
/// to the lower flat index.
pub fn topk_compress(delta: &SparseDelta, ratio: f64) -> Result<SparseDelta> {
    check_topk_ratio(ratio)?;
    let payload = delta.payload();
    let keep = topk_keep_count(payload.len(), ratio);
    let mut order: Vec<usize> = (0..payload.len()).collect();
    order.sort_by(|&x, &y| payload[y].abs().total_cmp(&payload[x].abs()).then(x.cmp(&y)));
    let mut kept = vec![false; payload.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    let values: Vec<f64> = payload
        .iter()
        .zip(&kept)
        .map(|(v, k)| if *k { *v } else { 0.0 })
        .collect();
    delta.with_payload(&values, Some(kept))
}

fn check_locals(locals: &[AdapterPair]) -> Result<(usize, usize)> {
    let first = locals
        .first()
        .ok_or_else(|| Error::Argument("no local adapters to aggregate".into()))?;
    let (m, n) = (first.m(), first.n());
    for l in locals {
        if l.m() != m || l.n() != n {
            return Err(Error::shape("local adapters", (l.m(), l.n()), (m, n)));
        }
    }
    Ok((m, n))
}

/// Zero-pads every local pair to rank `r` and averages.
pub fn heterolora_aggregate(r: usize, locals: &[AdapterPair]) -> Result<AdapterPair> {
    let (m, n) = check_locals(locals)?;
    if let Some(l) = locals.iter().find(|l| l.rank() > r) {
        return Err(Error::Range(format!("local rank {} exceeds global rank {r}", l.rank())));
    }
    let mut b = Matrix::zeros(m, r);
    let mut a = Matrix::zeros(r, n);
    for l in locals {
        for i in 0..m {
            for j in 0..l.rank() {
                b.set(i, j, b.get(i, j) + l.b.get(i, j));
            }
        }
        for j in 0..l.rank() {
            for (dst, src) in a.row_mut(j).iter_mut().zip(l.a.row(j)) {
                *dst += *src;
            }
        }
    }
    let count = locals.len() as f64;
    AdapterPair::new(b.map(|v| v / count), a.map(|v| v / count))
}

/// Dissemination counterpart: the first `k` columns of `B` and rows of `A`.
pub fn heterolora_truncate(global: &AdapterPair, k: usize) -> Result<AdapterPair> {
    if k == 0 || k > global.rank() {
        return Err(Error::Range(format!("truncation rank {k} outside [1, {}]", global.rank())));
    }
    Ok(global.truncate(k))
}

/// `(1/N) Σ B_i·A_i`.
pub fn average_product(locals: &[AdapterPair]) -> Result<Matrix> {
    let (m, n) = check_locals(locals)?;
    let mut sum = Matrix::zeros(m, n);
    for l in locals {
        sum.add_assign(&l.product())?;
    }
    let count = locals.len() as f64;
    Ok(sum.map(|v| v / count))
}

/// Rank-`k` factors of `m` with `B = U·diag(S)` and `A = Vᵀ`.
pub fn svd_factors(m: &Matrix, k: usize) -> Result<AdapterPair> {
    let svd = truncated_svd(m, k)?;
    let b = Matrix::from_fn(m.rows(), k, |i, j| svd.u.get(i, j) * svd.s[j]);
    AdapterPair::new(b, svd.v.transpose())
}

/// Averages the local products and hands each client the best rank-`k_i`
/// approximation. One SVD at the largest rank serves every client.
pub fn flexlora_aggregate(locals: &[AdapterPair], ranks: &[usize]) -> Result<Vec<AdapterPair>> {
    let avg = average_product(locals)?;
    let top = ranks
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Argument("no client ranks".into()))?;
    let factors = svd_factors(&avg, top)?;
    Ok(ranks.iter().map(|&k| factors.truncate(k)).collect())
}

/// `(Concat B, Concat A)`: B's side by side, A's stacked.
pub fn stack_adapters(locals: &[AdapterPair]) -> Result<(Matrix, Matrix)> {
    let (m, n) = check_locals(locals)?;
    let total: usize = locals.iter().map(AdapterPair::rank).sum();
    let mut b = Matrix::zeros(m, total);
    let mut a = Matrix::zeros(total, n);
    let mut offset = 0;
    for l in locals {
        for j in 0..l.rank() {
            b.set_col(offset + j, &l.b.col(j));
            a.row_mut(offset + j).copy_from_slice(l.a.row(j));
        }
        offset += l.rank();
    }
    Ok((b, a))
}

/// `(1/N)·Concat(B)·Concat(A)`.
pub fn flora_update(locals: &[AdapterPair]) -> Result<Matrix> {
    let (b, a) = stack_adapters(locals)?;
    let count = locals.len() as f64;
    Ok(matmul(&b, &a)?.map(|v| v / count))
}

/// Classical init at rank `k`: `B = 0`, `A ~ N(0, 1/k)`.
pub fn flora_reinit(m: usize, n: usize, k: usize, stream: &RngStream) -> Result<AdapterPair> {
    AdapterPair::init(m, n, k, stream)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloraOutcome {
    pub bases: Vec<FrozenBase>,
    pub adapters: Vec<AdapterPair>,
}

/// Merges the stacked update into every base and draws fresh adapters of
/// the requested ranks.
pub fn flora_round(
    bases: &[FrozenBase],
    locals: &[AdapterPair],
    next_ranks: &[usize],
    reinit: &[RngStream],
) -> Result<FloraOutcome> {
    if next_ranks.len() != reinit.len() {
        return Err(Error::shape("flora_round", (next_ranks.len(), 1), (reinit.len(), 1)));
    }
    let update = flora_update(locals)?;
    let bases = bases
        .iter()
        .map(|b| {
            let mut merged = b.clone();
            merged.merge(&update)?;
            Ok(merged)
        })
        .collect::<Result<Vec<_>>>()?;
    let (m, n) = update.shape();
    let adapters = next_ranks
        .iter()
        .zip(reinit)
        .map(|(&k, s)| flora_reinit(m, n, k, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(FloraOutcome { bases, adapters })
}

fn client<'a>(env: &'a Environment, id: usize) -> Result<&'a ClientConfig> {
    env.clients
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Protocol(format!("unknown participant {id}")))
}

fn mean_loss(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Trains each participant's local pair (unsketched) in parallel.
fn train_locals(
    ctx: &RoundContext<'_>,
    plan: &RoundPlan,
    base: &FrozenBase,
    starts: &[AdapterPair],
) -> Result<Vec<(AdapterPair, f64)>> {
    plan.participants
        .par_iter()
        .zip(starts.par_iter())
        .map(|(&id, start)| {
            let cfg = client(ctx.env, id)?;
            let identity = Sketch::identity(start.rank())?;
            let stream = batch_stream(&ctx.opts.master, plan.round, id);
            train_local(base, start, &identity, &ctx.env.train, cfg, &stream, ctx.opts.scaling, plan.round)
        })
        .collect()
}

/// Vanilla federated LoRA: every client trains the full rank-`r` pair and
/// the server averages the updates. Written independently of the sketched
/// path so that it can serve as its oracle.
#[derive(Clone, Debug)]
pub struct FedLora {
    state: GlobalState,
}

impl FedLora {
    pub fn new(state: GlobalState) -> Self {
        Self { state }
    }

    fn local(&self, ctx: &RoundContext<'_>, round: usize, cfg: &ClientConfig) -> Result<(Matrix, Matrix, f64)> {
        let w0 = self.state.base.w0();
        let alpha = ctx.opts.scaling;
        let mut b = self.state.adapters.b.clone();
        let mut a = self.state.adapters.a.clone();
        let mut rng = batch_stream(&ctx.opts.master, round, cfg.id).rng();
        let mut losses = 0.0;
        for step in 0..cfg.local_steps {
            let batch = sample_batch(&cfg.shard, cfg.batch_size, &mut rng);
            let mut ba = matmul(&b, &a)?;
            if alpha != 1.0 {
                ba = ba.scale(alpha);
            }
            let (loss, g) = loss_and_weight_grad(&w0.add(&ba)?, &ctx.env.train, &batch)?;
            let mut gb = matmul(&g, &a.transpose())?;
            let mut ga = matmul(&b.transpose(), &g)?;
            if alpha != 1.0 {
                gb = gb.scale(alpha);
                ga = ga.scale(alpha);
            }
            if !gb.is_finite() || !ga.is_finite() {
                return Err(Error::numerical(
                    format!("fedlora client {} round {round} step {step}: non-finite gradient", cfg.id),
                    step,
                ));
            }
            losses += loss;
            let lr = cfg.lr;
            b = Matrix::from_fn(b.rows(), b.cols(), |i, j| b.get(i, j) - lr * gb.get(i, j));
            a = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - lr * ga.get(i, j));
        }
        Ok((b, a, losses / cfg.local_steps as f64))
    }
}

impl FederatedMethod for FedLora {
    fn method(&self) -> Method {
        Method::FedLora
    }

    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport> {
        let locals = plan
            .participants
            .par_iter()
            .map(|&id| self.local(ctx, plan.round, client(ctx.env, id)?))
            .collect::<Result<Vec<_>>>()?;
        let (b0, a0) = (&self.state.adapters.b, &self.state.adapters.a);
        let mut sum_b = Matrix::zeros(b0.rows(), b0.cols());
        let mut sum_a = Matrix::zeros(a0.rows(), a0.cols());
        let mut uplink = 0;
        for (b, a, _) in &locals {
            sum_b = Matrix::from_fn(b0.rows(), b0.cols(), |i, j| sum_b.get(i, j) + (b.get(i, j) - b0.get(i, j)));
            sum_a = Matrix::from_fn(a0.rows(), a0.cols(), |i, j| sum_a.get(i, j) + (a.get(i, j) - a0.get(i, j)));
            uplink += pair_wire_bytes(&AdapterPair::new(b.clone(), a.clone())?).len();
        }
        let count = match ctx.opts.denominator {
            Denominator::ParticipantCount => locals.len(),
            Denominator::TotalClients => ctx.env.clients.len(),
        } as f64;
        let downlink = pair_wire_bytes(&self.state.adapters).len();
        let b = Matrix::from_fn(b0.rows(), b0.cols(), |i, j| b0.get(i, j) + sum_b.get(i, j) / count);
        let a = Matrix::from_fn(a0.rows(), a0.cols(), |i, j| a0.get(i, j) + sum_a.get(i, j) / count);
        let losses: Vec<f64> = locals.iter().map(|l| l.2).collect();
        self.state.adapters = AdapterPair::new(b, a)?;
        self.state.round += 1;
        Ok(RoundReport {
            train_loss: mean_loss(&losses),
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

/// Heterogeneous ranks by truncation at dissemination and zero-padding at
/// aggregation.
#[derive(Clone, Debug)]
pub struct HeteroLora {
    state: GlobalState,
}

impl HeteroLora {
    pub fn new(state: GlobalState) -> Self {
        Self { state }
    }
}

impl FederatedMethod for HeteroLora {
    fn method(&self) -> Method {
        Method::HeteroLora
    }

    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport> {
        let starts = plan
            .ranks()
            .into_iter()
            .map(|k| heterolora_truncate(&self.state.adapters, k))
            .collect::<Result<Vec<_>>>()?;
        let trained = train_locals(ctx, plan, &self.state.base, &starts)?;
        let locals: Vec<AdapterPair> = trained.iter().map(|(p, _)| p.clone()).collect();
        let uplink: usize = locals.iter().map(|p| pair_wire_bytes(p).len()).sum();
        let downlink = pair_wire_bytes(&self.state.adapters).len();
        self.state.adapters = heterolora_aggregate(self.state.adapters.rank(), &locals)?;
        self.state.round += 1;
        let losses: Vec<f64> = trained.iter().map(|(_, l)| *l).collect();
        Ok(RoundReport {
            train_loss: mean_loss(&losses),
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

/// Product averaging with truncated-SVD redistribution. The server keeps
/// the averaged product; the state's adapters hold its rank-`r` factors.
#[derive(Clone, Debug)]
pub struct FlexLora {
    state: GlobalState,
    product: Matrix,
}

impl FlexLora {
    pub fn new(state: GlobalState) -> Self {
        let product = state.adapters.product();
        Self { state, product }
    }
}

impl FederatedMethod for FlexLora {
    fn method(&self) -> Method {
        Method::FlexLora
    }

    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport> {
        let starts: Vec<AdapterPair> = plan.ranks().into_iter().map(|k| self.state.adapters.truncate(k)).collect();
        let trained = train_locals(ctx, plan, &self.state.base, &starts)?;
        let locals: Vec<AdapterPair> = trained.iter().map(|(p, _)| p.clone()).collect();
        let uplink: usize = locals.iter().map(|p| pair_wire_bytes(p).len()).sum();
        let downlink = pair_wire_bytes(&self.state.adapters).len();
        self.product = average_product(&locals)?;
        self.state.adapters = svd_factors(&self.product, self.state.adapters.rank())?;
        self.state.round += 1;
        let losses: Vec<f64> = trained.iter().map(|(_, l)| *l).collect();
        Ok(RoundReport {
            train_loss: mean_loss(&losses),
            uplink_bytes: uplink as u64,
            downlink_bytes: downlink as u64,
        })
    }

    fn state(&self) -> &GlobalState {
        &self.state
    }

    fn eval_weight(&self, scaling: f64) -> Result<Matrix> {
        let update = if scaling != 1.0 { self.product.scale(scaling) } else { self.product.clone() };
        self.state.base.w0().add(&update)
    }
}

/// Stacking: the server concatenates local modules, every client merges the
/// averaged product into its base and starts the next round from a fresh
/// init. The state's adapters are `B = 0` with a rank-`r` reference `A`
/// drawn the same way, used only for gradient-norm reporting.
#[derive(Clone, Debug)]
pub struct Flora {
    state: GlobalState,
    bases: Vec<FrozenBase>,
}

impl Flora {
    pub fn new(state: GlobalState, clients: usize) -> Self {
        let bases = vec![state.base.clone(); clients];
        Self { state, bases }
    }

    pub fn bases(&self) -> &[FrozenBase] {
        &self.bases
    }
}

fn reinit_stream(master: &RngStream, round: usize, client: usize) -> RngStream {
    master.derive(domain::REINIT, round as u64).derive(domain::CLIENT, client as u64)
}

impl FederatedMethod for Flora {
    fn method(&self) -> Method {
        Method::Flora
    }

    fn round(&mut self, ctx: &RoundContext<'_>, plan: &RoundPlan) -> Result<RoundReport> {
        let (m, n) = self.state.base.shape();
        let master = &ctx.opts.master;
        let position = |id: usize| ctx.env.clients.iter().position(|c| c.id == id);
        let trained = plan
            .participants
            .par_iter()
            .zip(plan.ranks().into_par_iter())
            .map(|(&id, k)| {
                let cfg = client(ctx.env, id)?;
                let start = flora_reinit(m, n, k, &reinit_stream(master, plan.round, id))?;
                let base = &self.bases[position(id).expect("participant is a client")];
                let identity = Sketch::identity(k)?;
                let stream = batch_stream(master, plan.round, id);
                train_local(base, &start, &identity, &ctx.env.train, cfg, &stream, ctx.opts.scaling, plan.round)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut locals: Vec<AdapterPair> = trained.iter().map(|(p, _)| p.clone()).collect();
        let uplink: usize = locals.iter().map(|p| pair_wire_bytes(p).len()).sum();
        if ctx.opts.scaling != 1.0 {
            for l in &mut locals {
                l.b = l.b.scale(ctx.opts.scaling);
            }
        }
        let (stacked_b, stacked_a) = stack_adapters(&locals)?;
        let downlink = 4 * (stacked_b.as_slice().len() + stacked_a.as_slice().len());

        let update = flora_update(&locals)?;
        for base in self.bases.iter_mut().chain(std::iter::once(&mut self.state.base)) {
            base.merge(&update)?;
        }
        self.state.round += 1;
        let r = self.state.adapters.rank();
        self.state.adapters = AdapterPair {
            b: Matrix::zeros(m, r),
            a: gaussian_matrix(
                r,
                n,
                &reinit_stream(master, self.state.round, usize::MAX),
                (1.0 / r as f64).sqrt(),
            )?,
        };
        let losses: Vec<f64> = trained.iter().map(|(_, l)| *l).collect();
        Ok(RoundReport {
            train_loss: mean_loss(&losses),
            uplink_bytes: uplink as u64,
            downlink_bytes: downlink as u64,
        })
    }

    fn state(&self) -> &GlobalState {
        &self.state
    }

    fn eval_weight(&self, _scaling: f64) -> Result<Matrix> {
        // B is zero after every merge, so the base is the whole model.
        Ok(self.state.base.w0().clone())
    }
}

/// Vanilla FedLoRA needs one rank for everybody.
fn check_uniform(clients: &[ClientConfig]) -> Result<()> {
    let mut ks = clients.iter().map(|c| &c.schedule);
    let first = ks.next();
    let uniform = matches!(first, Some(RankSchedule::Constant { .. })) && ks.all(|s| Some(s) == first);
    if uniform {
        Ok(())
    } else {
        Err(Error::Argument("fedlora requires the same constant rank on every client".into()))
    }
}

/// Builds `method` from the standard initialization.
pub fn build_method(method: Method, env: &Environment, opts: &ExperimentOptions) -> Result<Box<dyn FederatedMethod>> {
    let base = FrozenBase::new(env.train.w0.clone());
    let state = opts.initial_state(&base)?;
    if method != Method::FsLora && (opts.topk.is_some() || opts.secure.is_some()) {
        return Err(Error::Argument(format!("top-k and masking are only wired into fslora, not {method}")));
    }
    Ok(match method {
        Method::FsLora => Box::new(FsLora::new(state)),
        Method::FedLora => {
            check_uniform(&env.clients)?;
            Box::new(FedLora::new(state))
        }
        Method::HeteroLora => Box::new(HeteroLora::new(state)),
        Method::FlexLora => Box::new(FlexLora::new(state)),
        Method::Flora => Box::new(Flora::new(state, env.clients.len())),
    })
}

/// Runs any method under the common driver.
pub fn run_baseline(method: Method, env: &Environment, opts: &ExperimentOptions) -> Result<RunOutput> {
    let mut m = build_method(method, env, opts)?;
    run_method(m.as_mut(), env, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(m: usize, n: usize, k: usize, seed: u64) -> AdapterPair {
        AdapterPair::new(
            gaussian_matrix(m, k, &RngStream::new(seed, 0), 1.0).unwrap(),
            gaussian_matrix(k, n, &RngStream::new(seed, 1), 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn topk_examples() {
        let d = SparseDelta::new(
            0,
            0,
            2,
            vec![1],
            Matrix::from_rows(&[[3.0], [-5.0]]).unwrap(),
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let c = topk_compress(&d, 0.5).unwrap();
        assert_eq!(c.payload(), vec![3.0, -5.0, 0.0, 0.0]);
        assert_eq!(c.kept().unwrap(), &[true, true, false, false]);
        let full = topk_compress(&d, 1.0).unwrap();
        assert_eq!(full.payload(), d.payload());
        assert!(topk_compress(&d, 0.0).is_err());
        assert!(topk_compress(&d, 1.5).is_err());
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let d = SparseDelta::new(
            0,
            0,
            1,
            vec![0],
            Matrix::from_rows(&[[2.0], [-2.0]]).unwrap(),
            Matrix::from_rows(&[[2.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(topk_compress(&d, 0.5).unwrap().payload(), vec![2.0, -2.0, 0.0]);
        assert_eq!(topk_compress(&d, 0.3).unwrap().payload(), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_never_raises_norm() {
        for seed in 0..50 {
            let p = pair(4, 3, 2, seed);
            let d = SparseDelta::new(0, 0, 5, vec![1, 4], p.b, p.a).unwrap();
            let ratio = 0.05 + (seed as f64) / 55.0;
            assert!(topk_compress(&d, ratio).unwrap().frobenius_sq() <= d.frobenius_sq());
        }
    }

    #[test]
    fn heterolora_full_rank_is_plain_average() {
        let locals = [pair(3, 2, 4, 1), pair(3, 2, 4, 2), pair(3, 2, 4, 3)];
        let agg = heterolora_aggregate(4, &locals).unwrap();
        let b = Matrix::from_fn(3, 4, |i, j| (locals[0].b.get(i, j) + locals[1].b.get(i, j) + locals[2].b.get(i, j)) / 3.0);
        let a = Matrix::from_fn(4, 2, |i, j| (locals[0].a.get(i, j) + locals[1].a.get(i, j) + locals[2].a.get(i, j)) / 3.0);
        assert!(agg.b.bit_eq(&b) && agg.a.bit_eq(&a));
    }

    #[test]
    fn heterolora_padding() {
        let local = AdapterPair::new(Matrix::from_rows(&[[1.0], [2.0]]).unwrap(), Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        let agg = heterolora_aggregate(2, &[local]).unwrap();
        assert_eq!(agg.b.col(1), vec![0.0, 0.0]);
        assert_eq!(agg.b.col(0), vec![1.0, 2.0]);
        assert_eq!(agg.a.row(1), &[0.0, 0.0]);
        assert!(heterolora_aggregate(1, &[pair(2, 2, 2, 0)]).is_err());

        let p = pair(3, 2, 4, 9);
        assert_eq!(heterolora_aggregate(4, &[heterolora_truncate(&p, 4).unwrap()]).unwrap(), p);
    }

    #[test]
    fn flexlora_single_client_recovers_product() {
        let local = pair(6, 5, 2, 4);
        let out = flexlora_aggregate(&[local.clone()], &[3]).unwrap();
        assert!(out[0].product().max_abs_diff(&local.product()) <= 1e-8);
    }

    #[test]
    fn flexlora_zero_locals() {
        let zero = AdapterPair::zeros(4, 3, 2);
        let out = flexlora_aggregate(&[zero.clone(), zero], &[1, 2]).unwrap();
        for p in out {
            assert!(p.b.as_slice().iter().all(|v| *v == 0.0));
            assert!(p.product().as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn flexlora_rank_one_residual_is_second_singular_value() {
        // M = 3·u1 v1ᵀ + 1.5·u2 v2ᵀ built from two orthogonal rank-1 clients
        let u1 = [0.5, 0.5, 0.5, 0.5];
        let u2 = [0.5, -0.5, 0.5, -0.5];
        let v1 = [1.0, 0.0, 0.0];
        let v2 = [0.0, 0.6, 0.8];
        let c1 = AdapterPair::new(Matrix::from_fn(4, 1, |i, _| 6.0 * u1[i]), Matrix::from_fn(1, 3, |_, j| v1[j])).unwrap();
        let c2 = AdapterPair::new(Matrix::from_fn(4, 1, |i, _| 3.0 * u2[i]), Matrix::from_fn(1, 3, |_, j| v2[j])).unwrap();
        let out = flexlora_aggregate(&[c1.clone(), c2.clone()], &[1]).unwrap();
        let m = average_product(&[c1, c2]).unwrap();
        let residual = out[0].product().sub(&m).unwrap().frobenius_norm();
        assert!((residual - 1.5).abs() <= 1e-8, "{residual}");
    }

    #[test]
    fn stacking_identity() {
        let l1 = pair(5, 4, 2, 5);
        let l2 = pair(5, 4, 3, 6);
        let (b, a) = stack_adapters(&[l1.clone(), l2.clone()]).unwrap();
        assert_eq!(b.shape(), (5, 5));
        let direct = l1.product().add(&l2.product()).unwrap();
        assert!(matmul(&b, &a).unwrap().max_abs_diff(&direct) <= 1e-10);
    }

    #[test]
    fn flora_single_client_merge() {
        let base = FrozenBase::new(gaussian_matrix(5, 4, &RngStream::new(7, 0), 1.0).unwrap());
        let local = pair(5, 4, 2, 8);
        let out = flora_round(&[base.clone()], &[local.clone()], &[3], &[RngStream::new(7, 1)]).unwrap();
        let expected = base.w0().add(&local.product()).unwrap();
        assert!(out.bases[0].w0().bit_eq(&expected));
        assert!(out.adapters[0].b.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(out.adapters[0].rank(), 3);
    }

    #[test]
    fn flora_merge_preserves_mean_function() {
        let base = FrozenBase::new(gaussian_matrix(5, 4, &RngStream::new(9, 0), 1.0).unwrap());
        let locals = [pair(5, 4, 2, 10), pair(5, 4, 4, 11), pair(5, 4, 1, 12)];
        let before = locals
            .iter()
            .map(|l| base.w0().add(&l.product()).unwrap())
            .fold(Matrix::zeros(5, 4), |acc, w| acc.add(&w).unwrap())
            .map(|v| v / 3.0);
        let out = flora_round(&[base.clone(), base], &locals, &[2, 2], &[RngStream::new(9, 1), RngStream::new(9, 2)]).unwrap();
        for (b, ad) in out.bases.iter().zip(&out.adapters) {
            let after = b.w0().add(&ad.product()).unwrap();
            assert!(after.max_abs_diff(&before) <= 1e-12);
        }
    }
}
