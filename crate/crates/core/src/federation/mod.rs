//! The sketched federated round: plan, local training, sparse aggregation.

mod delta;
mod engine;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use delta::SparseDelta;
pub use engine::{
    pair_wire_bytes, run_experiment, run_method, unsketched_weight, Environment, ExperimentOptions, FederatedMethod,
    FsLora, RoundContext, RoundMetrics, RoundReport, RunOutput, SecureOptions, Snapshot,
};

use crate::error::{Error, Result};
use crate::lora::{
    adapter_grads_scaled, effective_weight_scaled, extract_delta, sgd_step, AdapterPair, FrozenBase,
};
use crate::numerics::{domain, Matrix, RngStream};
use crate::sketching::{sample_random_k, Sketch, SketchSpec};
use crate::tasks::{loss_and_weight_grad, Dataset, Shard};

/// How a client's active rank evolves across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RankSchedule {
    Constant { k: usize },
    /// Fresh uniform draw from `[min, max]` every round.
    Uniform { min: usize, max: usize },
    /// Cycles through the listed ranks.
    Cycle { ks: Vec<usize> },
}

impl RankSchedule {
    pub fn validate(&self, r: usize) -> Result<()> {
        let ok = |k: usize| (1..=r).contains(&k);
        let valid = match self {
            RankSchedule::Constant { k } => ok(*k),
            RankSchedule::Uniform { min, max } => ok(*min) && ok(*max) && min <= max,
            RankSchedule::Cycle { ks } => !ks.is_empty() && ks.iter().all(|k| ok(*k)),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Range(format!("rank schedule {self:?} outside [1, {r}]")))
        }
    }

    pub fn k_at(&self, round: usize, stream: &RngStream) -> usize {
        match self {
            RankSchedule::Constant { k } => *k,
            RankSchedule::Uniform { min, max } => stream.rng().random_range(*min..=*max),
            RankSchedule::Cycle { ks } => ks[round % ks.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub id: usize,
    pub schedule: RankSchedule,
    pub shard: Shard,
    pub local_steps: usize,
    pub lr: f64,
    /// `None` means full-shard batches.
    pub batch_size: Option<usize>,
}

impl ClientConfig {
    pub fn validate(&self, r: usize) -> Result<()> {
        self.schedule.validate(r)?;
        if self.local_steps == 0 {
            return Err(Error::Range(format!("client {}: local steps must be >= 1", self.id)));
        }
        // zero is allowed so that a frozen client can be simulated
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Range(format!("client {}: learning rate {} invalid", self.id, self.lr)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Range(format!("client {}: batch size must be >= 1", self.id)));
        }
        if self.shard.indices.is_empty() {
            return Err(Error::Range(format!("client {}: empty shard", self.id)));
        }
        Ok(())
    }
}

/// Server-side state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub base: FrozenBase,
    pub adapters: AdapterPair,
    pub round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Participation {
    All,
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    #[default]
    ParticipantCount,
    TotalClients,
}

/// Who trains this round and with which sketch. `participants` is
/// ascending and `sketches[t]` belongs to `participants[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub participants: Vec<usize>,
    pub sketches: Vec<Sketch>,
}

impl RoundPlan {
    pub fn ranks(&self) -> Vec<usize> {
        self.sketches.iter().map(Sketch::k).collect()
    }
}

pub fn sketch_stream(master: &RngStream, round: usize, client: usize) -> RngStream {
    master.derive(domain::SKETCH, round as u64).derive(domain::CLIENT, client as u64)
}

pub fn batch_stream(master: &RngStream, round: usize, client: usize) -> RngStream {
    master.derive(domain::BATCH, round as u64).derive(domain::CLIENT, client as u64)
}

pub fn schedule_stream(master: &RngStream, round: usize, client: usize) -> RngStream {
    master.derive(domain::SCHEDULE, round as u64).derive(domain::CLIENT, client as u64)
}

/// Samples the participant set (Fisher–Yates over client ids on the
/// round-scoped stream) and one sketch per participant.
pub fn plan_round(
    state: &GlobalState,
    clients: &[ClientConfig],
    participation: Participation,
    master: &RngStream,
) -> Result<RoundPlan> {
    let r = state.adapters.rank();
    let t = state.round;
    let mut participants: Vec<usize> = clients.iter().map(|c| c.id).collect();
    match participation {
        Participation::All => {}
        Participation::Count(0) => return Err(Error::Argument("participation must be >= 1".into())),
        Participation::Count(p) if p > clients.len() => {
            return Err(Error::Argument(format!(
                "participation {p} exceeds {} clients",
                clients.len()
            )))
        }
        Participation::Count(p) => {
            participants.shuffle(&mut master.derive(domain::PLAN, t as u64).rng());
            participants.truncate(p);
        }
    }
    participants.sort_unstable();
    let sketches = participants
        .iter()
        .map(|&id| {
            let cfg = clients
                .iter()
                .find(|c| c.id == id)
                .expect("participant drawn from client list");
            let k = cfg.schedule.k_at(t, &schedule_stream(master, t, id));
            Ok(sample_random_k(SketchSpec::new(r, k)?, &sketch_stream(master, t, id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundPlan {
        round: t,
        participants,
        sketches,
    })
}

pub(crate) fn sample_batch<R: Rng + ?Sized>(shard: &Shard, batch: Option<usize>, rng: &mut R) -> Vec<usize> {
    match batch {
        None => shard.indices.clone(),
        Some(size) => (0..size)
            .map(|_| shard.indices[rng.random_range(0..shard.indices.len())])
            .collect(),
    }
}

/// `H` sketched SGD steps from `start` with a fixed sketch. Returns the end
/// point and the mean pre-step batch loss.
pub fn train_local(
    base: &FrozenBase,
    start: &AdapterPair,
    sketch: &Sketch,
    data: &Dataset,
    cfg: &ClientConfig,
    stream: &RngStream,
    scaling: f64,
    round: usize,
) -> Result<(AdapterPair, f64)> {
    let mut rng = stream.rng();
    let mut current = start.clone();
    let mut loss_sum = 0.0;
    for step in 0..cfg.local_steps {
        let batch = sample_batch(&cfg.shard, cfg.batch_size, &mut rng);
        let w = effective_weight_scaled(base, &current, sketch, scaling)?;
        let (loss, g) = loss_and_weight_grad(&w, data, &batch).map_err(|e| diverged(e, cfg.id, round, step))?;
        loss_sum += loss;
        let grads = adapter_grads_scaled(&g, &current, sketch, scaling)?;
        current = sgd_step(&current, &grads, cfg.lr).map_err(|e| diverged(e, cfg.id, round, step))?;
    }
    Ok((current, loss_sum / cfg.local_steps as f64))
}

fn diverged(e: Error, client: usize, round: usize, step: usize) -> Error {
    match e {
        Error::Numerical { context, iterations } => Error::Numerical {
            context: format!("client {client} round {round} step {step}: {context}"),
            iterations,
        },
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub delta: SparseDelta,
    pub train_loss: f64,
}

/// One client's round: train on the broadcast snapshot with its sketch held
/// fixed for all local steps, then keep only the active columns/rows.
pub fn local_round(
    snapshot: &GlobalState,
    data: &Dataset,
    cfg: &ClientConfig,
    sketch: &Sketch,
    stream: &RngStream,
    scaling: f64,
) -> Result<LocalOutcome> {
    if snapshot.adapters.rank() != sketch.r() {
        return Err(Error::shape(
            "local_round",
            snapshot.adapters.b.shape(),
            (sketch.r(), sketch.r()),
        ));
    }
    let (end, train_loss) = train_local(
        &snapshot.base,
        &snapshot.adapters,
        sketch,
        data,
        cfg,
        stream,
        scaling,
        snapshot.round,
    )?;
    let delta = extract_delta(&snapshot.adapters, &end, sketch, cfg.id, snapshot.round)?;
    Ok(LocalOutcome { delta, train_loss })
}

/// Runs `local_round` for every planned participant, in parallel; results
/// come back in plan order.
pub fn local_rounds(
    snapshot: &GlobalState,
    data: &Dataset,
    clients: &[ClientConfig],
    plan: &RoundPlan,
    master: &RngStream,
    scaling: f64,
) -> Result<Vec<LocalOutcome>> {
    plan.participants
        .par_iter()
        .zip(plan.sketches.par_iter())
        .map(|(&id, sketch)| {
            let cfg = clients
                .iter()
                .find(|c| c.id == id)
                .ok_or_else(|| Error::Protocol(format!("unknown participant {id}")))?;
            local_round(snapshot, data, cfg, sketch, &batch_stream(master, plan.round, id), scaling)
        })
        .collect()
}

fn check_round(state: &GlobalState, deltas: &[&SparseDelta]) -> Result<()> {
    let r = state.adapters.rank();
    for d in deltas {
        if d.round != state.round {
            return Err(Error::Protocol(format!(
                "delta from client {} is for round {}, server is at round {}",
                d.client, d.round, state.round
            )));
        }
        if d.rank() != r || d.m() != state.adapters.m() || d.n() != state.adapters.n() {
            return Err(Error::Protocol(format!("delta from client {} has the wrong shape", d.client)));
        }
    }
    let mut ids: Vec<usize> = deltas.iter().map(|d| d.client).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Protocol("duplicate client delta in one round".into()));
    }
    Ok(())
}

/// `[B; A] += (1/N) Σ densify(Δ_i)`, summed in ascending client id. Entries
/// outside the union of the deltas' index sets are not touched at all.
pub fn aggregate(
    state: &GlobalState,
    deltas: &[SparseDelta],
    denominator: Denominator,
    total_clients: usize,
) -> Result<GlobalState> {
    let mut ordered: Vec<&SparseDelta> = deltas.iter().collect();
    check_round(state, &ordered)?;
    ordered.sort_by_key(|d| d.client);
    let (m, n, r) = (state.adapters.m(), state.adapters.n(), state.adapters.rank());
    let mut sum_b = Matrix::zeros(m, r);
    let mut sum_a = Matrix::zeros(r, n);
    let mut touched = vec![false; r];
    for d in &ordered {
        for (t, &j) in d.indices().iter().enumerate() {
            touched[j] = true;
            for i in 0..m {
                sum_b.set(i, j, sum_b.get(i, j) + d.b_cols().get(i, t));
            }
            for (acc, v) in sum_a.row_mut(j).iter_mut().zip(d.a_rows().row(t)) {
                *acc += *v;
            }
        }
    }
    let count = match denominator {
        Denominator::ParticipantCount => ordered.len(),
        Denominator::TotalClients => total_clients,
    };
    apply_mean_update(state, &sum_b, &sum_a, &touched, count)
}

/// Adds `sum / count` to the touched columns of `B` and rows of `A` and
/// advances the round counter.
pub fn apply_mean_update(
    state: &GlobalState,
    sum_b: &Matrix,
    sum_a: &Matrix,
    touched: &[bool],
    count: usize,
) -> Result<GlobalState> {
    if count == 0 {
        if touched.iter().any(|t| *t) {
            return Err(Error::Argument("aggregation denominator is zero".into()));
        }
        let mut next = state.clone();
        next.round += 1;
        return Ok(next);
    }
    let denom = count as f64;
    let mut next = state.clone();
    for (j, _) in touched.iter().enumerate().filter(|(_, t)| **t) {
        for i in 0..next.adapters.m() {
            let v = next.adapters.b.get(i, j) + sum_b.get(i, j) / denom;
            next.adapters.b.set(i, j, v);
        }
        for (x, s) in next.adapters.a.row_mut(j).iter_mut().zip(sum_a.row(j)) {
            *x += *s / denom;
        }
    }
    next.round += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_task, iid_partition, TaskKind, TaskSpec};

    fn state(m: usize, n: usize, r: usize) -> GlobalState {
        GlobalState {
            base: FrozenBase::new(Matrix::zeros(m, n)),
            adapters: AdapterPair::init(m, n, r, &RngStream::new(0, 1)).unwrap(),
            round: 0,
        }
    }

    fn world(clients: usize, k: usize, steps: usize, lr: f64) -> (Dataset, Vec<ClientConfig>) {
        let data = generate_task(
            &TaskSpec {
                kind: TaskKind::LeastSquares,
                m: 6,
                n: 5,
                true_rank: 2,
                samples: 40 * clients,
                noise: 0.05,
            },
            &RngStream::new(1, 0),
        )
        .unwrap();
        let shards = iid_partition(&data, clients, &RngStream::new(1, 1)).unwrap();
        let cfgs = shards
            .into_iter()
            .map(|shard| ClientConfig {
                id: shard.owner,
                schedule: RankSchedule::Constant { k },
                shard,
                local_steps: steps,
                lr,
                batch_size: Some(8),
            })
            .collect();
        (data, cfgs)
    }

    #[test]
    fn full_participation_full_rank_gives_identity_sketches() {
        let (_, clients) = world(4, 4, 1, 0.1);
        let plan = plan_round(&state(6, 5, 4), &clients, Participation::All, &RngStream::new(2, 0)).unwrap();
        assert_eq!(plan.participants, vec![0, 1, 2, 3]);
        assert!(plan.sketches.iter().all(Sketch::is_identity));
    }

    #[test]
    fn partial_participation_count() {
        let (_, clients) = world(20, 2, 1, 0.1);
        let plan = plan_round(&state(6, 5, 4), &clients, Participation::Count(10), &RngStream::new(3, 0)).unwrap();
        assert_eq!(plan.participants.len(), 10);
        assert!(plan.participants.windows(2).all(|w| w[0] < w[1]));
        assert!(plan_round(&state(6, 5, 4), &clients, Participation::Count(0), &RngStream::new(3, 0)).is_err());
        assert!(plan_round(&state(6, 5, 4), &clients, Participation::Count(21), &RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn participation_frequencies() {
        let (_, clients) = world(20, 2, 1, 0.1);
        let master = RngStream::new(4, 0);
        let mut s = state(6, 5, 4);
        let mut counts = vec![0usize; 20];
        for t in 0..10_000 {
            s.round = t;
            for p in plan_round(&s, &clients, Participation::Count(5), &master).unwrap().participants {
                counts[p] += 1;
            }
        }
        for c in counts {
            assert!((2350..=2650).contains(&c), "{c}");
        }
    }

    #[test]
    fn plan_is_deterministic_per_round() {
        let (_, clients) = world(8, 2, 1, 0.1);
        let master = RngStream::new(5, 0);
        let s = state(6, 5, 4);
        let a = plan_round(&s, &clients, Participation::Count(3), &master).unwrap();
        let b = plan_round(&s, &clients, Participation::Count(3), &master).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let (data, clients) = world(1, 2, 5, 0.0);
        let s = state(6, 5, 4);
        let sk = sample_random_k(SketchSpec::new(4, 2).unwrap(), &RngStream::new(6, 0));
        let out = local_round(&s, &data, &clients[0], &sk, &RngStream::new(6, 1), 1.0).unwrap();
        assert!(out.delta.payload().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_full_batch_step_matches_hand_step() {
        let (data, mut clients) = world(1, 2, 1, 0.05);
        clients[0].batch_size = None;
        let mut s = state(6, 5, 4);
        s.adapters.b = crate::numerics::gaussian_matrix(6, 4, &RngStream::new(7, 3), 0.3).unwrap();
        let sk = Sketch::from_indices(SketchSpec::new(4, 2).unwrap(), vec![1, 3]).unwrap();
        let out = local_round(&s, &data, &clients[0], &sk, &RngStream::new(7, 1), 1.0).unwrap();

        // hand step: G = mean (W x − y) xᵀ at W = W0 + B S A
        let w = effective_weight_scaled(&s.base, &s.adapters, &sk, 1.0).unwrap();
        let (_, g) = loss_and_weight_grad(&w, &data, &clients[0].shard.indices).unwrap();
        let gb = crate::numerics::matmul(&g, &s.adapters.a.transpose()).unwrap();
        let ga = crate::numerics::matmul(&s.adapters.b.transpose(), &g).unwrap();
        let (db, da) = out.delta.densify();
        for j in 0..4 {
            let scale = if sk.contains(j) { 2.0 } else { 0.0 };
            for i in 0..6 {
                assert!((db.get(i, j) + 0.05 * scale * gb.get(i, j)).abs() < 1e-14);
            }
            for c in 0..5 {
                assert!((da.get(j, c) + 0.05 * scale * ga.get(j, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn delta_zero_outside_sketch() {
        let (data, clients) = world(1, 3, 7, 0.05);
        let s = state(6, 5, 8);
        for t in 0..20 {
            let sk = sample_random_k(SketchSpec::new(8, 3).unwrap(), &RngStream::new(8, t));
            let out = local_round(&s, &data, &clients[0], &sk, &RngStream::new(9, t), 1.0).unwrap();
            let (db, da) = out.delta.densify();
            for j in (0..8).filter(|&j| !sk.contains(j)) {
                assert!(db.col(j).iter().all(|v| v.to_bits() == 0));
                assert!(da.row(j).iter().all(|v| v.to_bits() == 0));
            }
        }
    }

    fn delta(client: usize, round: usize, rank: usize, idx: Vec<usize>, value: f64) -> SparseDelta {
        let k = idx.len();
        SparseDelta::new(
            client,
            round,
            rank,
            idx,
            Matrix::from_fn(2, k, |_, _| value),
            Matrix::from_fn(k, 3, |_, _| value),
        )
        .unwrap()
    }

    #[test]
    fn single_client_aggregate_adds_delta() {
        let s = state(2, 3, 4);
        let d = delta(0, 0, 4, vec![1, 2], 0.5);
        let next = aggregate(&s, &[d.clone()], Denominator::ParticipantCount, 1).unwrap();
        let (db, da) = d.densify();
        assert!(next.adapters.b.bit_eq(&s.adapters.b.add(&db).unwrap()));
        assert!(next.adapters.a.bit_eq(&s.adapters.a.add(&da).unwrap()));
        assert_eq!(next.round, 1);
    }

    #[test]
    fn disjoint_clients_each_get_half() {
        let s = state(2, 3, 4);
        let d0 = delta(0, 0, 4, vec![0], 1.0);
        let d1 = delta(1, 0, 4, vec![3], 4.0);
        let next = aggregate(&s, &[d1, d0], Denominator::ParticipantCount, 2).unwrap();
        for i in 0..2 {
            assert_eq!(next.adapters.b.get(i, 0), s.adapters.b.get(i, 0) + 0.5);
            assert_eq!(next.adapters.b.get(i, 3), s.adapters.b.get(i, 3) + 2.0);
        }
        // untouched entries are bit-identical
        assert!(next.adapters.a.row(1).iter().zip(s.adapters.a.row(1)).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(next.adapters.a.row(2).iter().zip(s.adapters.a.row(2)).all(|(a, b)| a.to_bits() == b.to_bits()));

        let total = aggregate(&s, &[delta(0, 0, 4, vec![0], 1.0)], Denominator::TotalClients, 4).unwrap();
        assert_eq!(total.adapters.b.get(0, 0), s.adapters.b.get(0, 0) + 0.25);
    }

    #[test]
    fn mixed_rounds_rejected() {
        let s = state(2, 3, 4);
        let err = aggregate(
            &s,
            &[delta(0, 0, 4, vec![0], 1.0), delta(1, 1, 4, vec![1], 1.0)],
            Denominator::ParticipantCount,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let dup = aggregate(
            &s,
            &[delta(0, 0, 4, vec![0], 1.0), delta(0, 0, 4, vec![1], 1.0)],
            Denominator::ParticipantCount,
            2,
        );
        assert!(matches!(dup, Err(Error::Protocol(_))));
    }

    #[test]
    fn schedules() {
        let st = RngStream::new(1, 1);
        assert_eq!(RankSchedule::Constant { k: 3 }.k_at(9, &st), 3);
        assert_eq!(RankSchedule::Cycle { ks: vec![1, 2, 4] }.k_at(4, &st), 2);
        for t in 0..100 {
            let k = RankSchedule::Uniform { min: 2, max: 4 }.k_at(t, &RngStream::new(t as u64, 0));
            assert!((2..=4).contains(&k));
        }
        assert!(RankSchedule::Constant { k: 0 }.validate(4).is_err());
        assert!(RankSchedule::Uniform { min: 3, max: 2 }.validate(4).is_err());
        assert!(RankSchedule::Cycle { ks: vec![5] }.validate(4).is_err());
    }
}
