use crate::diagnostics::{estimate_assumptions, AssumptionEstimates, DiagnoseSettings};
use crate::error::Result;
use crate::federation::schedule_stream;
use crate::lora::FrozenBase;
use crate::numerics::domain;

use super::config::Config;

/// Defaults sized for desk-scale tasks. `k` is client 0's round-0 rank.
pub fn default_settings(config: &Config) -> Result<DiagnoseSettings> {
    let env = config.environment()?;
    let master = config.master();
    let k = env
        .clients
        .first()
        .map_or(config.rank, |c| c.schedule.k_at(0, &schedule_stream(&master, 0, c.id)));
    let r = config.rank;
    let mut probe_ks: Vec<usize> = [r / 4, r / 2, r].into_iter().map(|k| k.max(1)).collect();
    probe_ks.dedup();
    Ok(DiagnoseSettings {
        k,
        states: 20,
        draws: 200,
        sketch_draws: 64,
        probes: 10,
        probe_ks,
        probe_step: 1e-4,
        b_std: 0.1,
    })
}

/// Estimates the assumption constants on the config's task and shards.
pub fn diagnose(config: &Config, settings: &DiagnoseSettings) -> Result<AssumptionEstimates> {
    config.validate()?;
    let env = config.environment()?;
    let base = FrozenBase::new(env.train.w0.clone());
    let shards: Vec<(usize, &[usize])> = env.clients.iter().map(|c| (c.id, c.shard.indices.as_slice())).collect();
    estimate_assumptions(
        &base,
        &env.train,
        &shards,
        config.rank,
        config.scaling,
        settings,
        &config.master().derive(domain::DIAGNOSE, 0),
    )
}
