//! Configuration, run orchestration, artifacts, sweeps and the validation
//! suite.

mod config;
mod diagnose;
mod run;
mod sweep;
mod validate;

pub use config::{
    apply_override, known_keys, ratio_to_k, standard_config, unknown_keys, ClientsConfig, Config, FederationConfig,
    PartitionConfig, PartitionScheme, TaskConfig, CONFIG_VERSION,
};
pub use diagnose::{default_settings, diagnose};
pub use run::{
    diff_artifacts, metrics_csv, read_metrics, replay, run_config, sha256_hex, InputHashes, RunArtifacts, RunManifest,
    StreamSeed, ARTIFACT_VERSION, MANIFEST_FILE, METRICS_FILE, SNAPSHOT_FILE, TOPK_LOSS_FACTOR_LIMIT,
};
pub use sweep::{expand_grid, run_sweep, summarize, GridPoint, GridSpec, PointResult, Sketching, SummaryRow, SUMMARY_FILE};
pub use validate::{
    check_names, cost_check_config, cost_table, sketched_gradient_max_error, local_steps_trend, ratio_trend, run_validation, topk_comparison,
    CheckOutcome, CostRow, Mutation, ValidateOptions, CHECKS,
};
