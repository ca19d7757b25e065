use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::run_baseline;
use crate::error::{Error, Result};
use crate::federation::{RoundMetrics, RunOutput};
use crate::lora::{hex_digest, FrozenBase};
use crate::tasks::write_dataset;

use super::config::Config;

pub const ARTIFACT_VERSION: &str = "fslora-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.bin";

/// Largest accepted ratio of seed-averaged final loss with top-k uploads
/// at ratio 0.5 to the same runs without compression (standard scenario).
pub const TOPK_LOSS_FACTOR_LIMIT: f64 = 1.25;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeed {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHashes {
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub base_sha256: String,
}

/// Everything needed to replay a run. Wall-clock timestamps are left out
/// so that a replay reproduces this file too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub crate_version: String,
    pub config: Config,
    pub master_seed: u64,
    pub streams: BTreeMap<String, StreamSeed>,
    pub inputs: InputHashes,
    pub outputs: BTreeMap<String, String>,
    pub rounds_completed: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_loss_factor_limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub output: RunOutput,
}

impl RunArtifacts {
    pub fn succeeded(&self) -> bool {
        self.output.failure.is_none()
    }
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if metrics.is_empty() {
        w.write_record(["round", "train_loss", "eval_loss", "grad_norm", "uplink_bytes", "downlink_bytes"])?;
    }
    for m in metrics {
        w.serialize(m)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<RoundMetrics>, _>>()?)
}

/// Runs `config` and writes manifest, metrics and snapshot into `dir`.
/// A mid-run failure still writes all three (with the completed rounds)
/// and is reported through [`RunArtifacts::output`].
pub fn run_config(config: &Config, dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let env = config.environment()?;
    let output = run_baseline(config.method, &env, &config.options())?;

    fs::create_dir_all(dir)?;
    let metrics = metrics_csv(&output.metrics)?;
    let snapshot = output.snapshot.to_bytes();
    fs::write(dir.join(METRICS_FILE), &metrics)?;
    fs::write(dir.join(SNAPSHOT_FILE), &snapshot)?;

    let mut dataset = Vec::new();
    write_dataset(&env.train, &mut dataset)?;
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        master_seed: config.seed,
        streams: config
            .streams()
            .into_iter()
            .map(|(name, s)| (name.to_string(), StreamSeed { seed: s.seed, stream: s.stream }))
            .collect(),
        inputs: InputHashes {
            config_sha256: sha256_hex(config.to_toml().as_bytes()),
            dataset_sha256: sha256_hex(&dataset),
            base_sha256: FrozenBase::new(env.train.w0.clone()).checksum(),
        },
        outputs: BTreeMap::from([
            (METRICS_FILE.to_string(), sha256_hex(&metrics)),
            (SNAPSHOT_FILE.to_string(), sha256_hex(&snapshot)),
        ]),
        rounds_completed: output.metrics.len(),
        initial_eval_loss: output.initial_eval_loss,
        final_eval_loss: output.final_eval_loss(),
        topk_loss_factor_limit: config.federation.topk_ratio.map(|_| TOPK_LOSS_FACTOR_LIMIT),
        failure: output.failure.as_ref().map(ToString::to_string),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        manifest,
        output,
    })
}

/// Re-executes the run described by a manifest into `dir`.
pub fn replay(manifest_path: &Path, dir: &Path) -> Result<RunArtifacts> {
    let manifest = RunManifest::read(manifest_path)?;
    if manifest.artifact_version != ARTIFACT_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} is not {ARTIFACT_VERSION}",
            manifest.artifact_version
        )));
    }
    run_config(&manifest.config, dir)
}

/// Names of the artifact files whose bytes differ between two run
/// directories.
pub fn diff_artifacts(a: &Path, b: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for name in [MANIFEST_FILE, METRICS_FILE, SNAPSHOT_FILE] {
        if fs::read(a.join(name))? != fs::read(b.join(name))? {
            out.push(name.to_string());
        }
    }
    Ok(out)
}
