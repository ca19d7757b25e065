use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::{check_topk_ratio, Method};
use crate::error::{Error, Result};
use crate::federation::{
    ClientConfig, Denominator, Environment, ExperimentOptions, Participation, RankSchedule, SecureOptions,
};
use crate::numerics::{domain, RngStream};
use crate::tasks::{dirichlet_partition, generate_task, iid_partition, Dataset, Shard, TaskKind, TaskSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default = "default_method")]
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub rank: usize,
    #[serde(default = "one")]
    pub scaling: f64,
    pub task: TaskConfig,
    pub partition: PartitionConfig,
    pub clients: ClientsConfig,
    #[serde(default)]
    pub federation: FederationConfig,
}

fn default_method() -> Method {
    Method::FsLora
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub m: usize,
    pub n: usize,
    pub true_rank: usize,
    pub samples: usize,
    pub noise: f64,
    pub eval_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub clients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Settings shared by every client. The rank is given by exactly one of
/// `sketch_ratio`, `k`, `ks` (one per client) or `schedule`; with none of
/// them every client uses the full rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    pub local_steps: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<RankSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Clients per round; absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participation: Option<usize>,
    #[serde(default)]
    pub denominator: Denominator,
    #[serde(default)]
    pub secure: bool,
    #[serde(default = "one")]
    pub mask_stddev: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_ratio: Option<f64>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            participation: None,
            denominator: Denominator::ParticipantCount,
            secure: false,
            mask_stddev: 1.0,
            topk_ratio: None,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "version",
    "method",
    "seed",
    "rounds",
    "rank",
    "scaling",
    "task",
    "partition",
    "clients",
    "federation",
];
const TABLE_KEYS: &[(&str, &[&str])] = &[
    ("task", &["kind", "m", "n", "true_rank", "samples", "noise", "eval_samples"]),
    ("partition", &["scheme", "clients", "alpha"]),
    ("clients", &["local_steps", "lr", "batch_size", "sketch_ratio", "k", "ks", "schedule"]),
    ("federation", &["participation", "denominator", "secure", "mask_stddev", "topk_ratio"]),
];
const SCHEDULE_KEYS: &[&str] = &["kind", "k", "min", "max", "ks"];

/// Every key in `table` that the schema does not know, as dotted paths.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for (key, value) in table {
        if !TOP_KEYS.contains(&key.as_str()) {
            out.push(key.clone());
            continue;
        }
        let Some((_, allowed)) = TABLE_KEYS.iter().find(|(t, _)| t == key) else {
            continue;
        };
        let Some(inner) = value.as_table() else {
            continue;
        };
        for (k, v) in inner {
            if !allowed.contains(&k.as_str()) {
                out.push(format!("{key}.{k}"));
            } else if key == "clients" && k == "schedule" {
                if let Some(s) = v.as_table() {
                    out.extend(
                        s.keys()
                            .filter(|sk| !SCHEDULE_KEYS.contains(&sk.as_str()))
                            .map(|sk| format!("clients.schedule.{sk}")),
                    );
                }
            }
        }
    }
    out
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted `key=value` on a raw table; the value is read as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("override key '{path}' is malformed")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("override '{path}': '{part}' is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown.into_iter().map(|k| format!("unknown key '{k}'")).collect()));
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let t = &self.task;
        if self.version != CONFIG_VERSION {
            errs.push(format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        }
        if self.rounds == 0 {
            errs.push("rounds: must be >= 1".into());
        }
        if self.rank == 0 || self.rank > t.m.min(t.n) {
            errs.push(format!("rank: {} outside [1, min(m, n) = {}]", self.rank, t.m.min(t.n)));
        }
        if !(self.scaling.is_finite() && self.scaling > 0.0) {
            errs.push("scaling: must be finite and > 0".into());
        }
        if let Err(e) = self.task_spec().validate() {
            errs.push(format!("task: {e}"));
        }
        if t.eval_samples == 0 {
            errs.push("task.eval_samples: must be >= 1".into());
        }
        let p = &self.partition;
        if p.clients == 0 {
            errs.push("partition.clients: must be >= 1".into());
        }
        match (p.scheme, p.alpha) {
            (PartitionScheme::Dirichlet, None) => errs.push("partition.alpha: required for dirichlet".into()),
            (PartitionScheme::Dirichlet, Some(a)) if !(a > 0.0 && a.is_finite()) => {
                errs.push("partition.alpha: must be > 0".into())
            }
            (PartitionScheme::Iid, Some(_)) => errs.push("partition.alpha: only valid with dirichlet".into()),
            _ => {}
        }
        let c = &self.clients;
        if c.local_steps == 0 {
            errs.push("clients.local_steps: must be >= 1".into());
        }
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            errs.push("clients.lr: must be finite and >= 0".into());
        }
        if c.batch_size == Some(0) {
            errs.push("clients.batch_size: must be >= 1".into());
        }
        let given = [c.sketch_ratio.is_some(), c.k.is_some(), c.ks.is_some(), c.schedule.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if given > 1 {
            errs.push("clients: give at most one of sketch_ratio, k, ks, schedule".into());
        }
        if let Some(ratio) = c.sketch_ratio {
            if ratio_to_k(ratio, self.rank).is_none() {
                errs.push(format!("clients.sketch_ratio: {ratio} x rank {} is not an integer in [1, rank]", self.rank));
            }
        }
        if let Some(ks) = &c.ks {
            if ks.len() != p.clients {
                errs.push(format!("clients.ks: {} entries for {} clients", ks.len(), p.clients));
            }
        }
        if errs.is_empty() {
            for (i, s) in self.schedules().iter().enumerate() {
                if let Err(e) = s.validate(self.rank) {
                    errs.push(format!("clients (client {i}): {e}"));
                    break;
                }
            }
        }
        let f = &self.federation;
        if let Some(part) = f.participation {
            if part == 0 || part > p.clients {
                errs.push(format!("federation.participation: {part} outside [1, {}]", p.clients));
            }
        }
        if let Some(ratio) = f.topk_ratio {
            if let Err(e) = check_topk_ratio(ratio) {
                errs.push(format!("federation.topk_ratio: {e}"));
            }
            if self.method != Method::FsLora {
                errs.push("federation.topk_ratio: only supported with method fslora".into());
            }
        }
        if f.secure {
            if self.method != Method::FsLora {
                errs.push("federation.secure: only supported with method fslora".into());
            }
            if f.topk_ratio.is_some() {
                errs.push("federation.secure: cannot be combined with topk_ratio".into());
            }
        }
        if !(f.mask_stddev >= 0.0 && f.mask_stddev.is_finite()) {
            errs.push("federation.mask_stddev: must be finite and >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task.kind,
            m: self.task.m,
            n: self.task.n,
            true_rank: self.task.true_rank,
            samples: self.task.samples,
            noise: self.task.noise,
        }
    }

    fn schedules(&self) -> Vec<RankSchedule> {
        let c = &self.clients;
        let n = self.partition.clients;
        if let Some(ks) = &c.ks {
            return ks.iter().map(|&k| RankSchedule::Constant { k }).collect();
        }
        let shared = if let Some(s) = &c.schedule {
            s.clone()
        } else if let Some(k) = c.k {
            RankSchedule::Constant { k }
        } else if let Some(r) = c.sketch_ratio {
            RankSchedule::Constant {
                k: ratio_to_k(r, self.rank).unwrap_or(0),
            }
        } else {
            RankSchedule::Constant { k: self.rank }
        };
        vec![shared; n]
    }

    pub fn master(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    /// Stream layout shared by every run: one stream per purpose.
    pub fn streams(&self) -> Vec<(&'static str, RngStream)> {
        let m = self.master();
        vec![
            ("task", m.derive(domain::TASK, 0)),
            ("eval", m.derive(domain::EVAL, 0)),
            ("partition", m.derive(domain::PARTITION, 0)),
            ("init", m.derive(domain::INIT, 0)),
            ("masks", m.derive(domain::MASK, 0)),
        ]
    }

    pub fn dataset(&self) -> Result<Dataset> {
        generate_task(&self.task_spec(), &self.master().derive(domain::TASK, 0))
    }

    pub fn shards(&self, data: &Dataset) -> Result<Vec<Shard>> {
        let stream = self.master().derive(domain::PARTITION, 0);
        match self.partition.scheme {
            PartitionScheme::Iid => iid_partition(data, self.partition.clients, &stream),
            PartitionScheme::Dirichlet => {
                dirichlet_partition(data, self.partition.clients, self.partition.alpha.unwrap_or(1.0), &stream)
            }
        }
    }

    pub fn environment(&self) -> Result<Environment> {
        let train = self.dataset()?;
        let eval = train.resample(self.task.eval_samples, &self.master().derive(domain::EVAL, 0));
        let shards = self.shards(&train)?;
        let clients = shards
            .into_iter()
            .zip(self.schedules())
            .map(|(shard, schedule)| ClientConfig {
                id: shard.owner,
                schedule,
                shard,
                local_steps: self.clients.local_steps,
                lr: self.clients.lr,
                batch_size: self.clients.batch_size,
            })
            .collect();
        Ok(Environment { train, eval, clients })
    }

    pub fn options(&self) -> ExperimentOptions {
        let mut opts = ExperimentOptions::new(self.rank, self.rounds, self.seed);
        opts.scaling = self.scaling;
        opts.participation = match self.federation.participation {
            Some(p) => Participation::Count(p),
            None => Participation::All,
        };
        opts.denominator = self.federation.denominator;
        opts.topk = self.federation.topk_ratio;
        opts.secure = self.federation.secure.then_some(SecureOptions {
            mask_stddev: self.federation.mask_stddev,
        });
        opts
    }
}

/// `ratio·r` when it is an integer in `[1, r]`.
pub fn ratio_to_k(ratio: f64, r: usize) -> Option<usize> {
    let x = ratio * r as f64;
    let k = x.round();
    ((x - k).abs() <= 1e-9 && k >= 1.0 && k <= r as f64).then_some(k as usize)
}

/// Keys that appear in a config, for listing in docs and errors.
pub fn known_keys() -> BTreeSet<String> {
    let mut out: BTreeSet<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
    for (t, ks) in TABLE_KEYS {
        out.extend(ks.iter().map(|k| format!("{t}.{k}")));
    }
    out
}

/// The reference scenario: least squares, 10 clients, `32×32` base,
/// rank 16, `H = 10`, 200 rounds.
pub fn standard_config(seed: u64, sketch_ratio: f64) -> Config {
    Config {
        version: CONFIG_VERSION,
        method: Method::FsLora,
        seed,
        rounds: 200,
        rank: 16,
        scaling: 1.0,
        task: TaskConfig {
            kind: TaskKind::LeastSquares,
            m: 32,
            n: 32,
            true_rank: 4,
            samples: 2000,
            noise: 0.01,
            eval_samples: 1000,
        },
        partition: PartitionConfig {
            scheme: PartitionScheme::Iid,
            clients: 10,
            alpha: None,
        },
        clients: ClientsConfig {
            local_steps: 10,
            lr: 0.005,
            batch_size: Some(16),
            sketch_ratio: Some(sketch_ratio),
            k: None,
            ks: None,
            schedule: None,
        },
        federation: FederationConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 3
rounds = 2
rank = 4

[task]
kind = "least-squares"
m = 6
n = 5
true_rank = 2
samples = 40
noise = 0.1
eval_samples = 20

[partition]
scheme = "iid"
clients = 2

[clients]
local_steps = 2
lr = 0.05
sketch_ratio = 0.5
"#;

    #[test]
    fn parses_minimal() {
        let c = Config::parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.method, Method::FsLora);
        assert_eq!(c.schedules(), vec![RankSchedule::Constant { k: 2 }; 2]);
        let env = c.environment().unwrap();
        assert_eq!(env.clients.len(), 2);
        assert_eq!(env.eval.len(), 20);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::parse(MINIMAL, &[]).unwrap();
        assert_eq!(Config::parse(&c.to_toml(), &[]).unwrap(), c);
        let std = standard_config(1, 0.25);
        assert_eq!(Config::parse(&std.to_toml(), &[]).unwrap(), std);
    }

    #[test]
    fn lists_all_unknown_keys() {
        let text = format!("{MINIMAL}\ncolour = 1\n[federation]\nsecrue = true\n");
        let Err(Error::Config(errs)) = Config::parse(&text, &["task.sigma=2".into()]) else {
            panic!("expected a config error");
        };
        assert!(errs.iter().any(|e| e.contains("colour")));
        assert!(errs.iter().any(|e| e.contains("federation.secrue")));
        assert!(errs.iter().any(|e| e.contains("task.sigma")));
    }

    #[test]
    fn overrides() {
        let c = Config::parse(
            MINIMAL,
            &["seed=9".into(), "method=flexlora".into(), "clients.lr=0.5".into(), "federation.participation=1".into()],
        )
        .unwrap();
        assert_eq!((c.seed, c.method, c.clients.lr), (9, Method::FlexLora, 0.5));
        assert_eq!(c.federation.participation, Some(1));
        assert!(Config::parse(MINIMAL, &["seed".into()]).is_err());
    }

    #[test]
    fn semantic_errors_are_collected() {
        let Err(Error::Config(errs)) = Config::parse(
            MINIMAL,
            &["rounds=0".into(), "clients.sketch_ratio=0.3".into(), "federation.topk_ratio=2.0".into()],
        ) else {
            panic!("expected a config error");
        };
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn ratio_conversion() {
        assert_eq!(ratio_to_k(0.125, 16), Some(2));
        assert_eq!(ratio_to_k(1.0, 16), Some(16));
        assert_eq!(ratio_to_k(0.3, 16), None);
        assert_eq!(ratio_to_k(0.01, 16), None);
    }
}
