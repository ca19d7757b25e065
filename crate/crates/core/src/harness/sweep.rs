use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{client_costs, CostParams, Method};
use crate::error::{Error, Result};

use super::config::Config;
use super::run::run_config;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Cartesian grid over a base config. Empty axes keep the base value.
#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Base config path, relative to the grid file.
    pub base: PathBuf,
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Extra `key=value` overrides applied to every point.
    #[serde(default)]
    pub set: Vec<String>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<(GridSpec, Config)> {
        let text = fs::read_to_string(path)?;
        let grid: GridSpec = toml::from_str(&text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if !grid.ratios.is_empty() && !grid.ks.is_empty() {
            return Err(Error::Config(vec!["grid: ratios and ks are mutually exclusive".into()]));
        }
        let base_path = path.parent().unwrap_or(Path::new(".")).join(&grid.base);
        let base = Config::load(&base_path, &grid.set)?;
        Ok((grid, base))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sketching {
    Base,
    Ratio(f64),
    K(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub method: Method,
    pub rank: usize,
    pub sketching: Sketching,
    pub seed: u64,
    pub config: Config,
}

impl GridPoint {
    pub fn dir_name(&self) -> String {
        let s = match self.sketching {
            Sketching::Base => "base".to_string(),
            Sketching::Ratio(x) => format!("ratio{x}"),
            Sketching::K(k) => format!("k{k}"),
        };
        format!("{}-r{}-{}-s{}", self.method, self.rank, s, self.seed)
    }

    fn group(&self) -> (Method, usize, String) {
        let s = match self.sketching {
            Sketching::Base => String::new(),
            Sketching::Ratio(x) => x.to_string(),
            Sketching::K(k) => k.to_string(),
        };
        (self.method, self.rank, s)
    }
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Expands the grid in method, rank, sketching, seed order.
pub fn expand_grid(grid: &GridSpec, base: &Config) -> Result<Vec<GridPoint>> {
    let sketchings: Vec<Sketching> = if !grid.ratios.is_empty() {
        grid.ratios.iter().map(|&x| Sketching::Ratio(x)).collect()
    } else if !grid.ks.is_empty() {
        grid.ks.iter().map(|&k| Sketching::K(k)).collect()
    } else {
        vec![Sketching::Base]
    };
    let mut out = Vec::new();
    for method in or_base(&grid.methods, base.method) {
        for rank in or_base(&grid.ranks, base.rank) {
            for &sketching in &sketchings {
                for seed in or_base(&grid.seeds, base.seed) {
                    let mut config = base.clone();
                    config.method = method;
                    config.rank = rank;
                    config.seed = seed;
                    match sketching {
                        Sketching::Base => {}
                        Sketching::Ratio(x) => {
                            config.clients.sketch_ratio = Some(x);
                            config.clients.k = None;
                            config.clients.ks = None;
                            config.clients.schedule = None;
                        }
                        Sketching::K(k) => {
                            config.clients.sketch_ratio = None;
                            config.clients.k = Some(k);
                            config.clients.ks = None;
                            config.clients.schedule = None;
                        }
                    }
                    if let Err(Error::Config(errs)) = config.validate() {
                        let name = GridPoint { method, rank, sketching, seed, config }.dir_name();
                        return Err(Error::Config(errs.into_iter().map(|e| format!("{name}: {e}")).collect()));
                    }
                    out.push(GridPoint { method, rank, sketching, seed, config });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub point: GridPoint,
    pub final_eval_loss: Option<f64>,
    pub uplink_per_round: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub rank: usize,
    pub sketching: String,
    pub runs: usize,
    pub failures: usize,
    pub final_eval_loss_mean: f64,
    pub final_eval_loss_std: f64,
    pub uplink_bytes_per_round: f64,
    pub client_memory_bytes: u64,
    pub client_flops: u64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-client costs for client 0 at round 0 of a config.
fn point_costs(config: &Config) -> Result<(u64, u64)> {
    let env = config.environment()?;
    let master = config.master();
    let ks = env
        .clients
        .iter()
        .map(|c| c.schedule.k_at(0, &crate::federation::schedule_stream(&master, 0, c.id)))
        .collect();
    let params = CostParams::new(config.task.m, config.task.n, config.rank, ks, config.clients.local_steps)?;
    let c = client_costs(&params, config.method, 0)?;
    Ok((c.memory_bytes, c.flops))
}

pub fn summarize(results: &[PointResult]) -> Result<Vec<SummaryRow>> {
    let mut groups: Vec<((Method, usize, String), Vec<&PointResult>)> = Vec::new();
    for r in results {
        let key = r.point.group();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((method, rank, sketching), rows)| {
            let losses: Vec<f64> = rows.iter().filter_map(|r| r.final_eval_loss).collect();
            let uplinks: Vec<f64> = rows.iter().filter_map(|r| r.uplink_per_round).collect();
            let (mean, std) = mean_std(&losses);
            let (memory, flops) = point_costs(&rows[0].point.config)?;
            Ok(SummaryRow {
                method,
                rank,
                sketching,
                runs: rows.len(),
                failures: rows.iter().filter(|r| r.failure.is_some()).count(),
                final_eval_loss_mean: mean,
                final_eval_loss_std: std,
                uplink_bytes_per_round: mean_std(&uplinks).0,
                client_memory_bytes: memory,
                client_flops: flops,
            })
        })
        .collect()
}

/// Runs every grid point in parallel, one directory each, then writes
/// `summary.csv`. Failed points are counted, not fatal.
pub fn run_sweep(points: &[GridPoint], out: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out)?;
    let results: Vec<PointResult> = points
        .par_iter()
        .map(|p| match run_config(&p.config, &out.join(p.dir_name())) {
            Ok(a) => {
                let ok = a.output.failure.is_none();
                let rounds = a.output.metrics.len().max(1) as f64;
                PointResult {
                    point: p.clone(),
                    final_eval_loss: ok.then(|| a.output.final_eval_loss()),
                    uplink_per_round: ok
                        .then(|| a.output.metrics.iter().map(|m| m.uplink_bytes as f64).sum::<f64>() / rounds),
                    failure: a.output.failure.map(|e| e.to_string()),
                }
            }
            Err(e) => PointResult {
                point: p.clone(),
                final_eval_loss: None,
                uplink_per_round: None,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    let rows = summarize(&results)?;
    let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}
