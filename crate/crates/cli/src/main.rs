use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fslora_core::harness::{
    cost_check_config, cost_table, default_settings, diagnose, expand_grid, replay, run_config, run_sweep,
    run_validation, Config, GridSpec, Mutation, RunArtifacts, ValidateOptions, SUMMARY_FILE,
};
use fslora_core::Error;

#[derive(Parser)]
#[command(name = "fslora", version, about = "Federated sketching LoRA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write manifest, metrics and snapshot.
    Run(RunArgs),
    /// Run a grid of experiments and summarize seed means.
    Sweep(SweepArgs),
    /// Estimate gradient-norm, variance, dissimilarity and smoothness constants.
    Diagnose(DiagnoseArgs),
    /// Compare measured payload bytes with the closed-form costs.
    ValidateCosts(CostArgs),
    /// Run the invariant and oracle suite.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output root directory.
    #[arg(long, env = "FSLORA_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(m) = &self.method {
            out.push(format!("method=\"{m}\""));
        }
        if let Some(t) = self.rounds {
            out.push(format!("rounds={t}"));
        }
        out.extend(self.set.iter().cloned());
        out
    }

    fn load(&self) -> Result<Config> {
        let path = self.config.as_deref().context("--config is required")?;
        Ok(Config::load(path, &self.overrides())?)
    }

    fn load_or(&self, fallback: Config) -> Result<Config> {
        match &self.config {
            Some(path) => Ok(Config::load(path, &self.overrides())?),
            None => {
                let text = fallback.to_toml();
                Ok(Config::parse(&text, &self.overrides())?)
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Run directory name under the output root (default `<method>-s<seed>`).
    #[arg(long)]
    name: Option<String>,
    /// Replay the run described by this manifest instead of a config.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid spec (TOML).
    grid: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct CostArgs {
    /// Config to reconcile; defaults to a small mixed-rank scenario.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ValidateArgs {
    /// Run only the named checks, repeatable.
    #[arg(long)]
    only: Vec<String>,
    /// Skip the multi-seed trend experiments.
    #[arg(long)]
    quick: bool,
    /// Inject a known defect to confirm a check catches it.
    #[arg(long, value_parser = ["drop-sketch"])]
    mutate: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// List the available checks and exit.
    #[arg(long)]
    list: bool,
}

fn report_run(a: &RunArtifacts) -> ExitCode {
    println!(
        "{}: {} rounds, eval loss {:.6e} -> {:.6e}",
        a.dir.display(),
        a.manifest.rounds_completed,
        a.manifest.initial_eval_loss,
        a.manifest.final_eval_loss
    );
    match &a.output.failure {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("run failed after {} rounds: {e}", a.manifest.rounds_completed);
            ExitCode::FAILURE
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    if let Some(manifest) = &args.replay {
        let name = args.name.unwrap_or_else(|| "replay".into());
        let a = replay(manifest, &args.out.out.join(name))?;
        return Ok(report_run(&a));
    }
    let config = args.config.load()?;
    let name = args.name.unwrap_or_else(|| format!("{}-s{}", config.method, config.seed));
    let a = run_config(&config, &args.out.out.join(name))?;
    Ok(report_run(&a))
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let (grid, base) = GridSpec::load(&args.grid)?;
    let points = expand_grid(&grid, &base)?;
    let stem = args.grid.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
    let dir = args.out.out.join(stem);
    let rows = run_sweep(&points, &dir)?;
    println!("{:<11} {:>4} {:>9} {:>5} {:>5} {:>14} {:>12} {:>12}", "method", "rank", "sketch", "runs", "fail", "final loss", "stddev", "uplink/rnd");
    for r in &rows {
        println!(
            "{:<11} {:>4} {:>9} {:>5} {:>5} {:>14.6e} {:>12.4e} {:>12.1}",
            r.method.as_str(),
            r.rank,
            r.sketching,
            r.runs,
            r.failures,
            r.final_eval_loss_mean,
            r.final_eval_loss_std,
            r.uplink_bytes_per_round
        );
    }
    println!("{} points, summary in {}", points.len(), dir.join(SUMMARY_FILE).display());
    let failed: usize = rows.iter().map(|r| r.failures).sum();
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<ExitCode> {
    let config = args.config.load()?;
    let mut settings = default_settings(&config)?;
    if let Some(s) = args.states {
        settings.states = s;
        settings.probes = settings.probes.min(s);
    }
    if let Some(d) = args.draws {
        settings.draws = d;
    }
    let est = diagnose(&config, &settings)?;
    let dir = args.out.out.join(format!("diagnose-s{}", config.seed));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("diagnostics.json");
    let mut json = serde_json::to_vec_pretty(&est)?;
    json.push(b'\n');
    std::fs::write(&path, json)?;
    println!("r={} k={} over {} states", est.r, est.k, est.states);
    println!("variance: rho={:.4e} sigma2={:.4e}", est.rho, est.sigma2);
    println!("dissimilarity: c_h={:.4e} delta_h2={:.4e}", est.c_h, est.delta_h2);
    for p in &est.smoothness {
        println!("smoothness k={}: ratio {:.4} (bound {:.2})", p.k, p.ratio, p.bound);
    }
    println!("report in {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate_costs(args: CostArgs) -> Result<ExitCode> {
    let seed = args.config.seed.unwrap_or(0);
    let config = args.config.load_or(cost_check_config(seed))?;
    let rows = cost_table(&config)?;
    println!("{:<11} {:>5} {:>12} {:>12} {:>12} {:>12}  ok", "method", "round", "up meas", "up formula", "down meas", "down formula");
    for r in &rows {
        println!(
            "{:<11} {:>5} {:>12} {:>12} {:>12} {:>12}  {}",
            r.method,
            r.round,
            r.measured_uplink,
            r.predicted_uplink,
            r.measured_downlink,
            r.predicted_downlink,
            if r.matches() { "yes" } else { "NO" }
        );
    }
    let bad = rows.iter().filter(|r| !r.matches()).count();
    println!("{} rows, {bad} mismatches", rows.len());
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    if args.list {
        for (name, slow, _) in fslora_core::harness::CHECKS {
            println!("{name}{}", if *slow { " (slow)" } else { "" });
        }
        return Ok(ExitCode::SUCCESS);
    }
    let opts = ValidateOptions {
        only: args.only,
        mutation: args.mutate.map(|_| Mutation::DropSketch),
        seed: args.seed,
        quick: args.quick,
    };
    let outcomes = run_validation(&opts)?;
    if outcomes.is_empty() {
        bail!("no checks selected");
    }
    for o in &outcomes {
        println!(
            "{:<4} {:<20} {:>8} ms  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.millis,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn exit_for(e: &anyhow::Error) -> ExitCode {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Argument(_)) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::ValidateCosts(a) => cmd_validate_costs(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_for(&e)
        }
    }
}
