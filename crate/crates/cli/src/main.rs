//! `isac`: runs, attention dumps, ablation grids and re-evaluation of stored runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use isac_core::engine::{run_with, RunConfig, RunOptions};
use isac_core::eval::{ablation_run, build_suite, evaluate_runs, AblationCell, EvalResult, PromptKind, SuiteParams};
use isac_core::losses::{LossKind, ScheduleId};
use isac_core::output::{write_atomic, write_run_dir, RunLabels};
use isac_core::IsacError;
use serde::Deserialize;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NO_RUNS: u8 = 4;

#[derive(Parser)]
#[command(name = "isac", version, about = "Instance-to-semantic attention control on toy denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write losses.csv, image.ppm and manifest.json.
    Run(RunArgs),
    /// Run and dump attention maps and masks at the given timesteps.
    DumpAttn(DumpArgs),
    /// Run a schedule × loss grid over a benchmark suite and aggregate accuracies.
    Ablate(AblateArgs),
    /// Recompute detections and accuracies for every stored run under a directory.
    Eval(EvalArgs),
}

/// Flags shared by commands that build a run configuration. Each flag
/// overrides the matching config-file value.
#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// Learning rate of the per-step latent update [file default: 0.01].
    #[arg(long)]
    eta: Option<f64>,
    /// Number of denoising steps T [file default: 50].
    #[arg(long)]
    steps: Option<usize>,
    /// Weight schedule A-E [file default: E].
    #[arg(long)]
    schedule: Option<ScheduleId>,
    /// Overlap loss MPO, MAE, KL or IoU [file default: MPO].
    #[arg(long)]
    loss: Option<LossKind>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.schedule {
            cfg.schedule = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON config: every run setting plus optional `out` and `dump_timesteps`.
    config: PathBuf,
    /// Run seed.
    #[arg(long, env = "ISAC_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory [default: config `out`, else ./isac-run].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DumpArgs {
    config: PathBuf,
    /// Comma-separated timesteps in 1..=T [default: config `dump_timesteps`].
    #[arg(long, value_delimiter = ',')]
    timesteps: Vec<usize>,
    #[arg(long, env = "ISAC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON config for every cell; `prompt` is ignored and `benchmark` selects the suite.
    config: Option<PathBuf>,
    /// Comma-separated schedules.
    #[arg(long, value_delimiter = ',', default_value = "E")]
    schedules: Vec<ScheduleId>,
    /// Comma-separated losses.
    #[arg(long, value_delimiter = ',', default_value = "MPO")]
    losses: Vec<LossKind>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Also run the grid's config with η = 0 as cell `baseline`.
    #[arg(long)]
    baseline: bool,
    /// Output directory [default: config `out`, else ./isac-ablate].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads [default: number of processors].
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory searched recursively for run manifests.
    #[arg(long)]
    runs: PathBuf,
    /// Where results.csv and aggregates.csv go [default: the runs directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Keys the CLI reads on top of a run configuration.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CliExtras {
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    dump_timesteps: Vec<usize>,
    #[serde(default)]
    benchmark: Option<SuiteParams>,
}

fn load_config(path: &Path) -> Result<(RunConfig, CliExtras), IsacError> {
    let text = std::fs::read_to_string(path).map_err(|e| IsacError::Config(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| IsacError::Config(format!("{}: {e}", path.display()));
    let mut map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text).map_err(bad)?;
    let mut extras = serde_json::Map::new();
    for key in ["out", "dump_timesteps", "benchmark"] {
        if let Some(v) = map.remove(key) {
            extras.insert(key.to_string(), v);
        }
    }
    let cfg: RunConfig = serde_json::from_value(map.into()).map_err(bad)?;
    let extras: CliExtras = serde_json::from_value(extras.into()).map_err(bad)?;
    Ok((cfg, extras))
}

fn run_once(
    config: &Path,
    seed: u64,
    out: Option<PathBuf>,
    overrides: &Overrides,
    dumps: Option<Vec<usize>>,
) -> anyhow::Result<()> {
    let (mut cfg, extras) = load_config(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let dump_timesteps = dumps.unwrap_or(extras.dump_timesteps);
    if let Some(t) = dump_timesteps.iter().find(|&&t| t == 0 || t > cfg.steps) {
        return Err(IsacError::Config(format!("dump timestep {t} outside 1..={}", cfg.steps)).into());
    }
    let out = out.or(extras.out).unwrap_or_else(|| PathBuf::from("isac-run"));
    let record = run_with(&cfg, seed, &RunOptions { dump_timesteps }).map_err(IsacError::from)?;
    let manifest = write_run_dir(&out, &record, &RunLabels::default())?;
    println!("wrote {} ({} files, config {})", out.display(), manifest.files.len() + 1, &manifest.config_hash[..12]);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let (mut base, extras) = match &args.config {
        Some(p) => load_config(p)?,
        None => (RunConfig::default(), CliExtras::default()),
    };
    args.overrides.apply(&mut base);
    let suite = build_suite(&extras.benchmark.unwrap_or_default())?;
    let out = args.out.clone().or(extras.out).unwrap_or_else(|| PathBuf::from("isac-ablate"));
    if args.seeds.is_empty() {
        return Err(IsacError::Config("no seeds given".into()).into());
    }
    let mut cells = Vec::new();
    if args.baseline {
        let mut c = base.clone();
        c.eta = 0.0;
        cells.push(AblationCell { id: "baseline".into(), config: c });
    }
    for &schedule in &args.schedules {
        for &loss in &args.losses {
            let mut c = base.clone();
            c.schedule = schedule;
            c.loss = loss;
            cells.push(AblationCell { id: format!("{schedule}-{loss}"), config: c });
        }
    }
    for c in &cells {
        c.config.validate()?;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().context("building worker pool")?;
    let result = pool.install(|| ablation_run(&cells, &suite, &args.seeds, Some(&out.join("runs"))));
    for r in result.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: {} {} seed {}: {}", r.config_id, r.prompt_id, r.seed, r.error.as_deref().unwrap_or(""));
    }
    write_tables(&out, &result)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["config_id", "schedule", "loss", "eta", "multi_class", "multi_instance", "aggregate"])?;
    println!("{:<12} {:>12} {:>15} {:>10}", "config", "multi-class", "multi-instance", "aggregate");
    for c in &cells {
        let mc = result.mean(&c.id, PromptKind::MultiClass);
        let mi = result.mean(&c.id, PromptKind::MultiInstance);
        let agg = aggregate(&result, &c.id);
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!("{:<12} {:>12} {:>15} {:>10}", c.id, fmt(mc), fmt(mi), fmt(agg));
        table.write_record([
            c.id.clone(),
            c.config.schedule.to_string(),
            c.config.loss.to_string(),
            c.config.eta.to_string(),
            fmt(mc),
            fmt(mi),
            fmt(agg),
        ])?;
    }
    write_atomic(&out.join("table.csv"), &table.into_inner()?)?;
    Ok(())
}

/// Mean accuracy over every successful run of a cell.
fn aggregate(result: &EvalResult, id: &str) -> Option<f64> {
    let acc: Vec<f64> = result.rows.iter().filter(|r| r.config_id == id).filter_map(|r| r.accuracy).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

fn write_tables(out: &Path, result: &EvalResult) -> anyhow::Result<()> {
    write_atomic(&out.join("results.csv"), &result.rows_csv()?)?;
    write_atomic(&out.join("aggregates.csv"), &result.aggregates_csv()?)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<ExitCode> {
    if !args.runs.is_dir() {
        eprintln!("error: {} is not a directory", args.runs.display());
        return Ok(ExitCode::from(EXIT_NO_RUNS));
    }
    let (result, warnings) = evaluate_runs(&args.runs)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if result.rows.is_empty() {
        eprintln!("error: no runs could be evaluated under {}", args.runs.display());
        return Ok(ExitCode::from(EXIT_NO_RUNS));
    }
    let out = args.out.clone().unwrap_or_else(|| args.runs.clone());
    write_tables(&out, &result)?;
    println!("evaluated {} runs ({} skipped)", result.rows.len(), warnings.len());
    Ok(ExitCode::SUCCESS)
}

fn exit_for(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<IsacError>() {
        Some(IsacError::Config(_)) | Some(IsacError::Contract(_)) => ExitCode::from(EXIT_CONFIG),
        Some(IsacError::Numerical { .. }) => ExitCode::from(EXIT_NUMERICAL),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run_once(&a.config, a.seed, a.out.clone(), &a.overrides, None).map(|_| ExitCode::SUCCESS),
        Command::DumpAttn(a) => {
            let timesteps = (!a.timesteps.is_empty()).then(|| a.timesteps.clone());
            run_once(&a.config, a.seed, a.out.clone(), &a.overrides, timesteps).map(|_| ExitCode::SUCCESS)
        }
        Command::Ablate(a) => cmd_ablate(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_for(&e)
        }
    }
}
