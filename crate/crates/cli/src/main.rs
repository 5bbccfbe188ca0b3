//! Command-line front end: run optimization stages, evaluate single
//! instructions, and export learning curves.
//!
//! Exit codes: 0 success; 1 usage, configuration, or data errors;
//! 2 backend failures (network, budget, malformed completions).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use promptshift::backend::{build_backend, BackendConfig};
use promptshift::dataset::{load_dataset, DatasetFormat, Role, TaskSet};
use promptshift::evaluator::{evaluate_prompt, EvalResult};
use promptshift::exec::Runner;
use promptshift::hash::{stable_hash, text_id};
use promptshift::metaprompt::validate_text;
use promptshift::metrics::MetricVector;
use promptshift::optimizer::{run_stage, OptimizerConfig, StageOutcome};
use promptshift::store::{CurveFormat, RunStore};
use promptshift::{Error, Result};

#[derive(Parser)]
#[command(
    name = "promptshift",
    version,
    about = "Two-stage instruction optimization over multiple-choice tasks"
)]
struct Cli {
    /// Path to the JSON run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the optimizer's rng_seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Emit machine-readable JSON instead of human-readable tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one optimization stage and persist it in the run store.
    Optimize {
        /// Which stage of the configuration to run.
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Completed source run whose pool seeds a target stage.
        #[arg(long)]
        seed_run: Option<String>,
        /// Explicit run id (default: timestamp plus a random suffix).
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score one instruction on one dataset and print its metrics.
    Evaluate {
        /// The instruction text itself.
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        /// File containing the instruction text.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Dataset to score on (JSONL file).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export a run's learning curve to CSV or JSON.
    Report {
        /// The run to export.
        run_id: String,
        /// Output format: csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output path (default: a curve file inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// On-disk run configuration. Relative paths inside the file resolve
/// against the file's own directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    /// Directory holding all recorded runs.
    store_root: PathBuf,
    /// Backend that proposes candidate instructions.
    reference_backend: BackendConfig,
    /// Backend that answers the task items.
    scorer_backend: BackendConfig,
    /// Source-stage task set.
    #[serde(default)]
    source: Option<TaskSetConfig>,
    /// Target-stage task set.
    #[serde(default)]
    target: Option<TaskSetConfig>,
    /// Optimization knobs; every field is optional.
    #[serde(default)]
    optimizer: OptimizerConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSetConfig {
    description: String,
    datasets: Vec<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            std::process::exit(if err.is_backend_failure() { 2 } else { 1 });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli.config.clone().ok_or_else(|| {
        Error::Config("--config <file> is required for this command".into())
    })?;
    let raw = std::fs::read_to_string(&config_path)
        .map_err(|e| Error::io(config_path.clone(), e))?;
    let file: RunConfigFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    let base_dir = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut optimizer = file.optimizer.clone();
    if let Some(seed) = cli.seed {
        optimizer.rng_seed = seed;
    }
    let store = RunStore::new(resolve(&base_dir, &file.store_root))?;
    let json = cli.json;

    match cli.command {
        Cmd::Optimize { stage, seed_run, run_id } => {
            cmd_optimize(json, &file, optimizer, &store, &base_dir, stage, seed_run, run_id)
        }
        Cmd::Evaluate { prompt, prompt_file, dataset } => {
            cmd_evaluate(json, &file, &optimizer, &base_dir, prompt, prompt_file, &dataset)
        }
        Cmd::Report { run_id, format, out } => {
            cmd_report(json, &store, &run_id, &format, out.as_deref())
        }
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn load_task_set(base: &Path, tsc: &TaskSetConfig, role: Role) -> Result<TaskSet> {
    let datasets = tsc
        .datasets
        .iter()
        .map(|p| load_dataset(&resolve(base, p), DatasetFormat::Jsonl))
        .collect::<Result<Vec<_>>>()?;
    TaskSet::new(role, tsc.description.clone(), datasets)
}

#[allow(clippy::too_many_arguments)]
fn cmd_optimize(
    json: bool,
    file: &RunConfigFile,
    optimizer: OptimizerConfig,
    store: &RunStore,
    base_dir: &Path,
    stage: StageArg,
    seed_run: Option<String>,
    run_id: Option<String>,
) -> Result<()> {
    let reference = build_backend(&file.reference_backend)?;
    let scorer = build_backend(&file.scorer_backend)?;

    let (task_set, seed_pool) = match stage {
        StageArg::Source => {
            if seed_run.is_some() {
                return Err(Error::Config(
                    "--seed-run only applies to the target stage".into(),
                ));
            }
            let tsc = file.source.as_ref().ok_or_else(|| {
                Error::Config("the configuration has no `source` task set".into())
            })?;
            (load_task_set(base_dir, tsc, Role::Source)?, None)
        }
        StageArg::Target => {
            let run = seed_run.ok_or_else(|| {
                Error::Config(
                    "the target stage requires --seed-run <run_id> naming a completed source run"
                        .into(),
                )
            })?;
            let tsc = file.target.as_ref().ok_or_else(|| {
                Error::Config("the configuration has no `target` task set".into())
            })?;
            let pool = store.load_source_pool(&run)?;
            (load_task_set(base_dir, tsc, Role::Target)?, Some(pool))
        }
    };

    let outcome = run_stage(
        &optimizer,
        &task_set,
        reference.as_ref(),
        scorer.as_ref(),
        store,
        seed_pool.as_deref(),
        run_id,
    )?;

    if json {
        println!("{}", serde_json::to_string_pretty(&outcome).map_err(json_err)?);
    } else {
        print_outcome(&outcome);
    }
    Ok(())
}

fn cmd_evaluate(
    json: bool,
    file: &RunConfigFile,
    optimizer: &OptimizerConfig,
    base_dir: &Path,
    prompt: Option<String>,
    prompt_file: Option<PathBuf>,
    dataset_path: &Path,
) -> Result<()> {
    let instruction = match (prompt, prompt_file) {
        (Some(text), None) => text,
        (None, Some(path)) => {
            let path = resolve(base_dir, &path);
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))?
        }
        (None, None) => {
            return Err(Error::Config(
                "provide the instruction via --prompt or --prompt-file".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap forbids both"),
    };
    let instruction = validate_text(&instruction)?;

    let dataset = load_dataset(&resolve(base_dir, dataset_path), DatasetFormat::Jsonl)?;
    let scorer = build_backend(&file.scorer_backend)?;
    scorer.bind_items(&dataset.items);

    // Derive exemplars and the evaluation seed exactly as an optimization
    // run would, so numbers here reproduce in-run evaluations.
    let n = optimizer.exemplar_count.min(dataset.len());
    let exemplar_seed = stable_hash(&[
        "scorer-exemplars",
        &optimizer.rng_seed.to_string(),
        &dataset.name,
    ]);
    let exemplars = promptshift::dataset::sample_exemplars(&dataset, n, exemplar_seed)?;
    let eval_seed = stable_hash(&[
        "eval",
        &optimizer.rng_seed.to_string(),
        &dataset.name,
        &text_id(&instruction),
    ]);
    let runner = Runner::new(optimizer.workers)?;

    let result = evaluate_prompt(
        &instruction,
        &dataset,
        scorer.as_ref(),
        optimizer.confidence_mode,
        &exemplars,
        eval_seed,
        &runner,
    )?;

    if json {
        println!("{}", serde_json::to_string_pretty(&result).map_err(json_err)?);
    } else {
        print_eval(&result);
    }
    Ok(())
}

fn cmd_report(
    json: bool,
    store: &RunStore,
    run_id: &str,
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    let format: CurveFormat = format.parse()?;
    let path = store.export_curve(run_id, format, out)?;
    if json {
        println!(
            "{}",
            serde_json::json!({ "run_id": run_id, "path": path })
        );
    } else {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(format!("failed to serialize output: {e}"))
}

/// Fixed-width metrics table; arrows mark the favorable direction.
fn metrics_table(m: &MetricVector) -> String {
    let header = format!(
        "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "IFR ↑", "ACC ↑", "ECE ↓", "ROC ↑", "PR-P ↑", "PR-N ↓"
    );
    let values = format!(
        "{:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
        m.ifr, m.acc, m.ece, m.auroc, m.pr_p, m.pr_n
    );
    format!("{header}\n{values}")
}

fn print_eval(result: &EvalResult) {
    println!("dataset:    {}", result.dataset_name);
    println!("mode:       {}", result.confidence_mode);
    println!("items:      {}", result.metrics.n_total);
    println!();
    println!("{}", metrics_table(&result.metrics));
    println!();
    println!("composite:  {:.4}", result.composite.value);
}

fn print_outcome(outcome: &StageOutcome) {
    println!("run id:      {}", outcome.run_id);
    println!("steps:       {}", outcome.steps);
    println!("termination: {:?}", outcome.termination);
    println!("pool size:   {}", outcome.pool.len());
    println!();
    println!("best instruction:");
    println!("  {}", outcome.best.text);
    println!();
    println!("{}", metrics_table(&outcome.best.metric_vector));
    println!();
    println!("composite:  {:.4}", outcome.best.composite);
}
