use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sparse_routing::analysis::{RoutingDistribution, SimilarityMatrix};
use sparse_routing::balance::load_stats_csv;
use sparse_routing::config::RunConfig;
use sparse_routing::estimators::{EstimatorKind, InferenceMode};
use sparse_routing::gradcheck::{self, Level};
use sparse_routing::model::{load_checkpoint, save_checkpoint, Checkpoint};
use sparse_routing::rng::SplitRng;
use sparse_routing::trainer::{self, Dataset};
use sparse_routing::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Stream used for the end-of-run load statistics.
const LOAD_STREAM: u64 = 0x10ad;

#[derive(Parser)]
#[command(name = "sparse-routing", version, about = "Sparse-gradient MoE routing lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy MoE model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task loss of a checkpoint on its training task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the mode stored in the checkpoint.
        #[arg(long, value_enum)]
        inference_mode: Option<ModeArg>,
        /// Repetitions for sampled inference.
        #[arg(long, default_value_t = 10)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routing distributions per dataset and their cosine similarities.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `LABEL=c1,c2,...`: the task's samples from the listed clusters.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference and oracle checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Det,
    Sampled,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Unsupported(_) | Error::Checkpoint(_) | Error::Json(_) => EXIT_CONFIG,
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: format!("{}: {e}", path.display()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, &out),
        Command::Eval {
            checkpoint,
            inference_mode,
            n_samples,
            seed,
            out,
        } => eval(&checkpoint, inference_mode, n_samples, seed, out.as_deref()),
        Command::Analyze {
            checkpoint,
            datasets,
            seed,
            out,
        } => analyze(&checkpoint, &datasets, seed, &out),
        Command::Gradcheck { level } => gradcheck(level),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let cfg = cfg.resolve();
    let data = trainer::make_task(&cfg.task)?;
    let outcome = trainer::train_on(&cfg.model_spec(), &data, &cfg.train)?;
    let load = trainer::routing_load(
        &outcome.spec,
        &outcome.params,
        &data,
        &SplitRng::new(cfg.train.seed).fork(LOAD_STREAM),
    )?;

    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    write(&out.join("config.json"), cfg.to_json())?;
    write(&out.join("metrics.jsonl"), outcome.metrics_jsonl()?)?;
    write(&out.join("summary.csv"), outcome.summary_csv())?;
    write(&out.join("load_stats.csv"), load_stats_csv(&load))?;
    save_checkpoint(
        &out.join("checkpoint.bin"),
        &outcome.spec,
        &outcome.params,
        cfg.train.seed,
        Some(&cfg.task),
    )?;

    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "trained {} steps: task loss {:.6} -> {:.6} (smoothed), balance {:.6}",
        cfg.train.steps, outcome.losses[0], last.smoothed_loss, last.balance_loss
    );
    Ok(())
}

fn checkpoint_data(ck: &Checkpoint) -> Result<Dataset, Failure> {
    let task = ck.header.task.as_ref().ok_or_else(|| Failure {
        code: EXIT_CONFIG,
        message: "checkpoint records no task".into(),
    })?;
    if task.d_model != ck.header.model.d_model || task.d_out != ck.header.model.d_out {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: format!(
                "task dimensions {}→{} do not match the model's {}→{}",
                task.d_model, task.d_out, ck.header.model.d_model, ck.header.model.d_out
            ),
        });
    }
    Ok(trainer::make_task(task)?)
}

#[derive(Serialize)]
struct EvalOutput {
    inference_mode: InferenceMode,
    n_samples: usize,
    loss_mean: f64,
    loss_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn eval(
    path: &Path,
    mode: Option<ModeArg>,
    n_samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let ck = load_checkpoint(path)?;
    let data = checkpoint_data(&ck)?;
    let mut spec = ck.header.model.clone();
    let mode = match mode {
        Some(ModeArg::Det) => InferenceMode::Deterministic,
        Some(ModeArg::Sampled) => InferenceMode::Sampled,
        None => spec.blocks[0].estimator.inference_mode,
    };
    if mode == InferenceMode::Sampled && spec.blocks.iter().any(|b| b.estimator.kind == EstimatorKind::GShard) {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: "--inference-mode sampled does not apply to gshard: its TopK routing is deterministic".into(),
        });
    }
    for b in &mut spec.blocks {
        b.estimator.inference_mode = mode;
    }
    let runs = match mode {
        InferenceMode::Deterministic => 1,
        InferenceMode::Sampled => n_samples.max(1),
    };
    let root = SplitRng::new(seed);
    let reports = (0..runs)
        .map(|i| trainer::evaluate(&spec, &ck.params, &data, &root.fork(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let (loss_mean, loss_std) = mean_std(&reports.iter().map(|r| r.loss).collect::<Vec<_>>());
    let acc: Option<Vec<f64>> = reports.iter().map(|r| r.accuracy).collect();
    let acc = acc.map(|a| mean_std(&a));
    let report = EvalOutput {
        inference_mode: mode,
        n_samples: runs,
        loss_mean,
        loss_std,
        accuracy_mean: acc.map(|a| a.0),
        accuracy_std: acc.map(|a| a.1),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    print!("{json}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        write(&dir.join("eval.json"), json)?;
    }
    Ok(())
}

fn parse_dataset(arg: &str) -> Result<(String, Vec<usize>), Failure> {
    let bad = || Failure {
        code: EXIT_CONFIG,
        message: format!("dataset must look like LABEL=0,1,2, got {arg:?}"),
    };
    let (label, list) = arg.split_once('=').ok_or_else(bad)?;
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(bad());
    }
    let clusters = list
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    Ok((label.to_string(), clusters))
}

fn analyze(path: &Path, datasets: &[String], seed: u64, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(path)?;
    let data = checkpoint_data(&ck)?;
    let n_clusters = data.means.len();
    let mut parsed = datasets.iter().map(|d| parse_dataset(d)).collect::<Result<Vec<_>, _>>()?;
    parsed.sort_by(|a, b| a.0.cmp(&b.0));
    if parsed.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: "dataset labels must be distinct".into(),
        });
    }
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let root = SplitRng::new(seed);
    let mut labels = Vec::new();
    let mut dists = Vec::new();
    for (label, clusters) in parsed {
        if let Some(&c) = clusters.iter().find(|&&c| c >= n_clusters) {
            return Err(Failure {
                code: EXIT_CONFIG,
                message: format!("dataset {label}: cluster {c} does not exist (task has {n_clusters})"),
            });
        }
        let subset = data.restrict(&clusters);
        let report = trainer::evaluate(&ck.header.model, &ck.params, &subset, &root)?;
        let dist = RoutingDistribution::from_counts(
            report.stats.iter().map(|s| s.counts.clone()).collect(),
            subset.len(),
        )?;
        write(&out.join(format!("routing_{label}.csv")), dist.to_csv())?;
        labels.push(label);
        dists.push(dist);
    }
    let sim = SimilarityMatrix::new(labels, &dists)?;
    write(&out.join("similarity.csv"), sim.to_csv())?;
    print!("{}", sim.to_csv());
    Ok(())
}

fn gradcheck(level: LevelArg) -> Result<(), Failure> {
    let level = match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let report = gradcheck::run_checks(&gradcheck::standard_checks(), level);
    print!("{}", report.table());
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_FAILURE,
            message: format!("failed checks: {}", report.failures().join(", ")),
        })
    }
}
