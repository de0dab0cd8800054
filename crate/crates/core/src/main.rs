use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlpnn::diff::ParamSet;
use dlpnn::harness::{self, Experiment, RunConfig};
use dlpnn::Result;

#[derive(Parser)]
#[command(name = "dlpnn", version, about = "Link prediction for newly arriving nodes in temporal graphs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Event CSV; relative paths resolve against $DLPNN_DATA_DIR when set.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic graph as CSV.
    Synth,
    /// Meta-train, then evaluate the best checkpoint on the test split.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Defaults to `<out>/checkpoint_best.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full model and the three ablations under one seed.
    Ablate,
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        /// One of n, span_size, batch, d, k, inner_steps.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Run sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of the outer gradient on a toy graph.
    Gradcheck,
}

fn config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(data) = &g.data {
        cfg.data = Some(data.clone());
    }
    for o in &g.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| dlpnn::Error::Config(e.to_string()))?;
    }
    let cfg = config(g)?;
    let out = g.out.as_path();
    match &cli.command {
        Command::Synth => {
            let summary = harness::synth(&cfg, out)?;
            println!("{}", json(&summary));
        }
        Command::Train => {
            let exp = Experiment::new(cfg)?;
            let trained = harness::train(&exp, Some(out))?;
            for r in &trained.records {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train_auc {:.4}  val_auc {}",
                    r.stats.epoch,
                    r.stats.mean_query_loss,
                    r.stats.train_auc,
                    r.val_auc.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            let result = harness::eval(&exp, &trained.best, Some(out))?;
            println!("{}", json(&result.report));
        }
        Command::Eval { checkpoint } => {
            let exp = Experiment::new(cfg)?;
            let path = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint_best.bin"));
            let params = ParamSet::load(&path)?;
            let result = harness::eval(&exp, &params, Some(out))?;
            println!("{}", json(&result.report));
        }
        Command::Ablate => {
            let rows = harness::ablate(&cfg, Some(out))?;
            println!("{}", json(&rows));
        }
        Command::Sweep { axis, values, parallel } => {
            let points = harness::sweep(&cfg, axis, values, *parallel, Some(out))?;
            println!("{}", json(&points));
        }
        Command::Gradcheck => {
            let report = harness::gradcheck(&cfg, Some(out))?;
            println!("{}", json(&report));
            if !report.pass {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
