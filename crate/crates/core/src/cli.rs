//! `inflow synth | train | eval | ablate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DatasetConfig, RunConfig};
use crate::data::{write_csv, DatasetManifest, Preset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, SeedMetrics};
use crate::experiment::{
    ablate, eval_pipeline, load_dataset, load_pipeline, prepare, run_dir, traces, train_one, write_run,
};
use crate::forecasters::ForecasterKind;
use crate::pipeline::Variant;

#[derive(Debug, Parser)]
#[command(name = "inflow", version, about = "Instance-normalization flows for shifted time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV plus a JSON manifest.
    Synth(CommonArgs),
    /// Train one variant for every seed.
    Train(CommonArgs),
    /// Evaluate saved checkpoints on the test split.
    Eval(CommonArgs),
    /// Train and test the whole variant roster under shared seeds.
    Ablate(CommonArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeatable; replaces the configured seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub backbone: Option<ForecasterKind>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also write stage traces for the configured test windows.
    #[arg(long)]
    pub trace: bool,
}

impl CommonArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(p) = self.preset {
            let seed = match &cfg.dataset {
                DatasetConfig::Synthetic(s) => s.seed,
                _ => 0,
            };
            cfg.dataset = DatasetConfig::Synthetic(SyntheticConfig::preset(p, seed));
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(b) = self.backbone {
            cfg.model.backbone.kind = b;
        }
        if let Some(l) = self.lookback {
            cfg.model.lookback = l;
        }
        if let Some(h) = self.horizon {
            cfg.model.horizon = h;
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Worker count for sweeps, from `INFLOW_THREADS`.
pub fn thread_budget() -> usize {
    std::env::var("INFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_dataset(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let csv = cfg.out_dir.join("series.csv");
    write_csv(&ds, &csv)?;
    let manifest = serde_json::to_string_pretty(&DatasetManifest::describe(&ds))? + "\n";
    write(&cfg.out_dir.join("manifest.json"), manifest)?;
    Ok(csv)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let prepared = prepare(cfg)?;
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = train_one(cfg, &prepared, seed)?;
        let dir = run_dir(&cfg.out_dir, cfg.model.variant, seed);
        write_run(&dir, cfg, &prepared, &outcome)?;
        log::info!(
            "{} seed {seed}: best val {:?} at epoch {:?}, test mse {:.6}",
            cfg.model.variant,
            outcome.report.best_val_loss,
            outcome.report.best_epoch,
            outcome.test.mse
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn cmd_eval(cfg: &RunConfig, trace: bool) -> Result<MetricReport> {
    let prepared = prepare(cfg)?;
    let mut per_seed = Vec::new();
    let mut evals = Vec::new();
    for &seed in &cfg.seeds {
        let dir = run_dir(&cfg.out_dir, cfg.model.variant, seed);
        let mut pipeline = load_pipeline(cfg, &prepared, seed, &dir.join("checkpoint.bin"))?;
        let e = eval_pipeline(cfg, &prepared, &mut pipeline, seed)?;
        if trace {
            for (i, t) in cfg.eval.trace_windows.iter().zip(traces(cfg, &prepared, &mut pipeline)?) {
                write(&dir.join(format!("trace-{i}.csv")), t.to_csv())?;
            }
        }
        per_seed.push(SeedMetrics {
            seed,
            mse: e.test.mse,
            mae: e.test.mae,
        });
        evals.push(e);
    }
    let report = MetricReport::from_seeds(cfg.model.variant.name(), per_seed, cfg.eval.scale_factor)?;
    let dir = cfg.out_dir.join(cfg.model.variant.name());
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write(&dir.join("eval.json"), serde_json::to_string_pretty(&evals)? + "\n")?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<crate::experiment::AblationTable> {
    let prepared = prepare(cfg)?;
    let table = ablate(cfg, &prepared, &Variant::ROSTER, thread_budget(), true)?;
    write(&cfg.out_dir.join("ablation.csv"), table.to_csv())?;
    write(&cfg.out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(table)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let path = cmd_synth(&args.resolve()?)?;
            println!("{}", path.display());
        }
        Command::Train(args) => {
            for dir in cmd_train(&args.resolve()?)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args.resolve()?, args.trace)?;
            let (mse, mae) = report.reported();
            println!(
                "{}: mse {:.6} ± {:.6}, mae {:.6} ± {:.6} over {} seed(s)",
                report.variant,
                mse.mean,
                mse.std,
                mae.mean,
                mae.std,
                report.per_seed.len()
            );
        }
        Command::Ablate(args) => {
            print!("{}", cmd_ablate(&args.resolve()?)?.to_csv());
        }
    }
    Ok(())
}
