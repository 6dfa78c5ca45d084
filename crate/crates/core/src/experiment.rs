//! Dataset preparation, single runs, evaluation of saved runs, and sweeps.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DatasetConfig, RunConfig};
use crate::data::{
    generate_sinusoids, generate_synthetic, load_csv, make_windows, zscore_fit_apply, DatasetManifest,
    SeriesDataset, WindowOptions, WindowPair, WindowSet, ZScoreStats,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, dump_forecast_trace, MetricReport, Metrics, SeedMetrics, TraceRecord, Units};
use crate::pipeline::{Pipeline, Variant};
use crate::training::{split_loss, train, RunReport, TrainConfig};

pub fn load_dataset(cfg: &DatasetConfig) -> Result<SeriesDataset> {
    match cfg {
        DatasetConfig::Synthetic(s) => generate_synthetic(s),
        DatasetConfig::Sinusoid(s) => generate_sinusoids(s),
        DatasetConfig::Csv { path, split, .. } => load_csv(path, &cfg.column_spec(), *split),
    }
}

/// Model-ready data shared by every run of one configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Values in model units (z-scored when enabled).
    pub dataset: SeriesDataset,
    pub manifest: DatasetManifest,
    pub stats: Option<ZScoreStats>,
    pub windows: WindowSet,
}

impl Prepared {
    pub fn units(&self) -> Units<'_> {
        match &self.stats {
            Some(s) => Units::ZScored(Some(s)),
            None => Units::Raw,
        }
    }
}

/// Every variant sees the same windows: the training region is always cut
/// into inner and outer parts, and θ only ever trains on the inner part.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let raw = load_dataset(&cfg.dataset)?;
    let manifest = DatasetManifest::describe(&raw);
    let (dataset, stats) = if cfg.zscore {
        let (d, s) = zscore_fit_apply(&raw)?;
        (d, Some(s))
    } else {
        (raw, None)
    };
    let windows = make_windows(
        &dataset,
        &WindowOptions {
            lookback: cfg.model.lookback,
            horizon: cfg.model.horizon,
            stride: cfg.stride,
            use_bilevel: true,
        },
    )?;
    Ok(Prepared {
        dataset,
        manifest,
        stats,
        windows,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub pipeline: Pipeline,
    pub report: RunReport,
    pub test: Metrics,
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

pub fn train_one(cfg: &RunConfig, prepared: &Prepared, seed: u64) -> Result<RunOutcome> {
    let mut pipeline = Pipeline::new(&cfg.model, prepared.dataset.variates(), seed)?;
    let (mut report, _) = train(&mut pipeline, &prepared.windows, &train_config(cfg, seed))?;
    report.config_hash = cfg.content_hash(seed)?;
    let test: Vec<&WindowPair> = prepared.windows.test.iter().collect();
    let test = evaluate(&mut pipeline, &test, prepared.units(), cfg.eval.batch_size)?;
    Ok(RunOutcome {
        pipeline,
        report,
        test,
    })
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(variant.name()).join(format!("seed-{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub anchor_hash: String,
    pub dataset: DatasetManifest,
    pub zscore: Option<ZScoreStats>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Write checkpoint, report, loss curve, config copy, manifest and test metrics.
pub fn write_run(dir: &Path, cfg: &RunConfig, prepared: &Prepared, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = outcome.report.seed;
    checkpoint::save(&outcome.pipeline.params, dir.join("checkpoint.bin"))?;
    write(&dir.join("report.json"), json(&outcome.report)?)?;
    write(&dir.join("loss.csv"), outcome.report.loss_csv())?;
    let mut single = cfg.clone();
    single.seeds = vec![seed];
    single.train.seed = seed;
    write(&dir.join("config.json"), json(&single)?)?;
    write(
        &dir.join("manifest.json"),
        json(&RunManifest {
            variant: outcome.report.variant.clone(),
            seed,
            config_hash: outcome.report.config_hash.clone(),
            anchor_hash: outcome.report.anchor_hash.clone(),
            dataset: prepared.manifest.clone(),
            zscore: prepared.stats.clone(),
        })?,
    )?;
    write(
        &dir.join("metrics.json"),
        json(&SeedMetrics {
            seed,
            mse: outcome.test.mse,
            mae: outcome.test.mae,
        })?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub test: Metrics,
    /// Validation-region loss in model units, comparable to the run report.
    pub val_loss: f64,
}

/// Rebuild the configured pipeline and load its parameters from `path`.
pub fn load_pipeline(cfg: &RunConfig, prepared: &Prepared, seed: u64, path: &Path) -> Result<Pipeline> {
    let mut pipeline = Pipeline::new(&cfg.model, prepared.dataset.variates(), seed)?;
    checkpoint::load(&mut pipeline.params, path)?;
    Ok(pipeline)
}

pub fn eval_pipeline(cfg: &RunConfig, prepared: &Prepared, pipeline: &mut Pipeline, seed: u64) -> Result<SeedEval> {
    let test: Vec<&WindowPair> = prepared.windows.test.iter().collect();
    let val: Vec<&WindowPair> = prepared.windows.validation.iter().collect();
    Ok(SeedEval {
        seed,
        test: evaluate(pipeline, &test, prepared.units(), cfg.eval.batch_size)?,
        val_loss: split_loss(pipeline, &val, cfg.train.batch_size)?,
    })
}

pub fn traces(cfg: &RunConfig, prepared: &Prepared, pipeline: &mut Pipeline) -> Result<Vec<TraceRecord>> {
    cfg.eval
        .trace_windows
        .iter()
        .map(|&i| {
            let w = prepared.windows.test.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "trace window {i} out of range; the test split has {} windows",
                    prepared.windows.test.len()
                ))
            })?;
            dump_forecast_trace(pipeline, w, prepared.units())
        })
        .collect()
}

/// One variant's row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Option<MetricReport>,
    /// One entry per seed that failed.
    pub failures: Vec<String>,
    pub anchor_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mse_mean,mse_std,mae_mean,mae_std,seeds_ok,status\n");
        for r in &self.rows {
            match &r.metrics {
                Some(m) => {
                    let (mse, mae) = m.reported();
                    let status = if r.failures.is_empty() { "ok" } else { "partial" };
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{status}\n",
                        r.variant,
                        mse.mean,
                        mse.std,
                        mae.mean,
                        mae.std,
                        m.per_seed.len()
                    ));
                }
                None => s.push_str(&format!("{},,,,,0,failed\n", r.variant)),
            }
        }
        s
    }
}

/// Train and test every variant of `variants` under every seed, spread over
/// `threads` workers. Failed runs are recorded and the sweep continues.
/// When `write_runs` is set each run also gets its own run directory.
pub fn ablate(
    cfg: &RunConfig,
    prepared: &Prepared,
    variants: &[Variant],
    threads: usize,
    write_runs: bool,
) -> Result<AblationTable> {
    cfg.validate()?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<(Metrics, String)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(variant, seed)) = jobs.get(i) else { break };
        let mut run_cfg = cfg.clone();
        run_cfg.model.variant = variant;
        run_cfg.train.mode = None;
        let res = train_one(&run_cfg, prepared, seed).and_then(|o| {
            if write_runs {
                write_run(&run_dir(&cfg.out_dir, variant, seed), &run_cfg, prepared, &o)?;
            }
            log::info!("{variant} seed {seed}: test mse {:.6}", o.test.mse);
            Ok((o.test, o.report.anchor_hash))
        });
        if let Err(e) = &res {
            log::error!("{variant} seed {seed} failed: {e}");
        }
        results.lock().expect("results lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(worker);
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut rows = Vec::new();
    for &variant in variants {
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        let mut anchor_hashes = Vec::new();
        for (i, &(v, seed)) in jobs.iter().enumerate() {
            if v != variant {
                continue;
            }
            match &results[i] {
                Some(Ok((m, hash))) => {
                    per_seed.push(SeedMetrics {
                        seed,
                        mse: m.mse,
                        mae: m.mae,
                    });
                    anchor_hashes.push(hash.clone());
                }
                Some(Err(e)) => failures.push(format!("seed {seed}: {e}")),
                None => failures.push(format!("seed {seed}: not run")),
            }
        }
        let metrics = if per_seed.is_empty() {
            None
        } else {
            Some(MetricReport::from_seeds(variant.name(), per_seed, cfg.eval.scale_factor)?)
        };
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            metrics,
            failures,
            anchor_hashes,
        });
    }
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        rows,
    })
}
