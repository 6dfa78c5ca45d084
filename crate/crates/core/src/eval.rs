//! Error metrics in original units, seed aggregation, and stage traces.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Batch, WindowPair, ZScoreStats};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim("metric", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metric over zero elements".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// How model-space values relate to the units metrics are reported in.
#[derive(Clone, Copy, Debug)]
pub enum Units<'a> {
    /// The model was trained on raw values.
    Raw,
    /// The model was trained on z-scored values; `None` is a caller bug.
    ZScored(Option<&'a ZScoreStats>),
}

impl Units<'_> {
    fn to_original(&self, t: Tensor) -> Result<Tensor> {
        match self {
            Units::Raw => Ok(t),
            Units::ZScored(Some(stats)) => stats.invert(&t),
            Units::ZScored(None) => Err(Error::Contract(
                "dataset was z-scored but no statistics were supplied".into(),
            )),
        }
    }
}

/// MSE and MAE over every (window, step, variate) element in original units.
pub fn evaluate(
    pipeline: &mut Pipeline,
    windows: &[&WindowPair],
    units: Units,
    batch_size: usize,
) -> Result<Metrics> {
    if let Units::ZScored(None) = units {
        units.to_original(Tensor::scalar(0.0))?;
    }
    if windows.is_empty() {
        return Err(Error::Contract("evaluate called with no windows".into()));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = Batch::from_windows(chunk)?;
        let pred = units.to_original(pipeline.predict(&batch.x, crate::nn::Mode::Eval)?)?;
        let truth = units.to_original(batch.y)?;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        n += pred.numel();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over the listed seeds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Raw per-seed metrics plus aggregates. `scale_factor` only affects
/// [`MetricReport::reported`]; stored values stay raw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mse: MeanStd,
    pub mae: MeanStd,
    pub scale_factor: Option<f64>,
}

impl MetricReport {
    pub fn from_seeds(variant: &str, per_seed: Vec<SeedMetrics>, scale_factor: Option<f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Contract("metric report needs at least one seed".into()));
        }
        let mses: Vec<f64> = per_seed.iter().map(|s| s.mse).collect();
        let maes: Vec<f64> = per_seed.iter().map(|s| s.mae).collect();
        Ok(Self {
            variant: variant.to_string(),
            mse: MeanStd::of(&mses),
            mae: MeanStd::of(&maes),
            per_seed,
            scale_factor,
        })
    }

    /// `(mse, mae)` means after the report scale factor.
    pub fn reported(&self) -> (MeanStd, MeanStd) {
        let s = self.scale_factor.unwrap_or(1.0);
        let scale = |m: MeanStd| MeanStd {
            mean: m.mean * s,
            std: m.std * s,
        };
        (scale(self.mse), scale(self.mae))
    }
}

/// The stages of one forecast. `x`, `y_hat` and `y` are in original units,
/// `x_tilde` and `y_tilde` in the transformed space. Each is `[steps, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub anchor: usize,
    pub variates: usize,
    pub x: Tensor,
    pub x_tilde: Tensor,
    pub y_tilde: Tensor,
    pub y_hat: Tensor,
    pub y: Tensor,
}

/// One time step of a trace. Lookback steps fill `x`/`x_tilde`, horizon steps
/// fill `y_tilde`/`y_hat`/`y`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow<'a> {
    pub step_index: usize,
    pub stages: Vec<(&'static str, &'a [f64])>,
}

impl TraceRecord {
    pub fn lookback(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn rows(&self) -> Vec<TraceRow<'_>> {
        let d = self.variates;
        let l = self.lookback();
        fn step<'a>(t: &'static str, v: &'a Tensor, i: usize, d: usize) -> (&'static str, &'a [f64]) {
            (t, &v.data()[i * d..(i + 1) * d])
        }
        (0..l)
            .map(|i| TraceRow {
                step_index: i,
                stages: vec![step("x", &self.x, i, d), step("x_tilde", &self.x_tilde, i, d)],
            })
            .chain((0..self.horizon()).map(|i| TraceRow {
                step_index: l + i,
                stages: vec![
                    step("y_tilde", &self.y_tilde, i, d),
                    step("y_hat", &self.y_hat, i, d),
                    step("y", &self.y, i, d),
                ],
            }))
            .collect()
    }

    /// Long format: `step_index,stage,variate,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step_index,stage,variate,value\n");
        for row in self.rows() {
            for (stage, values) in row.stages {
                for (v, value) in values.iter().enumerate() {
                    s.push_str(&format!("{},{stage},{v},{value}\n", row.step_index));
                }
            }
        }
        s
    }
}

pub fn dump_forecast_trace(pipeline: &mut Pipeline, window: &WindowPair, units: Units) -> Result<TraceRecord> {
    let d = window.x.shape()[1];
    let x = window.x.reshape(vec![1, window.x.shape()[0], d])?;
    let [x_tilde, y_tilde, y_hat] = pipeline.predict_stages(&x)?;
    let squeeze = |t: Tensor| {
        let s = t.shape().to_vec();
        t.reshape(vec![s[1], s[2]])
    };
    Ok(TraceRecord {
        anchor: window.anchor,
        variates: d,
        x: units.to_original(window.x.clone())?,
        x_tilde: squeeze(x_tilde)?,
        y_tilde: squeeze(y_tilde)?,
        y_hat: units.to_original(squeeze(y_hat)?)?,
        y: units.to_original(window.y.clone())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_forecast_on_constant() {
        let truth = vec![-3.0; 12];
        let zero = vec![0.0; 12];
        assert_eq!(mse(&zero, &truth).unwrap(), 9.0);
        assert_eq!(mae(&zero, &truth).unwrap(), 3.0);
        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);
        assert!(mse(&zero[..3], &truth).is_err());
    }

    #[test]
    fn single_seed_has_zero_std_and_scale_is_report_only() {
        let r = MetricReport::from_seeds(
            "none",
            vec![SeedMetrics {
                seed: 1,
                mse: 2.0,
                mae: 1.0,
            }],
            Some(0.1),
        )
        .unwrap();
        assert_eq!(r.mse.std, 0.0);
        assert_eq!(r.mse.mean, 2.0);
        assert!((r.reported().0.mean - 0.2).abs() < 1e-15);
    }

    #[test]
    fn population_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
