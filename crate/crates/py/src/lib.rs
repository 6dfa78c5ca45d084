//! Python bindings.
//!
//! Arrays cross the boundary as nested lists: series are `[T][D]`, windows
//! are `[B][L][D]`. Training and evaluation take the same JSON documents as
//! the command line.

use inflow::autodiff::{Tape, Tensor};
use inflow::baselines::RevInTransform;
use inflow::config::RunConfig;
use inflow::data::{generate_synthetic as generate, Preset, SyntheticConfig};
use inflow::experiment::{ablate as run_ablation, prepare, train_one};
use inflow::flow::{FlowConfig, FlowStack, FlowVariant};
use inflow::nn::{Ctx, Group, Mode, ParamSet};
use inflow::pipeline::Variant;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Windows = Vec<Vec<Vec<f64>>>;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Pack `[B][L][D]` lists into a tensor, rejecting ragged input.
pub fn windows_to_tensor(x: &Windows) -> Result<Tensor, String> {
    let b = x.len();
    let l = x.first().map_or(0, |w| w.len());
    let d = x.first().and_then(|w| w.first()).map_or(0, |r| r.len());
    if b == 0 || l == 0 || d == 0 {
        return Err("windows must be a non-empty [B][L][D] list".into());
    }
    let mut data = Vec::with_capacity(b * l * d);
    for (i, w) in x.iter().enumerate() {
        if w.len() != l {
            return Err(format!("window {i} has {} steps, expected {l}", w.len()));
        }
        for (t, row) in w.iter().enumerate() {
            if row.len() != d {
                return Err(format!("window {i} step {t} has {} values, expected {d}", row.len()));
            }
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![b, l, d], data).map_err(|e| e.to_string())
}

pub fn tensor_to_windows(t: &Tensor) -> Windows {
    let [_, l, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    t.data()
        .chunks(l * d)
        .map(|w| w.chunks(d).map(<[f64]>::to_vec).collect())
        .collect()
}

fn parse_flow_variant(name: &str) -> PyResult<FlowVariant> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| py_err(format!("unknown flow variant `{name}`")))
}

/// Synthetic shifted series. Returns `(values, train_end, val_end)`.
#[pyfunction]
#[pyo3(signature = (preset = "synthetic-1", seed = 0, total_length = 10_000, num_series = 5))]
fn generate_synthetic(
    preset: &str,
    seed: u64,
    total_length: usize,
    num_series: usize,
) -> PyResult<(Vec<Vec<f64>>, usize, usize)> {
    let preset: Preset = preset.parse().map_err(py_err)?;
    let cfg = SyntheticConfig {
        total_length,
        num_series,
        ..SyntheticConfig::preset(preset, seed)
    };
    let ds = generate(&cfg).map_err(py_err)?;
    let rows = (0..ds.len()).map(|t| ds.row(t).to_vec()).collect();
    Ok((rows, ds.train_end, ds.val_end))
}

/// A normalizing flow over `variates` channels with freshly initialized
/// parameters.
#[pyclass]
struct Flow {
    params: ParamSet,
    stack: FlowStack,
}

#[pymethods]
impl Flow {
    #[new]
    #[pyo3(signature = (variates, variant = "pre_norm", blocks = 2, hidden = 128, seed = 0))]
    fn new(variates: usize, variant: &str, blocks: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let cfg = FlowConfig {
            variant: parse_flow_variant(variant)?,
            blocks,
            hidden,
            ..FlowConfig::default()
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack =
            FlowStack::new(&mut params, "phi.flow", Group::Phi, variates, &cfg, &mut rng).map_err(py_err)?;
        Ok(Self { params, stack })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.iter().filter(|(_, e)| e.trainable).map(|(_, e)| e.value.numel()).sum()
    }

    /// Map lookback windows into the normalized space.
    fn forward(&mut self, x: Windows) -> PyResult<Windows> {
        let x = windows_to_tensor(&x).map_err(py_err)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x);
        let out = self.stack.forward(&mut ctx, xv).map_err(py_err)?;
        self.stack.clear_caches();
        Ok(tensor_to_windows(ctx.tape.value(out)))
    }

    /// Map `y` back to the original space using the statistics of `x`.
    fn inverse(&mut self, x: Windows, y: Windows) -> PyResult<Windows> {
        let x = windows_to_tensor(&x).map_err(py_err)?;
        let y = windows_to_tensor(&y).map_err(py_err)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x);
        self.stack.forward(&mut ctx, xv).map_err(py_err)?;
        let yv = ctx.tape.constant(y);
        let out = self.stack.inverse(&mut ctx, yv);
        self.stack.clear_caches();
        Ok(tensor_to_windows(ctx.tape.value(out.map_err(py_err)?)))
    }
}

/// Reversible instance normalization with a learnable affine.
#[pyclass]
struct RevIn {
    params: ParamSet,
    revin: RevInTransform,
}

#[pymethods]
impl RevIn {
    #[new]
    #[pyo3(signature = (variates, affine = true, eps = 1e-5))]
    fn new(variates: usize, affine: bool, eps: f64) -> PyResult<Self> {
        if eps <= 0.0 {
            return Err(py_err("eps must be positive"));
        }
        let mut params = ParamSet::new();
        let revin = RevInTransform::new(&mut params, "phi.revin", Group::Phi, variates, affine, eps);
        Ok(Self { params, revin })
    }

    fn normalize(&mut self, x: Windows) -> PyResult<Windows> {
        let x = windows_to_tensor(&x).map_err(py_err)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x);
        let out = self.revin.normalize(&mut ctx, xv).map_err(py_err)?;
        Ok(tensor_to_windows(ctx.tape.value(out)))
    }

    /// Restore `y` to the scale of `x`.
    fn denormalize(&mut self, x: Windows, y: Windows) -> PyResult<Windows> {
        let x = windows_to_tensor(&x).map_err(py_err)?;
        let y = windows_to_tensor(&y).map_err(py_err)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x);
        self.revin.normalize(&mut ctx, xv).map_err(py_err)?;
        let yv = ctx.tape.constant(y);
        let out = self.revin.denormalize(&mut ctx, yv).map_err(py_err)?;
        Ok(tensor_to_windows(ctx.tape.value(out)))
    }
}

#[pyfunction]
fn mse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    inflow::eval::mse(&pred, &truth).map_err(py_err)
}

#[pyfunction]
fn mae(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    inflow::eval::mae(&pred, &truth).map_err(py_err)
}

/// Train one seed from a run configuration. Returns a JSON document with
/// the run report and test metrics in original units.
#[pyfunction]
#[pyo3(signature = (config_json, seed = 1))]
fn train(py: Python<'_>, config_json: &str, seed: u64) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    py.detach(|| {
        let prepared = prepare(&cfg)?;
        let out = train_one(&cfg, &prepared, seed)?;
        Ok::<_, inflow::Error>(serde_json::json!({ "report": out.report, "test": out.test }))
    })
    .map_err(py_err)
    .map(|v| v.to_string())
}

/// Train every listed variant on every configured seed. Returns the
/// ablation table as CSV.
#[pyfunction]
#[pyo3(signature = (config_json, variants, threads = 1))]
fn ablate(py: Python<'_>, config_json: &str, variants: Vec<String>, threads: usize) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let variants = variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    py.detach(|| {
        let prepared = prepare(&cfg)?;
        run_ablation(&cfg, &prepared, &variants, threads.max(1), false)
    })
    .map_err(py_err)
    .map(|t| t.to_csv())
}

#[pymodule]
fn inflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_class::<Flow>()?;
    m.add_class::<RevIn>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_lists_roundtrip_through_tensor() {
        let w: Windows = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]; 2];
        let t = windows_to_tensor(&w).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(t.at(&[1, 2, 0]), 5.0);
        assert_eq!(tensor_to_windows(&t), w);
    }

    #[test]
    fn ragged_and_empty_lists_are_rejected() {
        assert!(windows_to_tensor(&vec![]).is_err());
        let ragged: Windows = vec![vec![vec![1.0, 2.0]], vec![vec![1.0]]];
        assert!(windows_to_tensor(&ragged).unwrap_err().contains("window 1 step 0"));
    }
}
