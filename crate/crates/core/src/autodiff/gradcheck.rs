//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.probes += other.probes;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst);
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare reverse-mode gradients of `loss` against central differences.
///
/// `loss` builds a scalar from leaf handles for `inputs`, in order. At most
/// `max_probes_per_input` elements of each input are probed, chosen with `rng`.
pub fn check_gradients<F, R>(
    inputs: &[Tensor],
    loss: F,
    step: f64,
    max_probes_per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .ok_or_else(|| Error::Contract("missing gradient for input".into()))?
            .clone();
        let n = input.numel();
        let picks: Vec<usize> = if n <= max_probes_per_input {
            (0..n).collect()
        } else {
            sample(rng, n, max_probes_per_input).into_vec()
        };
        for e in picks {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            report.probes += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
