//! Comparison transforms: the identity and reversible instance normalization.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{denormalize, normalize, NormCache};
use crate::nn::{Ctx, Group, ParamId, ParamSet};

/// Single instance normalization whose inverse restores the lookback
/// statistics on the forecast.
#[derive(Clone, Debug)]
pub struct RevInTransform {
    pub variates: usize,
    pub eps: f64,
    /// `(log_scale, shift)` when the learnable affine is enabled.
    pub affine: Option<(ParamId, ParamId)>,
    cache: Option<NormCache>,
}

impl RevInTransform {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        variates: usize,
        affine: bool,
        eps: f64,
    ) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        let affine = affine.then(|| {
            (
                params.add(format!("{name}.log_scale"), group, Tensor::zeros(vec![variates])),
                params.add(format!("{name}.shift"), group, Tensor::zeros(vec![variates])),
            )
        });
        Self {
            variates,
            eps,
            affine,
            cache: None,
        }
    }

    fn affine_vars(&self, ctx: &Ctx) -> Option<(Var, Var)> {
        self.affine.map(|(g, b)| (ctx.param(g), ctx.param(b)))
    }

    fn check_input(&self, ctx: &Ctx, x: Var, op: &'static str) -> Result<usize> {
        let s = ctx.tape.shape(x);
        if s.len() != 3 || s[2] != self.variates {
            return Err(Error::dim(op, s, &[self.variates]));
        }
        Ok(s[0])
    }

    pub fn normalize(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let batch = self.check_input(ctx, x, "revin_normalize")?;
        let mean = ctx.tape.mean_axis(x, 1)?;
        let var = ctx.tape.var_axis(x, 1)?;
        self.cache = Some(NormCache {
            mean,
            var,
            batch: Some(batch),
        });
        let affine = self.affine_vars(ctx);
        normalize(ctx, x, mean, var, affine, self.eps)
    }

    pub fn denormalize(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        let batch = self.check_input(ctx, y, "revin_denormalize")?;
        let cache = self
            .cache
            .ok_or_else(|| Error::Contract("denormalize called before normalize".into()))?;
        if cache.mean.tape_id() != ctx.tape.id() {
            return Err(Error::Contract("normalization cache belongs to a different pass".into()));
        }
        if cache.batch != Some(batch) {
            return Err(Error::Contract(format!(
                "denormalize batch size {batch} does not match cached batch size {:?}",
                cache.batch
            )));
        }
        let affine = self.affine_vars(ctx);
        denormalize(ctx, y, cache.mean, cache.var, affine, self.eps)
    }

    pub fn cache(&self) -> Option<&NormCache> {
        self.cache.as_ref()
    }
}

/// Plain-backbone arm: both directions return the input handle unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTransform;

impl IdentityTransform {
    pub fn forward(&self, x: Var) -> Var {
        x
    }

    pub fn inverse(&self, y: Var) -> Var {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;

    #[test]
    fn normalize_hand_example_without_affine() {
        let mut params = ParamSet::new();
        let mut revin = RevInTransform::new(&mut params, "r", Group::Phi, 1, false, 1e-5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Train);
        let x = ctx
            .tape
            .constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = revin.normalize(&mut ctx, x).unwrap();
        for (g, w) in ctx
            .tape
            .value(y)
            .data()
            .iter()
            .zip([-1.3416, -0.4472, 0.4472, 1.3416])
        {
            assert!((g - w).abs() < 1e-4);
        }
        let back = revin.denormalize(&mut ctx, y).unwrap();
        assert!(ctx.tape.value(back).max_abs_diff(ctx.tape.value(x)).unwrap() < 1e-12);
    }

    #[test]
    fn constant_window_normalizes_to_zero() {
        let mut params = ParamSet::new();
        let mut revin = RevInTransform::new(&mut params, "r", Group::Phi, 2, true, 1e-5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Train);
        let x = ctx.tape.constant(Tensor::full(vec![1, 5, 2], -7.0));
        let y = revin.normalize(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denormalize_zero_and_one() {
        let mut params = ParamSet::new();
        let mut revin = RevInTransform::new(&mut params, "r", Group::Phi, 1, true, 1e-5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Train);
        let x = ctx
            .tape
            .constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        revin.normalize(&mut ctx, x).unwrap();
        let z = ctx.tape.constant(Tensor::zeros(vec![1, 3, 1]));
        let back = revin.denormalize(&mut ctx, z).unwrap();
        assert!(ctx.tape.value(back).data().iter().all(|&v| v == 2.5));
        let o = ctx.tape.constant(Tensor::ones(vec![1, 3, 1]));
        let back = revin.denormalize(&mut ctx, o).unwrap();
        let want = 2.5 + (1.25f64 + 1e-5).sqrt();
        assert!(ctx.tape.value(back).data().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn denormalize_before_normalize_fails() {
        let mut params = ParamSet::new();
        let revin = RevInTransform::new(&mut params, "r", Group::Phi, 1, true, 1e-5);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Train);
        let y = ctx.tape.constant(Tensor::zeros(vec![1, 3, 1]));
        assert!(matches!(revin.denormalize(&mut ctx, y), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_passes_through() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]).unwrap());
        let id = IdentityTransform;
        let y = id.inverse(id.forward(x));
        assert_eq!(y, x);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }
}
