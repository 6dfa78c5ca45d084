//! Backbones mapping a `[batch, L, D]` lookback to a `[batch, H, D]` horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Ctx, Dense, Group, Init, Mlp, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Linear,
    Mlp,
    NbeatsLite,
}

impl std::str::FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            "nbeats_lite" | "nbeats-lite" | "nbeats" => Ok(Self::NbeatsLite),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Architecture knobs that do not depend on the data shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: ForecasterKind,
    pub hidden_width: usize,
    /// Hidden layers for `mlp` (default 3), trunk layers per block for `nbeats_lite` (default 4).
    pub depth: Option<usize>,
    /// Blocks for `nbeats_lite`.
    pub blocks: usize,
    /// Treat each variate as an independent univariate sample with shared weights.
    pub per_variate: bool,
    /// Start output heads at zero.
    pub zero_init_heads: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: ForecasterKind::Mlp,
            hidden_width: 256,
            depth: None,
            blocks: 3,
            per_variate: true,
            zero_init_heads: false,
        }
    }
}

impl BackboneConfig {
    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(match self.kind {
            ForecasterKind::NbeatsLite => 4,
            _ => 3,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecasterConfig {
    pub backbone: BackboneConfig,
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.variates == 0 {
            return Err(Error::Config(
                "lookback, horizon and variates must be positive".into(),
            ));
        }
        if self.backbone.hidden_width == 0 || self.backbone.depth() == 0 || self.backbone.blocks == 0 {
            return Err(Error::Config("backbone widths and depths must be positive".into()));
        }
        Ok(())
    }
}

/// `[B, L, D]` to `[B*D, L]`: each variate becomes its own row.
fn variates_to_rows(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let p = ctx.tape.permute(x, &[0, 2, 1])?;
    ctx.tape.reshape(p, &[s[0] * s[2], s[1]])
}

/// `[B*D, H]` back to `[B, H, D]`.
fn rows_to_variates(ctx: &mut Ctx, y: Var, batch: usize, variates: usize) -> Result<Var> {
    let h = ctx.tape.shape(y)[1];
    let r = ctx.tape.reshape(y, &[batch, variates, h])?;
    ctx.tape.permute(r, &[0, 2, 1])
}

#[derive(Clone, Debug)]
pub struct LinearForecaster {
    /// One map shared by all variates, or one per variate.
    maps: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpForecaster {
    net: Mlp,
}

#[derive(Clone, Debug)]
pub struct NBeatsBlock {
    pub trunk: Mlp,
    pub backcast: Dense,
    pub forecast: Dense,
}

/// Generic doubly-residual stack: each block reads the running residual,
/// subtracts its backcast from it, and adds its forecast to the total.
#[derive(Clone, Debug)]
pub struct NBeatsLite {
    pub blocks: Vec<NBeatsBlock>,
}

#[derive(Clone, Debug)]
pub enum Forecaster {
    Linear(LinearForecaster),
    Mlp(MlpForecaster),
    NBeats(NBeatsLite),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ForecasterConfig,
    pub model: Forecaster,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        group: Group,
        config: ForecasterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let b = &config.backbone;
        let (l, h, d) = (config.lookback, config.horizon, config.variates);
        let head_init = if b.zero_init_heads { Init::Zeros } else { Init::FanIn };
        let (in_dim, out_dim) = if b.per_variate { (l, h) } else { (l * d, h * d) };
        let model = match b.kind {
            ForecasterKind::Linear => {
                let count = if b.per_variate { 1 } else { d };
                let maps = (0..count)
                    .map(|i| Dense::new(params, &format!("{prefix}.linear{i}"), group, l, h, head_init, rng))
                    .collect();
                Forecaster::Linear(LinearForecaster { maps })
            }
            ForecasterKind::Mlp => {
                let mut dims = vec![in_dim];
                dims.extend(std::iter::repeat_n(b.hidden_width, b.depth()));
                dims.push(out_dim);
                let net = Mlp::new(
                    params,
                    &format!("{prefix}.mlp"),
                    group,
                    &dims,
                    Activation::Relu,
                    b.zero_init_heads,
                    rng,
                );
                Forecaster::Mlp(MlpForecaster { net })
            }
            ForecasterKind::NbeatsLite => {
                let blocks = (0..b.blocks)
                    .map(|k| {
                        let name = format!("{prefix}.nbeats{k}");
                        let mut dims = vec![in_dim];
                        dims.extend(std::iter::repeat_n(b.hidden_width, b.depth()));
                        let trunk = Mlp::new(params, &format!("{name}.trunk"), group, &dims, Activation::Relu, false, rng);
                        let backcast = Dense::new(params, &format!("{name}.backcast"), group, b.hidden_width, in_dim, head_init, rng);
                        let forecast = Dense::new(params, &format!("{name}.forecast"), group, b.hidden_width, out_dim, head_init, rng);
                        NBeatsBlock {
                            trunk,
                            backcast,
                            forecast,
                        }
                    })
                    .collect();
                Forecaster::NBeats(NBeatsLite { blocks })
            }
        };
        Ok(Self { config, model })
    }

    fn check_input(&self, ctx: &Ctx, x: Var) -> Result<usize> {
        let s = ctx.tape.shape(x);
        let c = &self.config;
        if s.len() != 3 || s[1] != c.lookback || s[2] != c.variates {
            return Err(Error::dim("forecast", s, &[c.lookback, c.variates]));
        }
        Ok(s[0])
    }

    fn to_rows(&self, ctx: &mut Ctx, x: Var, batch: usize) -> Result<Var> {
        let c = &self.config;
        if c.backbone.per_variate {
            variates_to_rows(ctx, x)
        } else {
            ctx.tape.reshape(x, &[batch, c.lookback * c.variates])
        }
    }

    fn from_rows(&self, ctx: &mut Ctx, y: Var, batch: usize) -> Result<Var> {
        let c = &self.config;
        if c.backbone.per_variate {
            rows_to_variates(ctx, y, batch, c.variates)
        } else {
            ctx.tape.reshape(y, &[batch, c.horizon, c.variates])
        }
    }

    /// Map `[batch, L, D]` to `[batch, H, D]`.
    pub fn forecast(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forecast_with_residual(ctx, x)?.0)
    }

    /// Forecast plus, for N-BEATS, the residual left after the last block's
    /// backcast (in row layout). Other backbones return `None`.
    pub fn forecast_with_residual(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Option<Var>)> {
        let batch = self.check_input(ctx, x)?;
        let c = &self.config;
        match &self.model {
            Forecaster::Linear(lin) if !c.backbone.per_variate => {
                let rows = variates_to_rows(ctx, x)?;
                let grid = ctx.tape.reshape(rows, &[batch, c.variates, c.lookback])?;
                let mut parts = Vec::with_capacity(c.variates);
                for (d, map) in lin.maps.iter().enumerate() {
                    let xd = ctx.tape.slice(grid, 1, d, d + 1)?;
                    let xd = ctx.tape.reshape(xd, &[batch, c.lookback])?;
                    let yd = map.forward(ctx, xd)?;
                    parts.push(ctx.tape.reshape(yd, &[batch, 1, c.horizon])?);
                }
                let y = ctx.tape.concat(&parts, 1)?;
                Ok((ctx.tape.permute(y, &[0, 2, 1])?, None))
            }
            Forecaster::Linear(lin) => {
                let rows = self.to_rows(ctx, x, batch)?;
                let y = lin.maps[0].forward(ctx, rows)?;
                Ok((self.from_rows(ctx, y, batch)?, None))
            }
            Forecaster::Mlp(m) => {
                let rows = self.to_rows(ctx, x, batch)?;
                let y = m.net.forward(ctx, rows)?;
                Ok((self.from_rows(ctx, y, batch)?, None))
            }
            Forecaster::NBeats(nb) => {
                let mut residual = self.to_rows(ctx, x, batch)?;
                let mut total: Option<Var> = None;
                for block in &nb.blocks {
                    let h = block.trunk.forward(ctx, residual)?;
                    let h = ctx.tape.relu(h)?;
                    let back = block.backcast.forward(ctx, h)?;
                    let fore = block.forecast.forward(ctx, h)?;
                    residual = ctx.tape.sub(residual, back)?;
                    total = Some(match total {
                        Some(t) => ctx.tape.add(t, fore)?,
                        None => fore,
                    });
                }
                let total = total.expect("at least one block");
                Ok((self.from_rows(ctx, total, batch)?, Some(residual)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: ForecasterKind, l: usize, h: usize, d: usize) -> ForecasterConfig {
        ForecasterConfig {
            backbone: BackboneConfig {
                kind,
                hidden_width: 16,
                blocks: 2,
                ..BackboneConfig::default()
            },
            lookback: l,
            horizon: h,
            variates: d,
        }
    }

    fn run(params: &ParamSet, model: &Backbone, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let y = model.forecast(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn zero_linear_gives_zero_forecast() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = cfg(ForecasterKind::Linear, 4, 3, 2);
        c.backbone.zero_init_heads = true;
        let m = Backbone::new(&mut params, "f", Group::Theta, c, &mut rng).unwrap();
        let x = Tensor::uniform(vec![2, 4, 2], -1.0, 1.0, &mut rng);
        let y = run(&params, &m, &x);
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_repeats_lookback() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Backbone::new(&mut params, "f", Group::Theta, cfg(ForecasterKind::Linear, 3, 3, 2), &mut rng).unwrap();
        let Forecaster::Linear(lin) = &m.model else { unreachable!() };
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        params.set(lin.maps[0].weight, eye).unwrap();
        params.set(lin.maps[0].bias, Tensor::zeros(vec![3])).unwrap();
        let x = Tensor::uniform(vec![2, 3, 2], -1.0, 1.0, &mut rng);
        let y = run(&params, &m, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn nbeats_with_zero_heads_keeps_residual() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cfg(ForecasterKind::NbeatsLite, 5, 2, 3);
        c.backbone.blocks = 1;
        c.backbone.zero_init_heads = true;
        let m = Backbone::new(&mut params, "f", Group::Theta, c, &mut rng).unwrap();
        let x = Tensor::uniform(vec![2, 5, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let (y, residual) = m.forecast_with_residual(&mut ctx, xv).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
        let rows = variates_to_rows(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.value(residual.unwrap()), ctx.tape.value(rows));
    }

    #[test]
    fn per_variate_backbones_keep_variates_independent() {
        for kind in [ForecasterKind::Linear, ForecasterKind::Mlp, ForecasterKind::NbeatsLite] {
            let mut params = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let m = Backbone::new(&mut params, "f", Group::Theta, cfg(kind, 6, 4, 3), &mut rng).unwrap();
            let x = Tensor::uniform(vec![2, 6, 3], -1.0, 1.0, &mut rng);
            let mut x2 = x.clone();
            for t in 0..6 {
                x2.data_mut()[t * 3 + 1] += 0.5;
            }
            let (y, y2) = (run(&params, &m, &x), run(&params, &m, &x2));
            for b in 0..2 {
                for t in 0..4 {
                    for d in 0..3 {
                        let changed = (y.at(&[b, t, d]) - y2.at(&[b, t, d])).abs() > 0.0;
                        if b != 0 || d != 1 {
                            assert!(!changed, "{kind:?} leaked into b={b} d={d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_shape_contract_and_input_check() {
        for kind in [ForecasterKind::Linear, ForecasterKind::Mlp, ForecasterKind::NbeatsLite] {
            for per_variate in [true, false] {
                let mut params = ParamSet::new();
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let mut c = cfg(kind, 7, 3, 2);
                c.backbone.per_variate = per_variate;
                let m = Backbone::new(&mut params, "f", Group::Theta, c, &mut rng).unwrap();
                let x = Tensor::uniform(vec![5, 7, 2], -1.0, 1.0, &mut rng);
                assert_eq!(run(&params, &m, &x).shape(), &[5, 3, 2]);

                let mut tape = Tape::new();
                let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Eval);
                let bad = ctx.tape.constant(Tensor::zeros(vec![5, 6, 2]));
                assert!(matches!(m.forecast(&mut ctx, bad), Err(Error::Dimension { .. })));
            }
        }
    }
}
