//! Transform, forecast in the transformed space, transform back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::baselines::{IdentityTransform, RevInTransform};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack, FlowVariant};
use crate::forecasters::{Backbone, BackboneConfig, ForecasterConfig};
use crate::nn::{Ctx, Group, Mode, ParamId, ParamSet};
use crate::training::{loss_l2, TrainMode};

/// The comparison roster: the transformation used in front of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pre-norm instance-normalization flow, bi-level training.
    Inflow,
    /// Post-norm ordering.
    InflowT,
    /// Pre-norm flow trained jointly with the backbone on training windows.
    InflowJ,
    /// Batch-statistics normalization in place of instance normalization.
    Realnvp,
    /// Coupling and permutation only.
    RealnvpC,
    Revin,
    None,
}

impl Variant {
    pub const ROSTER: [Variant; 7] = [
        Variant::Realnvp,
        Variant::RealnvpC,
        Variant::InflowJ,
        Variant::InflowT,
        Variant::Inflow,
        Variant::Revin,
        Variant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Inflow => "inflow",
            Variant::InflowT => "inflow_t",
            Variant::InflowJ => "inflow_j",
            Variant::Realnvp => "realnvp",
            Variant::RealnvpC => "realnvp_c",
            Variant::Revin => "revin",
            Variant::None => "none",
        }
    }

    pub fn flow_variant(self) -> Option<FlowVariant> {
        match self {
            Variant::Inflow | Variant::InflowJ => Some(FlowVariant::PreNorm),
            Variant::InflowT => Some(FlowVariant::PostNorm),
            Variant::Realnvp => Some(FlowVariant::BatchNorm),
            Variant::RealnvpC => Some(FlowVariant::CouplingOnly),
            Variant::Revin | Variant::None => None,
        }
    }

    pub fn default_mode(self) -> TrainMode {
        match self {
            Variant::InflowJ | Variant::Revin => TrainMode::Joint,
            Variant::None => TrainMode::BackboneOnly,
            _ => TrainMode::Bilevel,
        }
    }

    /// Check an explicitly requested training mode against the variant.
    pub fn resolve_mode(self, requested: Option<TrainMode>) -> Result<TrainMode> {
        let Some(mode) = requested else {
            return Ok(self.default_mode());
        };
        let ok = match self {
            Variant::InflowJ => mode == TrainMode::Joint,
            Variant::None => mode == TrainMode::BackboneOnly,
            Variant::Revin => matches!(mode, TrainMode::Joint | TrainMode::Bilevel),
            _ => mode == TrainMode::Bilevel,
        };
        if ok {
            Ok(mode)
        } else {
            Err(Error::Config(format!(
                "variant `{}` cannot be trained in {mode:?} mode",
                self.name()
            )))
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ROSTER
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub lookback: usize,
    pub horizon: usize,
    /// Flow settings; `flow.variant` is overridden by `variant`.
    pub flow: FlowConfig,
    pub backbone: BackboneConfig,
    pub revin_affine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Inflow,
            lookback: 48,
            horizon: 48,
            flow: FlowConfig::default(),
            backbone: BackboneConfig::default(),
            revin_affine: true,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Transform {
    Identity(IdentityTransform),
    RevIn(RevInTransform),
    Flow(FlowStack),
}

impl Transform {
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Transform::Identity(t) => Ok(t.forward(x)),
            Transform::RevIn(t) => t.normalize(ctx, x),
            Transform::Flow(f) => f.forward(ctx, x),
        }
    }

    pub fn inverse(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        match self {
            Transform::Identity(t) => Ok(t.inverse(y)),
            Transform::RevIn(t) => t.denormalize(ctx, y),
            Transform::Flow(f) => f.inverse(ctx, y),
        }
    }
}

/// Intermediate tensors of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub x_tilde: Var,
    pub y_tilde: Var,
    pub y_hat: Var,
}

/// Loss value and gradients from one differentiated pass.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
    pub buffer_updates: Vec<(ParamId, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub params: ParamSet,
    pub transform: Transform,
    pub backbone: Backbone,
    pub variant: Variant,
    pub config: ModelConfig,
    pub variates: usize,
}

impl Pipeline {
    /// Build with parameters drawn from `seed`. Backbone and transform use
    /// separate random streams, so one seed gives every variant the same
    /// backbone initialization.
    pub fn new(config: &ModelConfig, variates: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut theta_rng = ChaCha8Rng::seed_from_u64(seed);
        theta_rng.set_stream(1);
        let mut phi_rng = ChaCha8Rng::seed_from_u64(seed);
        phi_rng.set_stream(2);

        let backbone = Backbone::new(
            &mut params,
            "theta.backbone",
            Group::Theta,
            ForecasterConfig {
                backbone: config.backbone.clone(),
                lookback: config.lookback,
                horizon: config.horizon,
                variates,
            },
            &mut theta_rng,
        )?;
        let transform = match config.variant.flow_variant() {
            Some(fv) => {
                let flow_cfg = FlowConfig {
                    variant: fv,
                    ..config.flow.clone()
                };
                Transform::Flow(FlowStack::new(
                    &mut params,
                    "phi.flow",
                    Group::Phi,
                    variates,
                    &flow_cfg,
                    &mut phi_rng,
                )?)
            }
            None if config.variant == Variant::Revin => Transform::RevIn(RevInTransform::new(
                &mut params,
                "phi.revin",
                Group::Phi,
                variates,
                config.revin_affine,
                config.flow.eps,
            )),
            None => Transform::Identity(IdentityTransform),
        };
        Ok(Self {
            params,
            transform,
            backbone,
            variant: config.variant,
            config: config.clone(),
            variates,
        })
    }

    pub fn lookback(&self) -> usize {
        self.config.lookback
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Transform, forecast, and invert on an existing context.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Stages> {
        let x_tilde = self.transform.forward(ctx, x)?;
        let y_tilde = self.backbone.forecast(ctx, x_tilde)?;
        let y_hat = self.transform.inverse(ctx, y_tilde)?;
        Ok(Stages {
            x_tilde,
            y_tilde,
            y_hat,
        })
    }

    /// Forecast without gradients.
    pub fn predict(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = std::mem::take(&mut self.params);
        let result = (|| {
            let mut ctx = Ctx::new(&mut tape, &params, &[], mode);
            let xv = ctx.tape.constant(x.clone());
            let stages = self.forward(&mut ctx, xv)?;
            Ok(ctx.tape.value(stages.y_hat).clone())
        })();
        self.params = params;
        result
    }

    /// `[x_tilde, y_tilde, y_hat]` of an eval-mode forecast.
    pub fn predict_stages(&mut self, x: &Tensor) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let params = std::mem::take(&mut self.params);
        let result = (|| {
            let mut ctx = Ctx::new(&mut tape, &params, &[], Mode::Eval);
            let xv = ctx.tape.constant(x.clone());
            let s = self.forward(&mut ctx, xv)?;
            Ok([s.x_tilde, s.y_tilde, s.y_hat].map(|v| ctx.tape.value(v).clone()))
        })();
        self.params = params;
        result
    }

    /// L2 loss on `(x, y)` and its gradients for the trainable parameters of `train`.
    pub fn loss_and_grads(&mut self, x: &Tensor, y: &Tensor, train: &[Group], mode: Mode) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let params = std::mem::take(&mut self.params);
        let result = (|| {
            let mut ctx = Ctx::new(&mut tape, &params, train, mode);
            let xv = ctx.tape.constant(x.clone());
            let yv = ctx.tape.constant(y.clone());
            let stages = self.forward(&mut ctx, xv)?;
            let loss = loss_l2(ctx.tape, stages.y_hat, yv)?;
            let loss_value = ctx.tape.value(loss).item()?;
            let buffer_updates = ctx.take_buffer_updates();
            let binds = ctx.bindings().clone();
            drop(ctx);
            let grads = tape.backward(loss)?;
            let ids: Vec<ParamId> = train.iter().flat_map(|&g| params.trainable_ids(g)).collect();
            let grads = binds.collect_grads(&grads, &ids)?;
            Ok(StepOutput {
                loss: loss_value,
                grads,
                buffer_updates,
            })
        })();
        self.params = params;
        result
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, v) in updates {
            self.params.set(id, v)?;
        }
        Ok(())
    }
}
