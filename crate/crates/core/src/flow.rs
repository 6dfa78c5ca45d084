//! Invertible transformation network built from instance normalization,
//! affine coupling over the variate axis, and channel reversal.
//!
//! All layers act on `[batch, len, variates]` tensors and never mix time
//! steps, so one stack serves lookback windows (forward) and horizon windows
//! (inverse) of different lengths. Normalization layers remember the
//! statistics of their last forward call; the inverse re-applies them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Ctx, Group, Mlp, Mode, ParamId, ParamSet};

/// How normalization and coupling are arranged inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVariant {
    /// `[InstanceNorm, Coupling, Permute]` per block.
    PreNorm,
    /// `[Coupling, Permute, InstanceNorm]` per block.
    PostNorm,
    /// `[Coupling, Permute]` per block.
    CouplingOnly,
    /// `[BatchNorm, Coupling, Permute]` per block.
    BatchNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub variant: FlowVariant,
    pub blocks: usize,
    /// Width of the hidden layers of the scale and translation networks.
    pub hidden: usize,
    pub hidden_layers: usize,
    pub eps: f64,
    /// Stop gradients through the normalization statistics.
    pub detach_stats: bool,
    /// Running-statistics momentum for the batch-norm variant.
    pub momentum: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            variant: FlowVariant::PreNorm,
            blocks: 2,
            hidden: 128,
            hidden_layers: 2,
            eps: 1e-5,
            detach_stats: false,
            momentum: 0.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("normalization eps must be positive".into()));
        }
        if self.hidden == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("coupling networks need at least one hidden layer".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Statistics captured by a normalization forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NormCache {
    pub mean: Var,
    pub var: Var,
    /// Batch size of the forward input; `None` for batch-level statistics.
    pub batch: Option<usize>,
}

fn check_cache(cache: Option<&NormCache>, ctx: &Ctx, batch: usize) -> Result<NormCache> {
    let cache = cache.ok_or_else(|| {
        Error::Contract("normalization inverse called before a forward pass".into())
    })?;
    if cache.mean.tape_id() != ctx.tape.id() {
        return Err(Error::Contract(
            "normalization cache belongs to a different pass".into(),
        ));
    }
    if let Some(b) = cache.batch {
        if b != batch {
            return Err(Error::Contract(format!(
                "inverse batch size {batch} does not match cached forward batch size {b}"
            )));
        }
    }
    Ok(*cache)
}

fn expect_rank3(ctx: &Ctx, h: Var, variates: usize, op: &'static str) -> Result<[usize; 3]> {
    let s = ctx.tape.shape(h);
    if s.len() != 3 || s[2] != variates {
        return Err(Error::dim(op, s, &[variates]));
    }
    Ok([s[0], s[1], s[2]])
}

/// Statistics either `[batch, 1, D]` (per instance) or `[D]` (shared).
fn expand_stat(ctx: &mut Ctx, stat: Var, shape: [usize; 3]) -> Result<Var> {
    if ctx.tape.shape(stat).len() == 3 {
        ctx.tape.broadcast_to(stat, &shape)
    } else {
        Ok(stat)
    }
}

/// `(h - mean) (var + eps)^(-1/2) exp(log_scale) + shift`
pub(crate) fn normalize(
    ctx: &mut Ctx,
    h: Var,
    mean: Var,
    var: Var,
    affine: Option<(Var, Var)>,
    eps: f64,
) -> Result<Var> {
    let s = ctx.tape.shape(h);
    let shape = [s[0], s[1], s[2]];
    let inv_std = {
        let v = ctx.tape.shift(var, eps)?;
        ctx.tape.power(v, -0.5)?
    };
    let mean = expand_stat(ctx, mean, shape)?;
    let inv_std = expand_stat(ctx, inv_std, shape)?;
    let centered = ctx.tape.sub(h, mean)?;
    let mut out = ctx.tape.mul(centered, inv_std)?;
    if let Some((log_scale, shift)) = affine {
        let scale = ctx.tape.exp(log_scale)?;
        out = ctx.tape.mul(out, scale)?;
        out = ctx.tape.add(out, shift)?;
    }
    Ok(out)
}

/// `(h' - shift) exp(-log_scale) (var + eps)^(1/2) + mean`
pub(crate) fn denormalize(
    ctx: &mut Ctx,
    h: Var,
    mean: Var,
    var: Var,
    affine: Option<(Var, Var)>,
    eps: f64,
) -> Result<Var> {
    let s = ctx.tape.shape(h);
    let shape = [s[0], s[1], s[2]];
    let mut out = h;
    if let Some((log_scale, shift)) = affine {
        out = ctx.tape.sub(out, shift)?;
        let neg = ctx.tape.neg(log_scale)?;
        let inv_scale = ctx.tape.exp(neg)?;
        out = ctx.tape.mul(out, inv_scale)?;
    }
    let std = {
        let v = ctx.tape.shift(var, eps)?;
        ctx.tape.power(v, 0.5)?
    };
    let std = expand_stat(ctx, std, shape)?;
    let mean = expand_stat(ctx, mean, shape)?;
    out = ctx.tape.mul(out, std)?;
    ctx.tape.add(out, mean)
}

/// Per-instance, per-variate standardization over the time axis with a
/// learnable per-variate log-scale and shift.
#[derive(Clone, Debug)]
pub struct InstanceNormLayer {
    pub log_scale: ParamId,
    pub shift: ParamId,
    pub variates: usize,
    pub eps: f64,
    pub detach_stats: bool,
    cache: Option<NormCache>,
}

impl InstanceNormLayer {
    pub fn new(params: &mut ParamSet, name: &str, group: Group, variates: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        Self {
            log_scale: params.add(format!("{name}.log_scale"), group, Tensor::zeros(vec![variates])),
            shift: params.add(format!("{name}.shift"), group, Tensor::zeros(vec![variates])),
            variates,
            eps,
            detach_stats: false,
            cache: None,
        }
    }

    pub fn cache(&self) -> Option<&NormCache> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let [batch, _, _] = expect_rank3(ctx, h, self.variates, "instance_norm")?;
        let mut mean = ctx.tape.mean_axis(h, 1)?;
        let mut var = ctx.tape.var_axis(h, 1)?;
        if self.detach_stats {
            mean = ctx.tape.detach(mean)?;
            var = ctx.tape.detach(var)?;
        }
        self.cache = Some(NormCache {
            mean,
            var,
            batch: Some(batch),
        });
        let affine = (ctx.param(self.log_scale), ctx.param(self.shift));
        normalize(ctx, h, mean, var, Some(affine), self.eps)
    }

    pub fn inverse(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let [batch, _, _] = expect_rank3(ctx, h, self.variates, "instance_norm_inverse")?;
        let cache = check_cache(self.cache.as_ref(), ctx, batch)?;
        let affine = (ctx.param(self.log_scale), ctx.param(self.shift));
        denormalize(ctx, h, cache.mean, cache.var, Some(affine), self.eps)
    }
}

/// Normalization with statistics pooled over batch and time. Training
/// passes use the batch statistics and update running averages; evaluation
/// passes use the running averages.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub log_scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub variates: usize,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<NormCache>,
}

impl BatchNormLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        variates: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        Self {
            log_scale: params.add(format!("{name}.log_scale"), group, Tensor::zeros(vec![variates])),
            shift: params.add(format!("{name}.shift"), group, Tensor::zeros(vec![variates])),
            running_mean: params.add_buffer(
                format!("{name}.running_mean"),
                group,
                Tensor::zeros(vec![variates]),
            ),
            running_var: params.add_buffer(
                format!("{name}.running_var"),
                group,
                Tensor::ones(vec![variates]),
            ),
            variates,
            eps,
            momentum,
            cache: None,
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let [b, l, d] = expect_rank3(ctx, h, self.variates, "batch_norm")?;
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                let flat = ctx.tape.reshape(h, &[b * l, d])?;
                let mean = ctx.tape.mean_axis(flat, 0)?;
                let var = ctx.tape.var_axis(flat, 0)?;
                let mean = ctx.tape.reshape(mean, &[d])?;
                let var = ctx.tape.reshape(var, &[d])?;
                let m = self.momentum;
                let blend = |old: &Tensor, new: &Tensor| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new.data())
                        .map(|(o, n)| (1.0 - m) * o + m * n)
                        .collect();
                    Tensor::new(vec![d], data)
                };
                let rm = blend(
                    ctx.tape.value(ctx.param(self.running_mean)),
                    ctx.tape.value(mean),
                )?;
                let rv = blend(
                    ctx.tape.value(ctx.param(self.running_var)),
                    ctx.tape.value(var),
                )?;
                ctx.stage_buffer(self.running_mean, rm);
                ctx.stage_buffer(self.running_var, rv);
                (mean, var)
            }
            Mode::Eval => (ctx.param(self.running_mean), ctx.param(self.running_var)),
        };
        self.cache = Some(NormCache {
            mean,
            var,
            batch: None,
        });
        let affine = (ctx.param(self.log_scale), ctx.param(self.shift));
        normalize(ctx, h, mean, var, Some(affine), self.eps)
    }

    pub fn inverse(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let [batch, _, _] = expect_rank3(ctx, h, self.variates, "batch_norm_inverse")?;
        let cache = check_cache(self.cache.as_ref(), ctx, batch)?;
        let affine = (ctx.param(self.log_scale), ctx.param(self.shift));
        denormalize(ctx, h, cache.mean, cache.var, Some(affine), self.eps)
    }
}

/// Affine coupling across variates, applied independently at every time step.
///
/// The first `split` channels pass through unchanged and condition a scale
/// and translation of the remaining channels. Raw scale outputs go through
/// `exp(tanh(.))`, which keeps the effective scale in `[1/e, e]`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub split: usize,
    pub variates: usize,
    /// `None` when there is nothing to transform (a single variate).
    nets: Option<CouplingNets>,
}

#[derive(Clone, Debug)]
pub struct CouplingNets {
    pub scale: Mlp,
    pub translate: Mlp,
}

impl CouplingLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        variates: usize,
        hidden: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Self {
        let split = variates.div_ceil(2);
        if variates < 2 {
            log::warn!(
                "coupling layer `{name}` has {variates} variate(s); it will act as the identity"
            );
            return Self {
                split,
                variates,
                nets: None,
            };
        }
        let mut dims = vec![split];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(variates - split);
        let scale = Mlp::new(params, &format!("{name}.scale"), group, &dims, Activation::Tanh, true, rng);
        let translate = Mlp::new(
            params,
            &format!("{name}.translate"),
            group,
            &dims,
            Activation::Tanh,
            true,
            rng,
        );
        Self {
            split,
            variates,
            nets: Some(CouplingNets { scale, translate }),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.nets.is_none()
    }

    pub fn nets(&self) -> Option<&CouplingNets> {
        self.nets.as_ref()
    }

    /// Split `h` into conditioning and transformed halves, flattened over time.
    fn split_halves(&self, ctx: &mut Ctx, h: Var) -> Result<([usize; 3], Var, Var)> {
        let shape = expect_rank3(ctx, h, self.variates, "coupling")?;
        let [b, l, d] = shape;
        let flat = ctx.tape.reshape(h, &[b * l, d])?;
        let cond = ctx.tape.slice(flat, 1, 0, self.split)?;
        let rest = ctx.tape.slice(flat, 1, self.split, d)?;
        Ok((shape, cond, rest))
    }

    fn scale_shift(&self, ctx: &mut Ctx, nets: &CouplingNets, cond: Var) -> Result<(Var, Var)> {
        let raw = nets.scale.forward(ctx, cond)?;
        let squashed = ctx.tape.tanh(raw)?;
        let scale = ctx.tape.exp(squashed)?;
        let shift = nets.translate.forward(ctx, cond)?;
        Ok((scale, shift))
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let Some(nets) = &self.nets else {
            expect_rank3(ctx, h, self.variates, "coupling")?;
            return Ok(h);
        };
        let (shape, cond, rest) = self.split_halves(ctx, h)?;
        let (scale, shift) = self.scale_shift(ctx, nets, cond)?;
        let scaled = ctx.tape.mul(rest, scale)?;
        let moved = ctx.tape.add(scaled, shift)?;
        let joined = ctx.tape.concat(&[cond, moved], 1)?;
        ctx.tape.reshape(joined, &shape)
    }

    pub fn inverse(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let Some(nets) = &self.nets else {
            expect_rank3(ctx, h, self.variates, "coupling_inverse")?;
            return Ok(h);
        };
        let (shape, cond, rest) = self.split_halves(ctx, h)?;
        let (scale, shift) = self.scale_shift(ctx, nets, cond)?;
        if ctx.tape.value(scale).data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Numeric("coupling scale is not positive".into()));
        }
        let centered = ctx.tape.sub(rest, shift)?;
        let restored = ctx.tape.div(centered, scale)?;
        let joined = ctx.tape.concat(&[cond, restored], 1)?;
        ctx.tape.reshape(joined, &shape)
    }
}

/// Reverse the variate order. Self-inverse.
pub fn permute_channels(ctx: &mut Ctx, h: Var) -> Result<Var> {
    let s = ctx.tape.shape(h);
    if s.len() != 3 {
        return Err(Error::dim("permute", s, &[3]));
    }
    let d = s[2];
    if d == 1 {
        return Ok(h);
    }
    let order: Vec<usize> = (0..d).rev().collect();
    ctx.tape.index_select(h, 2, &order)
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    InstanceNorm(InstanceNormLayer),
    BatchNorm(BatchNormLayer),
    Coupling(CouplingLayer),
    Permute,
}

impl FlowLayer {
    fn forward(&mut self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        match self {
            FlowLayer::InstanceNorm(l) => l.forward(ctx, h),
            FlowLayer::BatchNorm(l) => l.forward(ctx, h),
            FlowLayer::Coupling(l) => l.forward(ctx, h),
            FlowLayer::Permute => permute_channels(ctx, h),
        }
    }

    fn inverse(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        match self {
            FlowLayer::InstanceNorm(l) => l.inverse(ctx, h),
            FlowLayer::BatchNorm(l) => l.inverse(ctx, h),
            FlowLayer::Coupling(l) => l.inverse(ctx, h),
            FlowLayer::Permute => permute_channels(ctx, h),
        }
    }
}

/// Ordered stack of invertible layers.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub variates: usize,
    layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        group: Group,
        variates: usize,
        config: &FlowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if variates == 0 {
            return Err(Error::Config("flow needs at least one variate".into()));
        }
        let mut layers = Vec::new();
        for k in 0..config.blocks {
            let name = |part: &str| format!("{prefix}.block{k}.{part}");
            let norm = |params: &mut ParamSet| {
                let mut l = InstanceNormLayer::new(params, &name("norm"), group, variates, config.eps);
                l.detach_stats = config.detach_stats;
                FlowLayer::InstanceNorm(l)
            };
            let mut coupling = |params: &mut ParamSet| {
                FlowLayer::Coupling(CouplingLayer::new(
                    params,
                    &name("coupling"),
                    group,
                    variates,
                    config.hidden,
                    config.hidden_layers,
                    rng,
                ))
            };
            match config.variant {
                FlowVariant::PreNorm => {
                    layers.push(norm(params));
                    layers.push(coupling(params));
                    layers.push(FlowLayer::Permute);
                }
                FlowVariant::PostNorm => {
                    layers.push(coupling(params));
                    layers.push(FlowLayer::Permute);
                    layers.push(norm(params));
                }
                FlowVariant::CouplingOnly => {
                    layers.push(coupling(params));
                    layers.push(FlowLayer::Permute);
                }
                FlowVariant::BatchNorm => {
                    layers.push(FlowLayer::BatchNorm(BatchNormLayer::new(
                        params,
                        &name("norm"),
                        group,
                        variates,
                        config.eps,
                        config.momentum,
                    )));
                    layers.push(coupling(params));
                    layers.push(FlowLayer::Permute);
                }
            }
        }
        Ok(Self { variates, layers })
    }

    pub fn from_layers(variates: usize, layers: Vec<FlowLayer>) -> Self {
        Self { variates, layers }
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            match l {
                FlowLayer::InstanceNorm(l) => l.cache = None,
                FlowLayer::BatchNorm(l) => l.cache = None,
                _ => {}
            }
        }
    }

    /// Transform a `[batch, len, variates]` window, populating every normalization cache.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        expect_rank3(ctx, x, self.variates, "flow_forward")?;
        let mut h = x;
        for layer in &mut self.layers {
            h = layer.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Undo the stack on a `[batch, len', variates]` tensor using the cached statistics.
    pub fn inverse(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        expect_rank3(ctx, y, self.variates, "flow_inverse")?;
        let mut h = y;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(ctx, h)?;
        }
        Ok(h)
    }
}
