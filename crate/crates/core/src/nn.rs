//! Named parameter storage, per-pass bindings, and dense building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which half of the pipeline a parameter belongs to: the forecaster (θ) or
/// the transformation (φ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Theta,
    Phi,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// receive gradient updates.
    pub trainable: bool,
    pub value: Tensor,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, group: Group, trainable: bool, value: Tensor) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry {
            name,
            group,
            trainable,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, true, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.push(name.into(), group, false, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replace a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.group == group && e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars in a group.
    pub fn count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Put every entry on `tape`: trainable entries of the `train` groups as
    /// parameters, everything else as constants.
    pub fn bind(&self, tape: &mut Tape, train: &[Group]) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable && train.contains(&e.group) {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: Vec<Tensor>) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v;
        }
    }
}

/// Tape handles for every entry of a [`ParamSet`] during one pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of the given trainable parameters, zeros where unreachable.
    pub fn collect_grads(&self, grads: &Gradients, ids: &[ParamId]) -> Result<Vec<(ParamId, Tensor)>> {
        ids.iter()
            .map(|&id| {
                grads
                    .wrt(self.var(id))
                    .cloned()
                    .map(|g| (id, g))
                    .ok_or_else(|| Error::Contract(format!("parameter {} was not bound for training", id.0)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one pass: the tape, parameter handles,
/// the train/eval mode, and a place to stage buffer updates.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    binds: Bindings,
    pub mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t mut Tape, params: &ParamSet, train: &[Group], mode: Mode) -> Self {
        let binds = params.bind(tape, train);
        Self {
            tape,
            binds,
            mode,
            buffer_updates: Vec::new(),
        }
    }

    /// Use existing handles, one per [`ParamSet`] entry in order. Lets
    /// external code differentiate with respect to parameters it placed on
    /// the tape itself.
    pub fn with_vars(tape: &'t mut Tape, vars: Vec<Var>, mode: Mode) -> Self {
        Self {
            tape,
            binds: Bindings { vars },
            mode,
            buffer_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.binds.var(id)
    }

    pub fn bindings(&self) -> &Bindings {
        &self.binds
    }

    pub fn stage_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn,
    Uniform(f64),
}

impl Init {
    fn tensor<R: Rng + ?Sized>(self, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::FanIn => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -b, b, rng)
            }
            Init::Uniform(b) => Tensor::uniform(shape, -b, b, rng),
        }
    }
}

/// `x W + b` over the last axis of a `[n, in]` input.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init.tensor(vec![in_dim, out_dim], in_dim, rng);
        let b = init.tensor(vec![out_dim], in_dim, rng);
        Self {
            weight: params.add(format!("{name}.weight"), group, w),
            bias: params.add(format!("{name}.bias"), group, b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xs = ctx.tape.shape(x);
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::dim("dense", xs, &[self.in_dim, self.out_dim]));
        }
        let y = ctx.tape.matmul(x, ctx.param(self.weight))?;
        ctx.tape.add(y, ctx.param(self.bias))
    }
}

/// Dense layers with an activation between consecutive layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output. When `zero_last` is set
    /// the final layer starts at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        dims: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if zero_last && i == n - 1 {
                    Init::Zeros
                } else {
                    Init::FanIn
                };
                Dense::new(params, &format!("{name}.{i}"), group, dims[i], dims[i + 1], init, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i < last {
                x = self.activation.apply(ctx.tape, x)?;
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> &Dense {
        self.layers.last().expect("non-empty")
    }
}
