//! Alternating θ/φ optimization, the joint and backbone-only modes, and
//! early stopping on the validation region.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::data::{Batch, Split, WindowPair, WindowSet};
use crate::error::{Error, Result};
use crate::nn::{Group, Mode, ParamId};
use crate::pipeline::{Pipeline, StepOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Bilevel,
    Joint,
    BackboneOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilevel" => Ok(TrainMode::Bilevel),
            "joint" => Ok(TrainMode::Joint),
            "backbone_only" => Ok(TrainMode::BackboneOnly),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// `None` picks the variant's default.
    pub mode: Option<TrainMode>,
    /// Global-norm clip applied to each update's gradients.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-3,
            outer_lr: 1e-4,
            batch_size: 1024,
            patience: 5,
            max_epochs: 20,
            seed: 0,
            mode: None,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn loss_l2(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    if tape.shape(y_hat) != tape.shape(y) {
        return Err(Error::dim("loss_l2", tape.shape(y_hat), tape.shape(y)));
    }
    let r = tape.sub(y_hat, y)?;
    let sq = tape.mul(r, r)?;
    tape.mean(sq)
}

/// One optimizer update as it happened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub groups: Vec<Group>,
    pub split: Split,
    pub first_anchor: usize,
    pub last_anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Patience counter over validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub since_improve: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_improve: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if val >= b => {
                self.since_improve += 1;
                if self.since_improve >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val));
                self.since_improve = 0;
                StopDecision::Improved
            }
        }
    }
}

/// Optimizer moments, loader cursors, and the record of a run.
#[derive(Clone, Debug)]
pub struct BiLevelState {
    pub theta_adam: BTreeMap<ParamId, AdamState>,
    pub phi_adam: BTreeMap<ParamId, AdamState>,
    pub inner_cursor: usize,
    pub outer_cursor: usize,
    pub stopper: EarlyStopper,
    pub loss_history: Vec<EpochLoss>,
    pub update_log: Vec<UpdateRecord>,
    pub grad_clip: Option<f64>,
    pub epoch: usize,
}

impl BiLevelState {
    pub fn new(pipeline: &Pipeline, cfg: &TrainConfig) -> Self {
        let adam = |group: Group, lr: f64| {
            pipeline
                .params
                .trainable_ids(group)
                .into_iter()
                .map(|id| {
                    (
                        id,
                        AdamState::new(pipeline.params.value(id).shape(), AdamConfig::with_lr(lr)),
                    )
                })
                .collect()
        };
        Self {
            theta_adam: adam(Group::Theta, cfg.inner_lr),
            phi_adam: adam(Group::Phi, cfg.outer_lr),
            inner_cursor: 0,
            outer_cursor: 0,
            stopper: EarlyStopper::new(cfg.patience),
            loss_history: Vec::new(),
            update_log: Vec::new(),
            grad_clip: cfg.grad_clip,
            epoch: 0,
        }
    }

    fn apply(&mut self, pipeline: &mut Pipeline, mut grads: Vec<(ParamId, Tensor)>) -> Result<()> {
        if let Some(max_norm) = self.grad_clip {
            let norm = grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                for (_, g) in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        for (id, g) in grads {
            let state = self
                .theta_adam
                .get_mut(&id)
                .or_else(|| self.phi_adam.get_mut(&id))
                .ok_or_else(|| Error::Contract(format!("no optimizer state for parameter {}", id.index())))?;
            state.step(pipeline.params.value_mut(id), &g)?;
        }
        Ok(())
    }

    fn record(&mut self, groups: Vec<Group>, split: Split, batch: &Batch) {
        let (first_anchor, last_anchor) = batch.anchor_range();
        self.update_log.push(UpdateRecord {
            epoch: self.epoch,
            groups,
            split,
            first_anchor,
            last_anchor,
        });
    }
}

fn differentiate(
    pipeline: &mut Pipeline,
    batch: &Batch,
    groups: &[Group],
    sub_step: &'static str,
) -> Result<StepOutput> {
    let (first_anchor, last_anchor) = batch.anchor_range();
    let non_finite = || Error::NonFiniteLoss {
        sub_step,
        first_anchor,
        last_anchor,
    };
    match pipeline.loss_and_grads(&batch.x, &batch.y, groups, Mode::Train) {
        Ok(out) if out.loss.is_finite() => Ok(out),
        Ok(_) | Err(Error::Numeric(_)) => Err(non_finite()),
        Err(e) => Err(e),
    }
}

/// θ update on an inner_train batch with φ frozen, then φ update on an
/// outer_val batch using the new θ. Returns both losses.
pub fn bilevel_step(
    pipeline: &mut Pipeline,
    state: &mut BiLevelState,
    inner: &Batch,
    outer: &Batch,
) -> Result<(f64, Option<f64>)> {
    inner.assert_split(Split::InnerTrain, "theta")?;
    outer.assert_split(Split::OuterVal, "phi")?;

    let out = differentiate(pipeline, inner, &[Group::Theta], "theta")?;
    pipeline.apply_buffer_updates(out.buffer_updates)?;
    state.apply(pipeline, out.grads)?;
    state.record(vec![Group::Theta], Split::InnerTrain, inner);

    if state.phi_adam.is_empty() {
        return Ok((out.loss, None));
    }
    let outer_out = differentiate(pipeline, outer, &[Group::Phi], "phi")?;
    pipeline.apply_buffer_updates(outer_out.buffer_updates)?;
    state.apply(pipeline, outer_out.grads)?;
    state.record(vec![Group::Phi], Split::OuterVal, outer);
    Ok((out.loss, Some(outer_out.loss)))
}

/// θ and φ updated together from one inner_train loss, each with its own
/// learning rate.
pub fn joint_step(pipeline: &mut Pipeline, state: &mut BiLevelState, inner: &Batch) -> Result<f64> {
    inner.assert_split(Split::InnerTrain, "joint")?;
    let out = differentiate(pipeline, inner, &[Group::Theta, Group::Phi], "joint")?;
    pipeline.apply_buffer_updates(out.buffer_updates)?;
    state.apply(pipeline, out.grads)?;
    state.record(vec![Group::Theta, Group::Phi], Split::InnerTrain, inner);
    Ok(out.loss)
}

pub fn backbone_step(pipeline: &mut Pipeline, state: &mut BiLevelState, inner: &Batch) -> Result<f64> {
    inner.assert_split(Split::InnerTrain, "theta")?;
    let out = differentiate(pipeline, inner, &[Group::Theta], "theta")?;
    pipeline.apply_buffer_updates(out.buffer_updates)?;
    state.apply(pipeline, out.grads)?;
    state.record(vec![Group::Theta], Split::InnerTrain, inner);
    Ok(out.loss)
}

/// Mean squared error of eval-mode forecasts over `windows`, in model units.
pub fn split_loss(pipeline: &mut Pipeline, windows: &[&WindowPair], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = Batch::from_windows(chunk)?;
        let pred = pipeline.predict(&batch.x, Mode::Eval)?;
        sum += pred
            .data()
            .iter()
            .zip(batch.y.data())
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
        count += pred.numel();
    }
    if count == 0 {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub config_hash: String,
    pub anchor_hash: String,
    pub grad_clip: Option<f64>,
    pub loss_history: Vec<EpochLoss>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub updates: usize,
}

impl RunReport {
    /// `epoch,train_loss,val_loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.loss_history {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

/// Fit `pipeline` on `windows`; the best-validation parameters are restored
/// before returning.
pub fn train(pipeline: &mut Pipeline, windows: &WindowSet, cfg: &TrainConfig) -> Result<(RunReport, BiLevelState)> {
    cfg.validate()?;
    let mode = pipeline.variant.resolve_mode(cfg.mode)?;
    let inner: Vec<&WindowPair> = windows.inner().collect();
    let outer: Vec<&WindowPair> = windows.outer().collect();
    let validation: Vec<&WindowPair> = windows.validation.iter().collect();
    if inner.is_empty() {
        return Err(Error::Config("inner_train split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if mode == TrainMode::Bilevel && outer.is_empty() {
        return Err(Error::Config(
            "bilevel mode needs outer_val windows; build windows with use_bilevel".into(),
        ));
    }

    let mut state = BiLevelState::new(pipeline, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut inner_order: Vec<usize> = (0..inner.len()).collect();
    let mut outer_order: Vec<usize> = (0..outer.len()).collect();
    outer_order.shuffle(&mut rng);
    let outer_batch = cfg.batch_size.min(outer.len().max(1));
    let mut best_params = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        inner_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in inner_order.chunks(cfg.batch_size) {
            let picked: Vec<&WindowPair> = chunk.iter().map(|&i| inner[i]).collect();
            let inner_b = Batch::from_windows(&picked)?;
            state.inner_cursor += picked.len();
            let loss = match mode {
                TrainMode::Bilevel => {
                    let picked: Vec<&WindowPair> = (0..outer_batch)
                        .map(|k| outer[outer_order[(state.outer_cursor + k) % outer.len()]])
                        .collect();
                    state.outer_cursor = (state.outer_cursor + outer_batch) % outer.len();
                    let outer_b = Batch::from_windows(&picked)?;
                    bilevel_step(pipeline, &mut state, &inner_b, &outer_b)?.0
                }
                TrainMode::Joint => joint_step(pipeline, &mut state, &inner_b)?,
                TrainMode::BackboneOnly => backbone_step(pipeline, &mut state, &inner_b)?,
            };
            loss_sum += loss * picked.len() as f64;
        }
        let train_loss = loss_sum / inner.len() as f64;
        let val_loss = split_loss(pipeline, &validation, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss at epoch {epoch}")));
        }
        state.loss_history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        match state.stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best_params = Some(pipeline.params.snapshot()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best_params {
        pipeline.params.restore(best);
    }

    let report = RunReport {
        variant: pipeline.variant.name().to_string(),
        mode,
        seed: cfg.seed,
        config_hash: String::new(),
        anchor_hash: windows.anchor_hash(),
        grad_clip: cfg.grad_clip,
        loss_history: state.loss_history.clone(),
        best_epoch: state.stopper.best.map(|(e, _)| e),
        best_val_loss: state.stopper.best.map(|(_, v)| v),
        stopped_early,
        updates: state.update_log.len(),
    };
    Ok((report, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        let yh = tape.constant(Tensor::vector(&[1.0, 3.0]).unwrap());
        let l = loss_l2(&mut tape, yh, y).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.5);
        let l0 = loss_l2(&mut tape, y, y).unwrap();
        assert_eq!(tape.value(l0).item().unwrap(), 0.0);
        let yh3 = tape.constant(Tensor::vector(&[1.0, 5.0]).unwrap());
        let l3 = loss_l2(&mut tape, yh3, y).unwrap();
        assert!((tape.value(l3).item().unwrap() - 9.0 * 0.5).abs() < 1e-12);
        let bad = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(loss_l2(&mut tape, bad, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn patience_one_stops_after_second_worse_epoch() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(0, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(1, 2.0), StopDecision::Stop);
        assert_eq!(s.best, Some((0, 1.0)));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = EarlyStopper::new(3);
        s.observe(0, 1.0);
        assert_eq!(s.observe(1, 1.0), StopDecision::Continue);
        assert_eq!(s.observe(2, 0.5), StopDecision::Improved);
        assert_eq!(s.since_improve, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { inner_lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
