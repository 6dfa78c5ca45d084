use inflow::autodiff::Tensor;
use inflow::config::{DatasetConfig, RunConfig};
use inflow::data::{Batch, SinusoidConfig, Split, WindowPair};
use inflow::experiment::{prepare, train_one};
use inflow::forecasters::ForecasterKind;
use inflow::nn::{Group, Mode};
use inflow::pipeline::{ModelConfig, Pipeline, Variant};
use inflow::training::{bilevel_step, train, BiLevelState, TrainConfig};

fn toy(variant: Variant, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetConfig::Sinusoid(SinusoidConfig {
        total_length: 400,
        ..SinusoidConfig::default()
    });
    cfg.model.variant = variant;
    cfg.model.lookback = 24;
    cfg.model.horizon = 12;
    cfg.model.flow.hidden = 8;
    cfg.model.backbone.hidden_width = 16;
    cfg.train.batch_size = 32;
    cfg.train.max_epochs = epochs;
    cfg
}

#[test]
fn zero_epochs_returns_untrained_pipeline() {
    let cfg = toy(Variant::Inflow, 0);
    let prepared = prepare(&cfg).unwrap();
    let fresh = Pipeline::new(&cfg.model, 2, 1).unwrap();
    let out = train_one(&cfg, &prepared, 1).unwrap();
    assert!(out.report.loss_history.is_empty());
    assert_eq!(out.report.updates, 0);
    assert_eq!(out.pipeline.params, fresh.params);
}

#[test]
fn same_seed_same_history() {
    let cfg = toy(Variant::Inflow, 2);
    let prepared = prepare(&cfg).unwrap();
    let a = train_one(&cfg, &prepared, 3).unwrap();
    let b = train_one(&cfg, &prepared, 3).unwrap();
    assert_eq!(a.report.loss_history, b.report.loss_history);
    assert_eq!(a.pipeline.params, b.pipeline.params);
    let c = train_one(&cfg, &prepared, 4).unwrap();
    assert_ne!(a.report.loss_history, c.report.loss_history);
}

#[test]
fn backbone_only_never_takes_a_phi_step() {
    let cfg = toy(Variant::None, 2);
    let prepared = prepare(&cfg).unwrap();
    let mut pipeline = Pipeline::new(&cfg.model, 2, 1).unwrap();
    assert_eq!(pipeline.params.count(Group::Phi), 0);
    let (_, state) = train(&mut pipeline, &prepared.windows, &cfg.train).unwrap();
    assert!(!state.update_log.is_empty());
    for u in &state.update_log {
        assert_eq!(u.groups, vec![Group::Theta]);
        assert_eq!(u.split, Split::InnerTrain);
    }
}

#[test]
fn joint_mode_updates_both_groups_on_inner_batches() {
    let cfg = toy(Variant::InflowJ, 1);
    let prepared = prepare(&cfg).unwrap();
    let mut pipeline = Pipeline::new(&cfg.model, 2, 1).unwrap();
    let (_, state) = train(&mut pipeline, &prepared.windows, &cfg.train).unwrap();
    for u in &state.update_log {
        assert_eq!(u.groups, vec![Group::Theta, Group::Phi]);
        assert_eq!(u.split, Split::InnerTrain);
    }
}

fn pair(x: &[f64], y: &[f64], split: Split, anchor: usize) -> WindowPair {
    WindowPair {
        x: Tensor::new(vec![1, 1], x.to_vec()).unwrap(),
        y: Tensor::new(vec![1, 1], y.to_vec()).unwrap(),
        anchor,
        split,
    }
}

#[test]
fn small_step_on_two_parameter_model_descends() {
    // forecast = w x + b with one input and one output step
    let model = ModelConfig {
        variant: Variant::None,
        lookback: 1,
        horizon: 1,
        backbone: inflow::forecasters::BackboneConfig {
            kind: ForecasterKind::Linear,
            ..Default::default()
        },
        ..ModelConfig::default()
    };
    let mut pipeline = Pipeline::new(&model, 1, 5).unwrap();
    let ids = pipeline.params.trainable_ids(Group::Theta);
    assert_eq!(ids.len(), 2);
    let w_id = *ids.iter().find(|&&i| pipeline.params.entry(i).name.ends_with("weight")).unwrap();
    let b_id = *ids.iter().find(|&&i| pipeline.params.entry(i).name.ends_with("bias")).unwrap();
    pipeline.params.set(w_id, Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
    pipeline.params.set(b_id, Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();

    let xs = [1.0, 2.0, 3.0];
    let ys = [3.0, 5.0, 7.0];
    let inner: Vec<WindowPair> =
        xs.iter().zip(&ys).enumerate().map(|(i, (x, y))| pair(&[*x], &[*y], Split::InnerTrain, i)).collect();
    let outer = [pair(&[4.0], &[9.0], Split::OuterVal, 10)];
    let inner_b = Batch::from_windows(&inner.iter().collect::<Vec<_>>()).unwrap();
    let outer_b = Batch::from_windows(&outer.iter().collect::<Vec<_>>()).unwrap();

    // by hand: residuals r = 0.5x - y = (-2.5, -4, -5.5)
    // dL/dw = 2 mean(r x) = -16.333..., dL/db = 2 mean(r) = -8
    let loss = |p: &mut Pipeline| {
        let pred = p.predict(&inner_b.x, Mode::Eval).unwrap();
        inflow::eval::mse(pred.data(), inner_b.y.data()).unwrap()
    };
    let before = loss(&mut pipeline);
    assert!((before - (2.5f64.powi(2) + 16.0 + 5.5f64.powi(2)) / 3.0).abs() < 1e-12);

    let cfg = TrainConfig {
        inner_lr: 1e-4,
        ..TrainConfig::default()
    };
    let mut state = BiLevelState::new(&pipeline, &cfg);
    bilevel_step(&mut pipeline, &mut state, &inner_b, &outer_b).unwrap();
    let after = loss(&mut pipeline);
    assert!(after < before, "{after} >= {before}");

    // the first bias-corrected Adam step moves each parameter by lr against the gradient sign
    let w = pipeline.params.value(w_id).data()[0];
    let b = pipeline.params.value(b_id).data()[0];
    assert!((w - (0.5 + 1e-4)).abs() < 1e-10, "{w}");
    assert!((b - 1e-4).abs() < 1e-10, "{b}");
}
