use inflow::autodiff::Tensor;
use inflow::data::{Split, WindowPair};
use inflow::eval::{dump_forecast_trace, Units};
use inflow::pipeline::{ModelConfig, Pipeline, Transform, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn window(l: usize, h: usize, d: usize) -> WindowPair {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(vec![l, d], -3.0, 9.0, &mut rng);
    let y = Tensor::uniform(vec![h, d], -3.0, 9.0, &mut rng);
    WindowPair {
        x,
        y,
        anchor: l,
        split: Split::Test,
    }
}

fn model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        lookback: 8,
        horizon: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn identity_trace_passes_input_and_forecast_through() {
    let mut p = Pipeline::new(&model(Variant::None), 3, 1).unwrap();
    let w = window(8, 4, 3);
    let t = dump_forecast_trace(&mut p, &w, Units::Raw).unwrap();
    assert_eq!(t.x, w.x);
    assert_eq!(t.x_tilde, t.x);
    assert_eq!(t.y_hat, t.y_tilde);
    assert_eq!(t.y, w.y);

    let rows = t.rows();
    assert_eq!(rows.len(), 8 + 4);
    assert!(rows[..8].iter().all(|r| r.stages.len() == 2));
    assert!(rows[8..].iter().all(|r| r.stages.len() == 3));

    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), 1 + (8 * 2 + 4 * 3) * 3);
}

#[test]
fn revin_trace_centres_lookback_on_shift() {
    let mut p = Pipeline::new(&model(Variant::Revin), 3, 1).unwrap();
    let (_, shift) = match &p.transform {
        Transform::RevIn(r) => r.affine.unwrap(),
        _ => unreachable!(),
    };
    let beta = Tensor::vector(&[0.25, -1.5, 3.0]).unwrap();
    p.params.set(shift, beta.clone()).unwrap();
    let t = dump_forecast_trace(&mut p, &window(8, 4, 3), Units::Raw).unwrap();
    for d in 0..3 {
        let mean = (0..8).map(|i| t.x_tilde.at(&[i, d])).sum::<f64>() / 8.0;
        assert!((mean - beta.data()[d]).abs() < 1e-9, "variate {d}: {mean}");
    }
}

#[test]
fn zscored_trace_needs_stats() {
    let mut p = Pipeline::new(&model(Variant::None), 3, 1).unwrap();
    assert!(dump_forecast_trace(&mut p, &window(8, 4, 3), Units::ZScored(None)).is_err());
}
