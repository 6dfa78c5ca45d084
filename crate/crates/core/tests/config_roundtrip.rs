use inflow::config::RunConfig;
use inflow::forecasters::ForecasterKind;
use inflow::pipeline::Variant;
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ROSTER.to_vec())
}

fn backbone() -> impl Strategy<Value = ForecasterKind> {
    prop::sample::select(vec![ForecasterKind::Linear, ForecasterKind::Mlp, ForecasterKind::NbeatsLite])
}

proptest! {
    #[test]
    fn json_roundtrip_preserves_config(
        v in variant(),
        kind in backbone(),
        lookback in 1usize..200,
        horizon in 1usize..200,
        blocks in 0usize..20,
        inner_lr in 1e-6f64..1.0,
        outer_lr in 1e-6f64..1.0,
        seeds in prop::collection::vec(any::<u64>(), 1..6),
    ) {
        let mut cfg = RunConfig::default();
        cfg.model.variant = v;
        cfg.model.backbone.kind = kind;
        cfg.model.lookback = lookback;
        cfg.model.horizon = horizon;
        cfg.model.flow.blocks = blocks;
        cfg.train.inner_lr = inner_lr;
        cfg.train.outer_lr = outer_lr;
        cfg.seeds = seeds;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.content_hash(1).unwrap(), cfg.content_hash(1).unwrap());
    }
}
