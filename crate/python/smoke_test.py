"""Smoke test for the inflow_py extension.

Build and run from the repository root:

    cargo build --release -p inflow-py --features extension-module
    cp target/release/libinflow_py.so python/inflow_py.so
    python3 python/smoke_test.py
"""

import json
import math
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import inflow_py  # noqa: E402


def max_abs_diff(a, b):
    return max(
        abs(u - v)
        for wa, wb in zip(a, b)
        for ra, rb in zip(wa, wb)
        for u, v in zip(ra, rb)
    )


def main():
    values, train_end, val_end = inflow_py.generate_synthetic("synthetic-1", seed=0)
    assert len(values) == 10_000 and len(values[0]) == 5
    assert (train_end, val_end) == (6000, 8000)
    again, _, _ = inflow_py.generate_synthetic("synthetic-1", seed=0)
    assert values == again

    rng = random.Random(0)
    x = [[[rng.uniform(-1, 1) * 20 + 100 * d for d in range(3)] for _ in range(24)] for _ in range(4)]

    for variant in ["pre_norm", "post_norm", "coupling_only", "batch_norm"]:
        flow = inflow_py.Flow(3, variant=variant, blocks=2, hidden=16, seed=1)
        z = flow.forward(x)
        back = flow.inverse(x, z)
        err = max_abs_diff(back, x)
        assert err < 1e-8, (variant, err)
        print(f"flow {variant}: {flow.num_params} params, roundtrip err {err:.1e}")

    revin = inflow_py.RevIn(3)
    z = revin.normalize(x)
    col = [z[0][t][1] for t in range(24)]
    assert abs(sum(col) / 24) < 1e-9
    assert max_abs_diff(revin.denormalize(x, z), x) < 1e-9

    assert inflow_py.mse([1.0, 2.0], [1.0, 4.0]) == 2.0
    assert inflow_py.mae([1.0, 2.0], [1.0, 4.0]) == 1.0
    try:
        inflow_py.mse([1.0], [1.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")

    config = {
        "dataset": {"sinusoid": {"total_length": 600}},
        "model": {"variant": "inflow", "lookback": 24, "horizon": 12, "flow": {"hidden": 8}},
        "train": {"batch_size": 64, "max_epochs": 3},
    }
    out = json.loads(inflow_py.train(json.dumps(config), seed=1))
    history = out["report"]["loss_history"]
    assert len(history) == 3
    assert math.isfinite(out["test"]["mse"])
    print(f"train: {len(history)} epochs, test mse {out['test']['mse']:.4f}")

    table = inflow_py.ablate(json.dumps(config), ["none", "revin"])
    assert table.splitlines()[0].startswith("variant,")
    print("ok")


if __name__ == "__main__":
    main()
