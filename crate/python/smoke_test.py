"""Smoke test for the randattn_py extension module.

Build it first, for example:
    cargo build --release -p randattn-py --features extension-module
    cp target/release/librandattn_py.so python/randattn_py.so
or `maturin develop -m crates/py/Cargo.toml --features extension-module`.
"""

import json
import math
import random
import sys
import tempfile

import randattn_py as ra


def max_diff(a, b):
    return max(abs(x - y) for x, y in zip(a, b))


def main():
    plan = ra.Plan(seed=3, n_heads=2, height=6, width=5, group_size=4)
    print(plan)
    assert plan.n_pad == 2
    for h in range(plan.n_heads):
        perm, inv = plan.perm(h), plan.inv_perm(h)
        assert sorted(perm) == list(range(32))
        assert all(inv[perm[j]] == j for j in range(32))
        assert sum(len(g) for g in plan.groups(h)) == 30

    again = ra.Plan.from_bytes(plan.to_bytes())
    assert again == plan
    assert plan.interpolate(6, 5) == plan
    assert plan.interpolate(12, 10).height == 12

    rng = random.Random(0)
    n, d = 30, 8
    x = [rng.gauss(0.0, 1.0) for _ in range(n * d)]
    w = ra.AttentionWeights.random(d, 2, 0.35, 1)
    fast, shape = ra.grouped_attention(x, [n, d], plan, w)
    slow, _ = ra.oracle_attention(x, [n, d], plan, w)
    assert shape == [n, d]
    diff = max_diff(fast, slow)
    print(f"grouped vs oracle max diff {diff:.2e}")
    assert diff <= 1e-10
    pooled, _ = ra.pooled_attention(x, [n, d], plan, w)
    assert all(math.isfinite(v) for v in pooled)

    a = x[: 10 * d]
    assert abs(ra.similarity(a, a, [10, d]) - 1.0) < 1e-12
    assert abs(ra.similarity(a, [-v for v in a], [10, d]) + 1.0) < 1e-12

    tiny = "image_size=16\npatch_size=4\nd_model=16\ndepth=1\nn_heads=2\ngroup_size=4\nn_train=32\nn_val=16\nbatch_size=16\nepochs=1\n"
    fp = ra.config_fingerprint(tiny)
    assert "epochs=1" in ra.resolve_config(tiny)
    with tempfile.TemporaryDirectory() as out:
        report = json.loads(ra.train_run(tiny, out))
        assert report["fingerprint"] == fp
        acc = ra.evaluate_checkpoint(f"{out}/checkpoint.rack", tiny)
        print(f"tiny run: val_acc {report['final_val_acc']:.4f}, re-evaluated {acc:.4f}")
        assert abs(acc - report["final_val_acc"]) < 1e-12

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
