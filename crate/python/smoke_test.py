"""Smoke test for the tclnet_py extension.

Build first:
    cargo build --release -p tclnet-py --features extension-module
    cp target/release/libtclnet_py.so python/tclnet_py.so
then run `python3 python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import tclnet_py as t


def check_tensor():
    x = t.Tensor([2, 3], [float(i) for i in range(6)])
    assert x.shape == [2, 3]
    assert x.at([1, 2]) == 5.0
    assert x.reshape([3, 2]).shape == [3, 2]
    try:
        t.Tensor([2, 2], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("bad shape accepted")


def check_blocks():
    assert t.n_positions(16, 8) == 14
    r = t.Tensor([6, 2], [0, 0, 1, 1, 5, 5, 5, 5, 0, 0, 0, 0])
    mask, (row, col) = t.block_binarize(r, block_height=2)
    assert (row, col) == (2, 0), (row, col)
    assert mask.tolist()[4:8] == [0.0, 0.0, 0.0, 0.0]
    assert sum(mask.tolist()) == 8


def check_attention():
    q = t.Tensor([2], [1.0, 0.0])
    m = t.Tensor([3, 2], [1.0, 0.0, 0.0, 1.0, -1.0, 0.0])
    a = t.attention_weights(q, m, tau=16.0).tolist()
    assert abs(sum(a) - 1.0) < 1e-12
    assert a[0] > a[1] > a[2]
    z = 1 + math.exp(-16) + math.exp(-32)
    assert abs(a[0] - 1 / z) < 1e-12


def check_metrics():
    m = t.compute_map([[0, 1, 2], [2, 1, 0]], [0, 1], [0, 1, 1])
    assert abs(m["mAP"] - (1.0 + 1.0) / 2) < 1e-12, m


def check_training():
    cfg = t.RunConfig.desk().replace(
        {"identities": 4, "epochs": 2, "ids_per_batch": 2, "clips_per_id": 2, "stage_channels": [4, 6, 8], "head_channels": 8}
    )
    assert cfg.identities == 4 and cfg.n_learners == 2
    data = t.generate(cfg)
    assert len(data) == 4 * cfg.clips_per_identity
    assert data.digest() == t.generate(cfg).digest()
    model, losses = t.train(cfg, data)
    assert len(losses) == 2 and all(math.isfinite(ce) for ce, _ in losses)
    report = model.evaluate(data)
    assert 0.0 <= report["mAP"] <= 1.0
    d = model.describe(data.frames(0))
    assert abs(sum(v * v for v in d) - model.n_learners()) < 1e-6
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.tclc")
        model.save(path)
        again = t.Model.load(path)
        assert again.digest() == model.digest()
        assert again.describe(data.frames(0)) == d
        try:
            t.Model.load(os.path.join(tmp, "missing.tclc"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("check_"):
            fn()
            print(f"ok  {name[6:]}")
