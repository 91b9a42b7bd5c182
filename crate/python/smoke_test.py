#!/usr/bin/env python3
"""End-to-end smoke test for the tfm_py extension module.

Builds nothing itself: run `cargo build -p tfm-py` first, then
`python3 python/smoke_test.py`. The script links the built cdylib into a
temp directory under the importable name and exercises the surface.
"""

import json
import math
import os
import shutil
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_tfm_py():
    candidates = [
        os.path.join(REPO, "target", "debug", "libtfm_py.so"),
        os.path.join(REPO, "target", "release", "libtfm_py.so"),
        os.path.join(REPO, "target", "debug", "libtfm_py.dylib"),
        os.path.join(REPO, "target", "release", "libtfm_py.dylib"),
    ]
    built = next((p for p in candidates if os.path.exists(p)), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p tfm-py")
    stage = tempfile.mkdtemp(prefix="tfm_py_")
    shutil.copy2(built, os.path.join(stage, "tfm_py.so"))
    sys.path.insert(0, stage)
    import tfm_py

    return tfm_py


def check(name, ok):
    print(f"{'ok' if ok else 'FAIL'}  {name}")
    if not ok:
        sys.exit(1)


def main():
    m = import_tfm_py()

    states = ["normal", "masked", "forward_only", "normal", "masked"]
    packed = m.pack_mask(states)
    check("mask pack/unpack round trip", m.unpack_mask(packed, len(states)) == states)
    check("mask packing is 2 bits per feature", len(packed) == math.ceil(2 * len(states) / 8))

    arch = {
        "input": {"kind": "vector", "dim": 6},
        "layers": [
            {"kind": "dense", "width": 8, "cap": 16},
            {"kind": "dense", "width": 8, "cap": 16},
        ],
    }
    arch_json = json.dumps(arch)

    weights, features = m.count_params(arch_json)
    check("parameter count arithmetic", (weights, features) == (6 * 8 + 8 + 8 * 8 + 8, 16))

    csv = m.overhead_csv(arch_json, 4)
    lines = csv.strip().splitlines()
    check("overhead csv header", lines[0] == "method,tasks,bytes")
    check("overhead csv one row per method and task count", len(lines) > 4)

    net = m.Network(arch_json, mode="ternary", feature_norm=True, seed=11)
    net.grow(1, [4, 4])
    net.begin_task(1, 3)
    net.grow(2, [4, 4])
    net.begin_task(2, 3)
    check("widths reflect growth", net.widths() == [16, 16])
    check("tasks are recorded", net.tasks() == [(1, 3), (2, 3)])

    s1 = net.mask_states(0, 1)
    s2 = net.mask_states(0, 2)
    check("task 1 owns every starting feature", s1 == ["normal"] * 12)
    check(
        "task 2 sees task 1 frozen and owns the growth",
        s2[:12] == ["forward_only"] * 12 and s2[12:] == ["normal"] * 4,
    )

    x = [0.1 * i for i in range(6)]
    logits = net.predict(x, 1)
    check("predict returns one logit per class", len(logits) == 3)

    before = list(net.predict(x, 2))
    losses = [
        net.train_batch([x, [0.5] * 6], [0, 2], task=2, lr=0.1, dropout_p=0.0)
        for _ in range(30)
    ]
    check("training reduces the loss", losses[-1] < losses[0])
    check("task 1 logits untouched by task 2 training", net.predict(x, 1) == logits)
    check("task 2 logits moved", list(net.predict(x, 2)) != before)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.tfm")
        net.save(path)
        clone = m.Network.load(path)
        check("snapshot round trip preserves predictions", clone.predict(x, 2) == net.predict(x, 2))
        path2 = os.path.join(tmp, "net2.tfm")
        clone.save(path2)
        with open(path, "rb") as a, open(path2, "rb") as b:
            check("snapshot bytes are stable", a.read() == b.read())

    loss, grad = m.cross_entropy([0.0, 0.0], 0)
    check("cross entropy of even logits is ln 2", abs(loss - math.log(2)) < 1e-6)
    check("logit gradient sums to zero", abs(sum(grad)) < 1e-6)

    try:
        m.unpack_mask(bytes([0b11]), 1)
        check("invalid mask state rejected", False)
    except ValueError:
        check("invalid mask state rejected", True)

    try:
        m.Network("{not json", seed=1)
        check("bad architecture json rejected", False)
    except ValueError:
        check("bad architecture json rejected", True)

    with tempfile.TemporaryDirectory() as tmp:
        cfg = {
            "dataset": {
                "format": "synth",
                "classes": 4,
                "samples_per_class": 30,
                "dim": 8,
            },
            "arch": {
                "input": {"kind": "vector", "dim": 8},
                "layers": [{"kind": "dense", "width": 12, "cap": 24}],
            },
            "method": "tfm",
            "sequence": {"num_tasks": 2},
            "growth": {"mode": "fixed_schedule", "schedule": [0.5, 0.5]},
            "trainer": {"max_epochs": 3, "batch_size": 16},
            "seed": 5,
            "out_dir": os.path.join(tmp, "run"),
        }
        summary = json.loads(m.run_scenario(json.dumps(cfg)))
        check("scenario reports its method", summary["method"] == "tfm")
        check("scenario matrix is lower triangular", [len(r) for r in summary["matrix"]] == [1, 2])
        check(
            "scenario wrote reports",
            os.path.exists(os.path.join(summary["out_dir"], "matrix.csv")),
        )

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
