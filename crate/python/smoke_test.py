#!/usr/bin/env python3
"""Smoke test for the freeal_py extension module.

Build the module first:

    cargo build -p freeal-py

then run:

    python3 python/smoke_test.py
"""

import json
import math
import random
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("libfreeal_py.so", "libfreeal_py.dylib", "freeal_py.dll")
    ]
    built = next((p for p in candidates if p.is_file()), None)
    if built is None:
        sys.exit("freeal_py is not built; run `cargo build -p freeal-py` first")
    staging = Path(tempfile.mkdtemp(prefix="freeal_py_"))
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    shutil.copy2(built, staging / f"freeal_py{suffix}")
    sys.path.insert(0, str(staging))
    import freeal_py

    return freeal_py


def main():
    freeal = import_module()
    rng = random.Random(0)

    # Config round trip through the key=value parser.
    cfg = freeal.RunConfig(seed=3, total_epochs=40, hidden_dim=32, batch_size=8)
    assert cfg.seed == 3 and cfg.total_epochs == 40, repr(cfg)
    cfg.seed = 4
    assert cfg.seed == 4

    # Clean/noisy separation on a planted bimodal loss distribution.
    losses = [abs(rng.gauss(0.1, 0.05)) for _ in range(150)] + [
        abs(rng.gauss(2.0, 0.3)) for _ in range(150)
    ]
    sel = freeal.select_clean(losses, tau=0.7)
    assert abs(sel["means"][0] - 0.1) < 0.1, sel["means"]
    assert abs(sel["means"][1] - 2.0) < 0.2, sel["means"]
    clean = set(sel["clean"])
    purity = sum(1 for i in clean if i < 150) / len(clean)
    assert purity > 0.95, purity

    # k-medoids condenses two obvious clusters to one medoid each.
    points = [(f"a{i}", [0.0 + rng.gauss(0, 0.05), 0.0]) for i in range(10)] + [
        (f"b{i}", [5.0 + rng.gauss(0, 0.05), 0.0]) for i in range(10)
    ]
    medoids = freeal.k_medoids(points, 2, seed=1)
    assert len(medoids) == 2 and {m[0] for m in medoids} == {"a", "b"}, medoids
    assert freeal.medoid_cost(points, medoids) < 2.0

    # Robust distillation recovers planted labels under 30% noise.
    labeled = []
    for i in range(100):
        true = i % 2
        x = [(-1.0 if true == 0 else 1.0) + rng.gauss(0, 0.5),
             (1.0 if true == 0 else -1.0) + rng.gauss(0, 0.5)]
        noisy_label = 1 - true if rng.random() < 0.3 else true
        labeled.append((f"s{i:03}", x, noisy_label))
    model, clean_ids, noisy_ids = freeal.distill(
        labeled, freeal.RunConfig(seed=1, hidden_dim=32, batch_size=8, total_epochs=60)
    )
    assert len(clean_ids) + len(noisy_ids) == 100
    correct = sum(
        1 for i, (_, x, _) in enumerate(labeled) if model.predict(x) == i % 2
    )
    assert correct >= 90, f"only {correct}/100 correct"

    # Model checkpoints round-trip.
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.bin"
        model.save(path)
        again = freeal.SmallModel.load(path)
        probe = [0.3, -0.2]
        assert again.predict_proba(probe) == model.predict_proba(probe)

    # JSONL ingestion with a sealed gold column.
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.jsonl"
        with open(path, "w") as f:
            for i in range(6):
                f.write(json.dumps({
                    "id": f"d{i}",
                    "text": f"text number {i}",
                    "embedding": [float(i), 1.0],
                    "gold": str(i % 2),
                }) + "\n")
        samples, gold = freeal.load_jsonl(path)
        assert len(samples) == 6
        assert samples[0]["pseudo_label"] is None
        assert gold == {f"d{i}": i % 2 for i in range(6)}

    # End-to-end simulated loop: accuracy improves across rounds.
    records = freeal.simulate(seed=7, noise=0.3, n_train=120, n_test=40)
    assert [r["round"] for r in records] == [1, 2, 3, 4], records
    acc = {r["round"]: r["transductive_accuracy"] for r in records}
    assert acc[4] > acc[1] + 0.05, acc
    assert all(math.isfinite(a) for a in acc.values())

    print("smoke test passed")
    print(f"  loss-GMM clean purity: {purity:.3f}")
    print(f"  distilled accuracy under 30% noise: {correct}/100")
    print("  simulated loop accuracy by round:",
          {k: round(v, 4) for k, v in acc.items()})


if __name__ == "__main__":
    main()
