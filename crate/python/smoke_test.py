#!/usr/bin/env python3
"""Smoke test for the mvpt Python extension module.

Builds nothing itself: run `cargo build -p mvpt-py` (or `--release`) first,
then `python3 python/smoke_test.py`. The script copies the cdylib next to a
temp dir as `mvpt.so` and exercises the main types and operations.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent


def import_mvpt():
    candidates = [
        REPO / "target" / "release" / "libmvpt.so",
        REPO / "target" / "debug" / "libmvpt.so",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("build the extension first: cargo build -p mvpt-py")
    stage = Path(tempfile.mkdtemp(prefix="mvpt_py_"))
    shutil.copy(lib, stage / "mvpt.so")
    sys.path.insert(0, str(stage))
    import mvpt  # noqa: E402

    return mvpt


def main():
    mvpt = import_mvpt()
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    # Volume round-trip through numpy and through the binary format.
    rng = np.random.default_rng(7)
    arr = rng.random((8, 8, 8), dtype=np.float32)
    vol = mvpt.Volume.from_numpy(arr)
    check("volume numpy round-trip", np.array_equal(vol.to_numpy(), arr))
    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "v.mvpv")
        vol.save(path)
        back = mvpt.Volume.load(path)
        check("volume file round-trip bit-exact", np.array_equal(back.to_numpy(), arr))

    # Percentile normalization and cropping.
    norm = mvpt.normalize_percentile(vol, 0.01, 0.99)
    data = norm.to_numpy()
    check("normalize range", float(data.min()) == 0.0 and float(data.max()) == 1.0)
    sub = mvpt.crop(vol, (1, 2, 3), (4, 4, 4))
    check("crop shape and content", np.array_equal(sub.to_numpy(), arr[1:5, 2:6, 3:7]))

    # Masking: coverage bound and partition fidelity.
    fill = mvpt.Volume.from_numpy(rng.random((8, 8, 8), dtype=np.float32))
    res = mvpt.cross_modal_mask(vol, fill, 2, 0.875, seed=42)
    frac = res.masked_fraction
    check("mask coverage bound", 0.875 <= frac <= 0.875 + 8 / 512)
    occ = res.occupancy() == 1.0
    masked = res.masked.to_numpy()
    fidelity = np.array_equal(masked[occ], fill.to_numpy()[occ]) and np.array_equal(
        masked[~occ], arr[~occ]
    )
    check("mask partition fidelity", fidelity)
    res2 = mvpt.cross_modal_mask(vol, fill, 2, 0.875, seed=42)
    check("mask determinism", np.array_equal(res2.occupancy(), res.occupancy()))

    # Losses: closed forms.
    row = np.array([0.6, -0.8, 0.0, 0.0])
    f = np.tile(row, (4, 1))
    check(
        "contrastive all-equal rows = ln 4",
        abs(mvpt.contrastive_loss(f, f, 0.1) - math.log(4)) < 1e-9,
    )
    check("ssl gate", mvpt.ssl_total(0.5, 0.25, 123.0, cl_active=False) == 0.75)
    check(
        "finetune total",
        abs(mvpt.finetune_total(1.0, 2.0, 5.0, lambda_cons=0.1) - 3.5) < 1e-12,
    )
    check("ce uniform logits", abs(mvpt.ce_loss([1.0, 1.0, 1.0, 1.0], 2) - math.log(4)) < 1e-12)

    # Metrics.
    a = np.zeros((8, 8, 8), dtype=np.float32)
    b = np.zeros((8, 8, 8), dtype=np.float32)
    a[1, 1, 1] = 1.0
    b[1, 1, 4] = 1.0
    va, vb = mvpt.Volume.from_numpy(a), mvpt.Volume.from_numpy(b)
    check("dice disjoint", mvpt.dice_score(va, vb) == 0.0)
    check("hd95 two voxels 3 apart", mvpt.hd95(va, vb) == 3.0)
    acc, auc, f1 = mvpt.cls_metrics([(0.9, 1), (0.4, 0), (0.6, 1), (0.3, 0)])
    check("cls metrics perfect ranking", acc == 1.0 and auc == 1.0 and f1 == 1.0)

    # Synthetic studies are deterministic and structured.
    s0 = mvpt.gen_study(0, seed=5)
    s0_again = mvpt.gen_study(0, seed=5)
    check(
        "synthetic study determinism",
        np.array_equal(s0.modality(0).to_numpy(), s0_again.modality(0).to_numpy()),
    )
    check("synthetic labels", s0.seg_label is not None and s0.cls_label in (0, 1))

    # A tiny pre-training run end to end.
    studies = [mvpt.gen_study(i, seed=5) for i in range(4)]
    result = mvpt.pretrain(studies, num_modalities=3, epochs=2, batch_size=2, seed=1, crop=16)
    records = result.records()
    check("pretrain ran", result.steps == len(records) and result.steps > 0)
    check("pretrain losses finite", all(math.isfinite(r["l_ssl"]) for r in records))
    tpl = result.templates.template(0).to_numpy()
    check("templates trained", tpl.shape == (16, 16, 16) and float(np.abs(tpl).sum()) > 0.0)
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = str(Path(tmp) / "model.mvpc")
        result.save_checkpoint(ckpt)
        check("checkpoint written", Path(ckpt).stat().st_size > 0)

    print()
    if failures:
        sys.exit(f"{len(failures)} smoke checks failed: {failures}")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
