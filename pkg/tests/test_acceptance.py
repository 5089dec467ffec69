"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import os
import struct
import time

import numpy as np
import pytest

from refrpca import checks
from refrpca.cli import EXIT_OK, run
from refrpca.datagen import DataGenConfig, generate_dataset, ingest_mnist_idx, read_idx, write_idx
from refrpca.training import TrainConfig, depth_sweep, sweep_csv


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")

    return emit


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def summarize(results):
    return ", ".join(f"{r.check}={r.value:.2e}<{r.tolerance:.0e}" for r in results)


def test_1_prox_oracle(report):
    results, seconds = timed(checks.check_prox_oracle, n_draws=10_000, seed=0)
    ok = all(r.passed for r in results) and seconds < 30
    report(1, "prox closed form vs brute oracle", ok, f"{summarize(results)}, {seconds:.1f}s")
    assert ok


def test_2_reductions(report):
    results = checks.check_reductions(seed=0)
    ok = all(r.passed for r in results)
    report(2, "reduction identities", ok, summarize(results))
    assert ok


def test_3_gradients(report):
    results, seconds = timed(checks.check_gradients, seed=0, tol=1e-4)
    ok = all(r.passed for r in results) and seconds < 60
    worst = max(results, key=lambda r: r.value)
    report(3, "finite-difference gradients", ok, f"{len(results)} groups, worst {worst.check}={worst.value:.2e}, {seconds:.1f}s")
    assert ok


def test_4_descent(report):
    results = checks.check_descent(n_instances=100, seed=0)
    ok = all(r.passed for r in results)
    report(4, "one-step descent on 100 instances", ok, summarize(results))
    assert ok


def test_5_recovery(report):
    results, seconds = timed(checks.check_recovery, seed=0, iters=500)
    ok = all(r.passed for r in results) and results[0].tolerance == 5e-2 and seconds < 60
    report(5, "planted low-rank recovery", ok, f"{summarize(results)}, {seconds:.1f}s")
    assert ok


def test_6_desk_sweep(report, tmp_path):
    splits = generate_dataset(DataGenConfig(h=32, w=32, m=20, r=5, n_train=800, n_val=100, n_test=100, seed=0))
    cfg = TrainConfig(epochs=10, batch_size=20, learning_rate=1e-3, seed=0)
    rows, seconds = timed(depth_sweep, splits["train"], splits["val"], [1, 2, 4], ["refrpca", "corona"], cfg)
    (tmp_path / "sweep.csv").write_text(sweep_csv(rows))
    mse = {(r.variant, r.depth): r.mse_avg for r in rows}
    beats = {d: mse[("refrpca", d)] < mse[("corona", d)] for d in (2, 4)}
    deeper = mse[("refrpca", 4)] <= mse[("refrpca", 1)]
    ok = all(beats.values()) and deeper and seconds < 7200
    table = ", ".join(f"{v}/d{d}={mse[(v, d)]:.4e}" for v in ("refrpca", "corona") for d in (1, 2, 4))
    report(6, "desk-scale depth sweep", ok, f"{table}; beats corona at d=2,4: {beats}; d4<=d1: {deeper}; {seconds:.0f}s")
    assert ok


def test_7_data_invariants(report, tmp_path):
    cfg = DataGenConfig(h=32, w=32, m=20, r=5, n_train=800, n_val=100, n_test=100, seed=0)
    add = range_err = rank = 0.0
    for ds in generate_dataset(cfg).values():
        add = max(add, float(np.max(np.abs(ds.M - ds.L - ds.S))))
        range_err = max(range_err, float(max(0.0, -ds.M.min(), ds.M.max() - 1.0)))
        sig = np.linalg.svd(ds.L, compute_uv=False)
        rank = max(rank, float(np.max(sig[:, cfg.r + 1] / sig[:, 0])))
    # hand-built IDX pair: big-endian header followed by raw bytes
    pixels = bytes((i * 37 + 11) % 256 for i in range(3 * 28 * 28))
    img_bytes = struct.pack(">IIII", 0x803, 3, 28, 28) + pixels
    lbl_bytes = struct.pack(">II", 0x801, 3) + bytes([0, 5, 9])
    (tmp_path / "img").write_bytes(img_bytes)
    (tmp_path / "lbl").write_bytes(lbl_bytes)
    images, labels = ingest_mnist_idx(tmp_path / "img", tmp_path / "lbl")
    write_idx(tmp_path / "img2", images)
    write_idx(tmp_path / "lbl2", labels)
    exact = (
        images.tobytes() == pixels
        and labels.tolist() == [0, 5, 9]
        and (tmp_path / "img2").read_bytes() == img_bytes
        and (tmp_path / "lbl2").read_bytes() == lbl_bytes
        and np.array_equal(read_idx(tmp_path / "img2", 0x803), images)
    )
    ok = add <= 1e-12 and range_err <= 1e-12 and rank < 1e-10 and exact
    report(7, "data invariants and IDX round trip", ok,
           f"additivity {add:.1e}, range violation {range_err:.1e}, rank ratio {rank:.1e}, IDX exact {exact}")
    assert ok


def test_8_determinism(report, tmp_path):
    gen = ["gen", "--out", str(tmp_path / "data"), "--preset", "custom", "--h", "16", "--w", "16", "--m", "6",
           "--r", "2", "--n-train", "20", "--n-val", "6", "--n-test", "2"]
    assert run(gen) == EXIT_OK
    data = str(tmp_path / "data" / "dataset.urpc")
    fast = ["--epochs", "2", "--batch-size", "5", "--kernel-size", "3", "--threads", "1"]
    commands = {
        "selftest.csv": ["selftest", "--threads", "1"],
        "metrics.csv": ["train", "--dataset", data, *fast],
        "sweep.csv": ["sweep", "--dataset", data, "--depths", "1,2", *fast],
    }
    same = {}
    for name, args in commands.items():
        outputs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{args[0]}_{rep}"
            assert run([*args, "--out", str(out)]) == EXIT_OK
            outputs.append((out / name).read_bytes())
        extra = sorted(f for f in os.listdir(tmp_path / f"{args[0]}_a") if f.startswith("metrics_"))
        for f in extra:
            same[f] = (tmp_path / f"{args[0]}_a" / f).read_bytes() == (tmp_path / f"{args[0]}_b" / f).read_bytes()
        same[name] = outputs[0] == outputs[1] and len(outputs[0]) > 0
    ok = all(same.values())
    report(8, "byte-identical reruns", ok, ", ".join(f"{k}: {v}" for k, v in same.items()))
    assert ok
