"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test prints one ``[criterion N] PASS|FAIL`` line with the measured
numbers, then asserts. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import contextlib
import io
import shutil
import time
from fractions import Fraction

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import numeric_grad, rel_err
from cconv import internal_net as inet
from cconv.cli import main
from cconv.constants import CHUNKED_ATOL, CONV_SPECIAL_CASE_ATOL, FD_REL_TOL, RATIONAL_FAST_ATOL
from cconv.experiments import (
    BenchConfig,
    EquivarianceConfig,
    MisalignConfig,
    equivariance_ordering,
    kernel_ssim,
    noise_image,
    run_equivariance,
    run_misalignment,
    time_layers,
)
from cconv.grid import ScaleSpec
from cconv.layer import CCLayer, CCLayerConfig, forward
from cconv.oracles import AnalyticKernel, DiscreteConvSpec, discrete_conv
from cconv.tensor import Tape, Tensor, precision
from cconv.trainer import AdamConfig, ImitationTask, ScaleLaw, evaluate_generalization, train_imitation

BICUBIC = AnalyticKernel("bicubic")


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail, elapsed, budget):
        ok = ok and elapsed < budget
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\n[criterion {n}] {status} {name}: {detail} ({elapsed:.1f}s of {budget:g}s)")
        return ok

    return emit


def test_c01_grid_exactness(report, tmp_path):
    t0 = time.perf_counter()
    got = {}
    for key, argv in {
        "8,1/2": ["--in-size", "8", "--scale", "1/2"],
        "9,1/3": ["--in-size", "9", "--scale", "1/3"],
        "4x4,0.6x1.4": ["--in-size", "4x4", "--scale", "0.6,1.4"],
    }.items():
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            assert main(["grid", *argv, "--out-dir", str(tmp_path / "g"), "--quiet"]) == 0
        got[key] = dict(line.split(" ", 1) for line in buf.getvalue().splitlines())
    elapsed = time.perf_counter() - t0
    ok = (
        got["8,1/2"]["rows"] == "0.5 2.5 4.5 6.5"
        and got["9,1/3"]["rows"] == "1 4 7"
        and got["4x4,0.6x1.4"]["out_size"] == "3 6"
    )
    detail = f"rows {got['8,1/2']['rows']!r} / {got['9,1/3']['rows']!r}, shape {got['4x4,0.6x1.4']['out_size']!r}"
    assert report(1, "grid exactness", ok, detail, elapsed, 1.0)


def test_c02_conv_special_case(report):
    t0 = time.perf_counter()
    layer = CCLayer.create(CCLayerConfig(2, 3, (3, 3)), 0)
    offs = np.array([[1.0 - a, 1.0 - b] for a in range(3) for b in range(3)])
    filt = inet.kernel_values(layer.params, offs).T.reshape(3, 2, 3, 3)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(1, 2, 15, 12)).astype(np.float32)
        y = forward(layer, x, ScaleSpec.make((15, 12), Fraction(1, 3))).data
        ref = discrete_conv(x.astype(np.float64), DiscreteConvSpec(filt, stride=(3, 3)))
        worst = max(worst, float(np.max(np.abs(y - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst <= CONV_SPECIAL_CASE_ATOL
    assert report(2, "conv special case", ok, f"max abs diff {worst:.2e} (<= {CONV_SPECIAL_CASE_ATOL:g})", elapsed, 10.0)


def test_c03_mode_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_chunk = worst_fast = 0.0
    for i in range(50):
        ci, co = (int(v) for v in rng.integers(1, 4, size=2))
        kh, kw = (int(v) for v in rng.integers(1, 6, size=2))
        h, w = (int(v) for v in rng.integers(4, 24, size=2))
        num, den = rng.integers(1, 7, size=(2, 2))
        spec = ScaleSpec.make((h, w), (Fraction(int(num[0]), int(den[0])), Fraction(int(num[1]), int(den[1]))))
        boundary = ("replicate", "zero", "reflect")[i % 3]
        layer = CCLayer.create(CCLayerConfig(ci, co, (kh, kw), boundary=boundary), rng)
        x = rng.normal(size=(2, ci, h, w)).astype(np.float32)
        std = forward(layer, x, spec, mode="standard").data
        chunk = (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        worst_chunk = max(worst_chunk, float(np.max(np.abs(std - forward(layer, x, spec, mode="chunked", chunk=chunk).data))))
        worst_fast = max(worst_fast, float(np.max(np.abs(std - forward(layer, x, spec, mode="rational_fast").data))))
    elapsed = time.perf_counter() - t0
    ok = worst_chunk <= CHUNKED_ATOL and worst_fast <= RATIONAL_FAST_ATOL
    detail = f"chunked {worst_chunk:.2e} (<= 1e-6), rational_fast {worst_fast:.2e} (<= 1e-5)"
    assert report(3, "mode equivalence", ok, detail, elapsed, 60.0)


def _fd_errors(seed: int, mode: str) -> float:
    rng = np.random.default_rng(seed)
    ci, co = (int(v) for v in rng.integers(1, 3, size=2))
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    h, w = (int(v) for v in rng.integers(3, 7, size=2))
    spec = ScaleSpec.make((h, w), (Fraction(int(rng.integers(1, 4)), int(rng.integers(1, 4))),) * 2)
    with precision("f64"):
        layer = CCLayer.create(CCLayerConfig(ci, co, (kh, kw), chunk=(2, 2)), seed, hidden=(4, 4))
        x = rng.normal(size=(1, ci, h, w))
        probe = rng.normal(size=(1, co) + spec.out_size)
        tx = Tensor(x, requires_grad=True)
        with Tape() as tape:
            y = forward(layer, tx, spec, mode=mode)
        grads = tape.gradient(y, [tx] + layer.params.tensors(), probe)
        arrays = layer.params.arrays()

        def value(xv, params):
            return float((forward(layer.with_params(layer.params.replace(params)), Tensor(xv), spec, mode=mode).data * probe).sum())

        errs = [rel_err(grads[0], numeric_grad(lambda v: value(v, arrays), x))]
        for i, a in enumerate(arrays):
            def fp(v, i=i):
                new = list(arrays)
                new[i] = v
                return value(x, new)

            errs.append(rel_err(grads[1 + i], numeric_grad(fp, a)))
    return max(errs)


def test_c04_gradient_correctness(report):
    t0 = time.perf_counter()
    modes = ("standard", "chunked", "rational_fast")
    worst = max(_fd_errors(100 + i, modes[i % 3]) for i in range(10))
    elapsed = time.perf_counter() - t0
    ok = worst < FD_REL_TOL
    assert report(4, "gradient correctness", ok, f"max rel err {worst:.2e} (< 1e-4), 10 configs", elapsed, 60.0)


def test_c05_misalignment(report):
    t0 = time.perf_counter()
    out = run_misalignment(MisalignConfig())
    elapsed = time.perf_counter() - t0
    disc = out["drift"]["discrete"]
    cc = out["drift"]["cc"]
    cc_norm = float(np.hypot(*cc))
    ok = all(abs(abs(d) - 10.0) <= 0.2 for d in disc) and cc_norm < 0.1
    detail = f"discrete drift ({disc[0]:.3f}, {disc[1]:.3f}) px per axis, CC drift {cc_norm:.4f} px"
    assert report(5, "misalignment", ok, detail, elapsed, 30.0)


@pytest.fixture(scope="module")
def ranged_run():
    t0 = time.perf_counter()
    image = noise_image(64, 0)
    task = ImitationTask(
        image, BICUBIC, ScaleLaw("uniform", 0.3, 1.3), 3000, 0,
        AdamConfig(lr=1e-2, weight_decay=0.0, decay_steps=3000),
    )
    res = train_imitation(task, CCLayer.create(CCLayerConfig(1, 1, (4, 4)), 0))
    return res, image, time.perf_counter() - t0


def test_c06_scale_generalization(report, ranged_run):
    res, image, train_time = ranged_run
    t0 = time.perf_counter()
    ranged = evaluate_generalization(res.layer, BICUBIC, image, 100, (0.3, 1.3), seed=1, train_mse=res.train_mse)
    task = ImitationTask(
        image, BICUBIC, ScaleLaw("fixed", fixed="1/2"), 1000, 0,
        AdamConfig(lr=1e-2, weight_decay=0.0, decay_steps=1000),
    )
    fixed_res = train_imitation(task, CCLayer.create(CCLayerConfig(1, 1, (4, 4)), 0))
    fixed = evaluate_generalization(fixed_res.layer, BICUBIC, image, 100, (0.3, 1.3), seed=1, train_mse=fixed_res.train_mse)
    elapsed = train_time + time.perf_counter() - t0
    ok = ranged.ratio <= 10.0 and fixed.ratio >= 100.0
    detail = (
        f"ranged train {res.train_mse:.2e} test {ranged.mean:.2e} ratio {ranged.ratio:.2f} (<= 10); "
        f"fixed 1/2 train {fixed_res.train_mse:.2e} test {fixed.mean:.2e} ratio {fixed.ratio:.0f} (>= 100)"
    )
    assert report(6, "scale generalization", ok, detail, elapsed, 900.0)


def test_c07_kernel_recovery(report, ranged_run):
    res, _, train_time = ranged_run
    t0 = time.perf_counter()
    score = kernel_ssim(res.layer, BICUBIC, (200, 200))
    elapsed = train_time + time.perf_counter() - t0
    assert report(7, "kernel recovery", score > 0.9, f"SSIM {score:.4f} (> 0.9) on 200x200 samples", elapsed, 900.0)


def test_c08_equivariance_ordering(report):
    t0 = time.perf_counter()
    out = run_equivariance(EquivarianceConfig())
    elapsed = time.perf_counter() - t0
    order = equivariance_ordering(out["mean"])
    sims = {(r["input"], r["radius"], r["net"]): r["similarity"] for r in out["mean"]}
    detail = ", ".join(
        f"{key} cc {sims[(key.split('/')[0], int(key.split('/r')[1]), 'cc')]:.3f}"
        f" vs base {sims[(key.split('/')[0], int(key.split('/r')[1]), 'baseline')]:.3f}"
        for key in sorted(order)
    )
    assert report(8, "equivariance ordering", all(order.values()), detail, elapsed, 1200.0)


def test_c09_fast_path_performance(report):
    t0 = time.perf_counter()
    with threadpool_limits(1):
        cfg = BenchConfig(channels=32, support=3, repeats=11, chunk=32)
        std = time_layers("standard", 64, 1, cfg, Fraction(2, 3))
        fast = time_layers("rational_fast", 64, 1, cfg, Fraction(2, 3))
        cfg = BenchConfig(channels=32, support=3, repeats=2, chunk=32)
        std_mem = time_layers("standard", 128, 1, cfg, Fraction(2, 3))["peak_bytes"]
        chk_mem = time_layers("chunked", 128, 1, cfg, Fraction(2, 3))["peak_bytes"]
    elapsed = time.perf_counter() - t0
    speedup = std["time_ms"] / fast["time_ms"]
    mem = chk_mem / std_mem
    ok = speedup >= 3.0 and mem <= 0.5
    detail = (
        f"speedup {speedup:.1f}x ({std['time_ms']:.1f} vs {fast['time_ms']:.1f} ms, >= 3x); "
        f"chunked/standard peak {mem:.3f} ({chk_mem / 2**20:.0f} vs {std_mem / 2**20:.0f} MiB, <= 0.5)"
    )
    assert report(9, "fast-path performance", ok, detail, elapsed, 300.0)


DETERMINISM = [
    ["grid", "--in-size", "9x7", "--scale", "2/3,0.8", "--support", "4"],
    ["imitate", "--iters", "5", "--image-size", "16", "--snapshots", "2"],
    ["generalize", "--iters", "5", "--image-size", "16", "--n-scales", "4"],
    ["misalign", "--iters", "3", "--size", "24", "--train-iters", "5"],
    ["equivariance", "--iters", "2", "--n-eval", "2", "--n-seeds", "1", "--radii", "2"],
    ["ensemble", "--iters", "3", "--n-members", "2"],
    ["bench", "--sizes", "8", "--layers", "1,2", "--channels", "2", "--repeats", "2"],
]


def test_c10_determinism(report, tmp_path):
    t0 = time.perf_counter()
    mismatched, compared = [], 0
    for argv in DETERMINISM:
        out = tmp_path / argv[0]
        snaps = []
        for _ in range(2):
            code = main(argv + ["--out-dir", str(out), "--seed", "5", "--deterministic", "--quiet"])
            assert code == 0, argv
            snaps.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.suffix in (".csv", ".json")})
            shutil.rmtree(out)
        compared += len(snaps[0])
        if snaps[0] != snaps[1]:
            mismatched.append(argv[0])
    elapsed = time.perf_counter() - t0
    ok = not mismatched and compared > 0
    detail = f"{compared} CSV/JSON files over {len(DETERMINISM)} commands, mismatched: {mismatched or 'none'}"
    assert report(10, "determinism", ok, detail, elapsed, 120.0)
