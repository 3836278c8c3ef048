"""Adam, MSE, scale sampling and the kernel-imitation protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import internal_net
from .grid import ScaleSpec, sample_scale_chain
from .layer import CCLayer, forward
from .oracles import AnalyticKernel, resize
from .tensor import (
    DimensionError,
    NumericalError,
    Tape,
    Tensor,
    getitem,
    leaky_relu,
    mean,
    mse,
    no_grad,
    square,
    sub,
)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decay_steps: int = 0  # > 0: cosine decay of lr to zero over this many steps

    def lr_at(self, t: int) -> float:
        if self.decay_steps <= 0:
            return self.lr
        frac = min(t, self.decay_steps) / self.decay_steps
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class AdamState:
    t: int
    m: tuple
    v: tuple
    config: AdamConfig = AdamConfig()

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray], config: AdamConfig = AdamConfig()) -> "AdamState":
        return cls(
            0,
            tuple(np.zeros_like(p) for p in params),
            tuple(np.zeros_like(p) for p in params),
            config,
        )


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    Weight decay is folded into the gradient before the moment updates.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and moment buffers differ in count")
    c = state.config
    t = state.t + 1
    lr = c.lr_at(state.t)
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        g = g + c.weight_decay * p if c.weight_decay else g
        m = c.beta1 * m + (1 - c.beta1) * g
        v = c.beta2 * v + (1 - c.beta2) * g * g
        m_hat = m / (1 - c.beta1**t)
        v_hat = v / (1 - c.beta2**t)
        new_p.append((p - lr * m_hat / (np.sqrt(v_hat) + c.eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return AdamState(t, tuple(new_m), tuple(new_v), c), new_p


@dataclass(frozen=True)
class ScaleLaw:
    """How training scales are drawn.

    ``fixed``: always ``(fixed, fixed)``. ``uniform``: a fresh per-axis draw
    from ``[lo, hi]`` every iteration. ``single``: one per-axis draw from
    ``[lo, hi]``, reused for the whole run.
    """

    kind: str = "uniform"
    lo: float = 0.3
    hi: float = 1.3
    fixed: str = "1/2"

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "single"):
            raise ValueError(f"unknown scale law {self.kind!r}")
        if self.kind != "fixed" and not 0 < self.lo < self.hi:
            raise ValueError(f"ranged law needs 0 < lo < hi, got {self.lo}, {self.hi}")

    def sampler(self, rng: np.random.Generator) -> Callable[[], tuple]:
        if self.kind == "fixed":
            s = Fraction(self.fixed)
            return lambda: (s, s)
        if self.kind == "single":
            pair = tuple(float(v) for v in rng.uniform(self.lo, self.hi, size=2))
            return lambda: pair
        return lambda: tuple(float(v) for v in rng.uniform(self.lo, self.hi, size=2))


@dataclass(frozen=True)
class ImitationTask:
    image: np.ndarray  # [H, W]
    oracle: AnalyticKernel
    law: ScaleLaw = ScaleLaw()
    iterations: int = 2000
    seed: int = 0
    adam: AdamConfig = AdamConfig()
    interior_only: bool = True

    def describe(self) -> dict:
        return {
            "image_shape": list(self.image.shape),
            "image_sha256": hashlib.sha256(np.ascontiguousarray(self.image).tobytes()).hexdigest(),
            "oracle": asdict(self.oracle),
            "law": asdict(self.law),
            "iterations": self.iterations,
            "seed": self.seed,
            "adam": asdict(self.adam),
            "interior_only": self.interior_only,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    layer: CCLayer
    losses: list[float]
    scales: list[tuple]
    train_mse: float
    snapshots: dict[int, object] = field(default_factory=dict)


def border(layer: CCLayer) -> tuple[int, int]:
    return (layer.config.support[0] // 2, layer.config.support[1] // 2)


def _crop(t, b: tuple[int, int]):
    h, w = t.shape[-2:]
    if h <= 2 * b[0] or w <= 2 * b[1]:
        return t
    sl = (Ellipsis, slice(b[0], h - b[0]), slice(b[1], w - b[1]))
    return getitem(t, sl) if isinstance(t, Tensor) else t[sl]


def imitation_pair(image: np.ndarray, oracle: AnalyticKernel, scales, dtype) -> tuple:
    """(input tensor, spec, target array) for one scale pair."""
    h, w = image.shape
    spec = ScaleSpec.make((h, w), scales)
    target = resize(image, oracle, spec).astype(dtype)
    x = Tensor(image[None, None].astype(dtype))
    return x, spec, target[None, None]


def imitation_loss(layer: CCLayer, image, oracle, scales, interior_only=True) -> float:
    dtype = layer.params.weights[0].dtype
    x, spec, target = imitation_pair(image, oracle, scales, dtype)
    with no_grad():
        y = forward(layer, x, spec)
    b = border(layer) if interior_only else (0, 0)
    diff = _crop(y.data, b).astype(np.float64) - _crop(target, b)
    return float(np.mean(diff * diff))


def _diagnostics(path, it, scales, params, loss) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    info = {
        "iteration": it,
        "scales": [str(s) for s in scales],
        "loss": repr(loss),
        "param_norms": [float(np.linalg.norm(a)) for a in params.arrays()],
        "param_finite": [bool(np.all(np.isfinite(a))) for a in params.arrays()],
    }
    (path / "diagnostics.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def train_imitation(
    task: ImitationTask,
    layer: CCLayer,
    snapshot_at: Sequence[int] = (),
    diag_dir=None,
    train_window: int = 20,
) -> TrainResult:
    """Fit ``layer`` so its output matches ``task.oracle`` at sampled scales.

    ``train_mse`` is the final-parameter MSE averaged over the last
    ``train_window`` training scales.
    """
    rng = np.random.default_rng(task.seed)
    draw = task.law.sampler(rng)
    image = np.asarray(task.image, dtype=np.float64)
    params = layer.params
    state = AdamState.zeros(params.arrays(), task.adam)
    b = border(layer) if task.interior_only else (0, 0)
    dtype = params.weights[0].dtype
    losses, scales = [], []
    snapshots = {0: params} if 0 in snapshot_at else {}
    for it in range(task.iterations):
        pair = draw()
        x, spec, target = imitation_pair(image, task.oracle, pair, dtype)
        with Tape() as tape:
            y = forward(layer.with_params(params), x, spec)
            loss = mse(_crop(y, b), _crop(target, b))
        value = float(loss.data)
        if not np.isfinite(value):
            if diag_dir is not None:
                _diagnostics(diag_dir, it, pair, params, value)
            raise NumericalError(f"non-finite loss {value} at iteration {it}, scales {pair}")
        grads = tape.gradient(loss, params.tensors())
        state, new = adam_step(state, params.arrays(), grads)
        params = params.replace(new)
        losses.append(value)
        scales.append(pair)
        if it + 1 in snapshot_at:
            snapshots[it + 1] = params
    trained = layer.with_params(params)
    recent = scales[-train_window:] or [task.law.sampler(np.random.default_rng(task.seed))()]
    if task.law.kind != "uniform":
        recent = recent[-1:]
    train_mse = float(np.mean([imitation_loss(trained, image, task.oracle, s, task.interior_only) for s in recent]))
    return TrainResult(trained, losses, scales, train_mse, snapshots)


@dataclass
class GeneralizationReport:
    scales: list[tuple[float, float]]
    mses: list[float]
    train_mse: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.mses)) if self.mses else float("nan")

    @property
    def ratio(self) -> float:
        if not self.mses:
            return float("nan")
        return self.mean / self.train_mse if self.train_mse > 0 else float("inf")


def evaluate_generalization(
    trained: CCLayer,
    oracle: AnalyticKernel,
    image: np.ndarray,
    n_scales: int,
    scale_range=(0.3, 1.3),
    seed=0,
    train_mse: float = float("nan"),
    interior_only: bool = True,
) -> GeneralizationReport:
    """MSE against the oracle at ``n_scales`` fresh per-axis scale pairs."""
    rng = np.random.default_rng(seed)
    pairs = [tuple(float(v) for v in rng.uniform(*scale_range, size=2)) for _ in range(n_scales)]
    mses = [imitation_loss(trained, image, oracle, p, interior_only) for p in pairs]
    return GeneralizationReport(pairs, mses, train_mse)


def fit_kernel(
    params,
    target_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    extent: float,
    iterations: int = 2000,
    n_points: int = 1024,
    adam: AdamConfig = AdamConfig(lr=3e-3, weight_decay=0.0),
    seed=0,
):
    """Regress a scalar-output internal net onto ``target_fn(dy, dx)``.

    Offsets are drawn uniformly from ``[-extent, extent]^2`` each iteration.
    Returns (params, losses).
    """
    if internal_net.final_width(params.c_in, params.c_out, params.K, params.input_mode) != 1:
        raise ValueError("fit_kernel needs a single-output internal net")
    rng = np.random.default_rng(seed)
    dtype = params.weights[0].dtype
    state = AdamState.zeros(params.arrays(), adam)
    losses = []
    for _ in range(iterations):
        pts = rng.uniform(-extent, extent, size=(2, n_points))
        target = target_fn(pts[0], pts[1]).astype(dtype).reshape(1, 1, 1, -1)
        offs = Tensor(pts.reshape(1, 2, 1, -1).astype(dtype))
        with Tape() as tape:
            loss = mean(square(sub(internal_net.apply_stages(params, offs), target)))
        grads = tape.gradient(loss, params.tensors())
        state, new = adam_step(state, params.arrays(), grads)
        params = params.replace(new)
        losses.append(float(loss.data))
    return params, losses


def run_chain(layers: Sequence[CCLayer], x, chain, slope: Optional[float] = 0.01) -> Tensor:
    """Apply ``layers`` along a sampled scale chain, LeakyReLU in between."""
    if len(layers) != len(chain):
        raise ValueError(f"{len(layers)} layers but a chain of {len(chain)} scales")
    for i, (layer, link) in enumerate(zip(layers, chain)):
        x = forward(layer, x, ScaleSpec(link.sh, link.sw, *link.out))
        if slope is not None and i < len(layers) - 1:
            x = leaky_relu(x, slope)
    return x


def ensemble_forward(
    layers: Sequence[CCLayer],
    x,
    target,
    n_members: int,
    seed=0,
    aggregator: str = "mean",
    mean_scale: Optional[float] = None,
    sd: float = 0.03,
    max_den: int = 10,
    chains=None,
) -> np.ndarray:
    """Aggregate the outputs of ``n_members`` randomly sampled scale chains."""
    if aggregator not in ("mean", "median"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = len(layers)
    if chains is None:
        t = float(Fraction(target))
        ms = mean_scale if mean_scale is not None else t ** (1.0 / n)
        rng = np.random.default_rng(seed)
        chains = [
            sample_scale_chain(n, target, ms, sd, max_den, rng, in_size=x.shape[2:])
            for _ in range(n_members)
        ]
    with no_grad():
        outs = np.stack([run_chain(layers, x, c).data for c in chains])
    return outs.mean(axis=0) if aggregator == "mean" else np.median(outs, axis=0)


def write_loss_csv(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def write_generalization_csv(path, report: GeneralizationReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scale_h", "scale_w", "mse"])
        for (sh, sw), m in zip(report.scales, report.mses):
            w.writerow([repr(float(sh)), repr(float(sw)), repr(float(m))])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


__all__ = [
    "AdamConfig",
    "AdamState",
    "GeneralizationReport",
    "ImitationTask",
    "ScaleLaw",
    "TrainResult",
    "adam_step",
    "ensemble_forward",
    "evaluate_generalization",
    "fit_kernel",
    "imitation_loss",
    "run_chain",
    "train_imitation",
    "write_generalization_csv",
    "write_json",
    "write_loss_csv",
]
