"""The learned continuous kernel: a stack of 1x1 convolutions with LeakyReLU.

In ``distances`` mode the net maps each 2-d neighbor offset to
``c_in * c_out`` weights and the neighbor axis rides along as the batch
dimension. In ``grid_direct`` mode it sees only the sub-pixel position of
the grid point inside its window and predicts all ``K`` neighbors' weights
at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import constants
from . import io as ccio
from .tensor import DimensionError, Tensor, conv1x1, leaky_relu, reshape, transpose

INPUT_MODES = ("distances", "grid_direct")


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "normal-fan-in"  # or "uniform-fan-in"

    @staticmethod
    def target_variance(c_in: int, K: int) -> float:
        """Kaiming variance of a discrete conv filter with the same fan-in."""
        return 2.0 / (c_in * K)


@dataclass
class InternalNetParams:
    weights: list[Tensor]
    biases: list[Tensor]
    c_in: int
    c_out: int
    support: tuple[int, int]
    input_mode: str = "distances"
    slope: float = constants.LEAKY_SLOPE

    @property
    def K(self) -> int:
        return self.support[0] * self.support[1]

    @property
    def widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def replace(self, arrays: Sequence[np.ndarray]) -> "InternalNetParams":
        """New params with the same structure and the given values."""
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        return InternalNetParams(
            ts[0::2], ts[1::2], self.c_in, self.c_out, self.support, self.input_mode, self.slope
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"stage{i}.weight"] = w.data
            out[f"stage{i}.bias"] = b.data
        return out

    def sidecar(self) -> dict:
        return {
            "input_mode": self.input_mode,
            "widths": self.widths,
            "slope": self.slope,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "support": list(self.support),
        }


def final_width(c_in: int, c_out: int, K: int, input_mode: str) -> int:
    if input_mode == "distances":
        return c_in * c_out
    if input_mode == "grid_direct":
        return c_in * c_out * K
    raise ValueError(f"unknown input mode {input_mode!r}")


def init(
    c_in: int,
    c_out: int,
    support: tuple[int, int],
    input_mode: str = "distances",
    init_spec: InitSpec = InitSpec(),
    rng_seed=0,
    hidden: Sequence[int] = constants.HIDDEN_WIDTHS,
    slope: float = constants.LEAKY_SLOPE,
    dtype=None,
) -> InternalNetParams:
    """Conv-equivalent initialization.

    The last stage's biases carry the variance of an ordinary conv filter;
    its weights are shrunk so the bias term dominates at init.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    K = support[0] * support[1]
    widths = list(hidden) + [final_width(c_in, c_out, K, input_mode)]
    dtype = dtype or Tensor(0.0).dtype
    weights, biases = [], []
    fan_in = 2
    for i, width in enumerate(widths):
        last = i == len(widths) - 1
        std = np.sqrt(2.0 / fan_in)
        if init_spec.scheme == "uniform-fan-in":
            w = rng.uniform(-np.sqrt(3.0) * std, np.sqrt(3.0) * std, size=(width, fan_in))
        elif init_spec.scheme == "normal-fan-in":
            w = rng.normal(0.0, std, size=(width, fan_in))
        else:
            raise ValueError(f"unknown init scheme {init_spec.scheme!r}")
        if last:
            w = w * constants.LAST_STAGE_WEIGHT_GAIN
            b = rng.normal(0.0, np.sqrt(InitSpec.target_variance(c_in, K)), size=width)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            b = rng.uniform(-bound, bound, size=width)
        weights.append(Tensor(w.astype(dtype), requires_grad=True))
        biases.append(Tensor(b.astype(dtype), requires_grad=True))
        fan_in = width
    return InternalNetParams(weights, biases, c_in, c_out, tuple(support), input_mode, slope)


def apply_stages(params: InternalNetParams, x: Tensor) -> Tensor:
    """Raw stack: [B,2,H,W] -> [B,C_final,H,W]."""
    if x.ndim != 4 or x.shape[1] != 2:
        raise DimensionError(f"internal net expects [B,2,H,W] offsets, got {x.shape}")
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = conv1x1(x, w, b)
        if i < n - 1:
            x = leaky_relu(x, params.slope)
    return x


def forward(params: InternalNetParams, offsets) -> Tensor:
    """Weights tensor [1, C_out, C_in, K, H', W'] for the given offsets."""
    offsets = offsets if isinstance(offsets, Tensor) else Tensor(offsets)
    b_, _, ho, wo = offsets.shape
    ci, co, K = params.c_in, params.c_out, params.K
    if params.input_mode == "distances":
        if b_ != K:
            raise DimensionError(f"distances mode needs batch K={K}, got {b_}")
        y = apply_stages(params, offsets)  # [K, co*ci, H', W']
        y = reshape(y, (K, co, ci, ho, wo))
        y = transpose(y, (1, 2, 0, 3, 4))
        return reshape(y, (1, co, ci, K, ho, wo))
    if b_ != 1:
        raise DimensionError(f"grid_direct mode needs batch 1, got {b_}")
    y = apply_stages(params, offsets)  # [1, co*ci*K, H', W']
    return reshape(y, (1, co, ci, K, ho, wo))


def net_input(plan, input_mode: str, dtype) -> np.ndarray:
    """What the internal net consumes for a given index plan.

    ``distances``: the [K,2,H',W'] offsets. ``grid_direct``: the [1,2,H',W']
    offset of each grid point from its window anchor (in [0, 1)).
    """
    if input_mode == "distances":
        return plan.distances(dtype)
    kh, kw = plan.support
    # anchor neighbor a = (k-1)//2 sits at floor(g); its distance is frac(g)
    fh = plan.dist_h[(kh + 1) // 2 - 1]
    fw = plan.dist_w[(kw + 1) // 2 - 1]
    out = np.empty((1, 2, fh.size, fw.size), dtype)
    out[0, 0] = fh[:, None]
    out[0, 1] = fw[None, :]
    return out


def sample_kernel(
    params: InternalNetParams,
    resolution: tuple[int, int] = (200, 200),
    extent: Optional[tuple[tuple[float, float], tuple[float, float]]] = None,
) -> np.ndarray:
    """Evaluate the continuous kernel on a dense regular grid of offsets.

    Returns [C_final, R_h, R_w]; rows follow the vertical offset. The default
    extent is the support box (or the unit cell for ``grid_direct``).
    """
    rh, rw = resolution
    if rh < 2 or rw < 2:
        raise ValueError("resolution must be >= 2 per axis")
    if extent is None:
        if params.input_mode == "distances":
            kh, kw = params.support
            extent = ((-kh / 2, kh / 2), (-kw / 2, kw / 2))
        else:
            extent = ((0.0, 1.0), (0.0, 1.0))
    ys = np.linspace(extent[0][0], extent[0][1], rh)
    xs = np.linspace(extent[1][0], extent[1][1], rw)
    dtype = params.weights[0].dtype
    offs = np.empty((1, 2, rh, rw), dtype)
    offs[0, 0] = ys[:, None]
    offs[0, 1] = xs[None, :]
    return apply_stages(params, Tensor(offs)).data[0].copy()


def kernel_values(params: InternalNetParams, offsets: np.ndarray) -> np.ndarray:
    """Kernel at arbitrary offsets [..., 2] -> [..., C_final]."""
    offsets = np.asarray(offsets, dtype=params.weights[0].dtype)
    flat = offsets.reshape(-1, 2)
    x = flat.T.reshape(1, 2, 1, -1)
    y = apply_stages(params, Tensor(x)).data[0, :, 0, :]
    return y.T.reshape(offsets.shape[:-1] + (y.shape[0],))


def save_params(params: InternalNetParams, path) -> None:
    """Write ``path`` (CCKP) and ``path.json`` (structure sidecar)."""
    path = Path(path)
    ccio.save_checkpoint(path, params.named_arrays())
    path.with_name(path.name + ".json").write_text(json.dumps(params.sidecar(), sort_keys=True))


def load_params(path) -> InternalNetParams:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    arrays = ccio.load_checkpoint(path)
    n = len(meta["widths"])
    weights = [Tensor(arrays[f"stage{i}.weight"], requires_grad=True) for i in range(n)]
    biases = [Tensor(arrays[f"stage{i}.bias"], requires_grad=True) for i in range(n)]
    return InternalNetParams(
        weights,
        biases,
        meta["c_in"],
        meta["c_out"],
        tuple(meta["support"]),
        meta["input_mode"],
        meta["slope"],
    )
