"""Scale algebra: projected grids, output sizes, neighbor plans, scale chains.

Pixel ``n`` has its center at integer ``n``; an axis of length ``L`` spans
``[-0.5, L - 0.5]``. Rational scales are held as :class:`fractions.Fraction`
and every grid coordinate is computed exactly before rounding to float.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

Scale = Union[Fraction, float]


class InvalidSpecError(ValueError):
    pass


class BoundaryPolicy(str, Enum):
    REPLICATE = "replicate"
    ZERO = "zero"
    REFLECT = "reflect"


def as_scale(s) -> Scale:
    """Parse ``"2/3"``, ``Fraction``, ``int`` or ``float`` into a scale."""
    if isinstance(s, Fraction):
        out = s
    elif isinstance(s, int):
        out = Fraction(s)
    elif isinstance(s, str):
        s = s.strip()
        out = Fraction(s) if "/" in s or s.isdigit() else float(s)
    else:
        out = float(s)
    if out <= 0 or (isinstance(out, float) and not math.isfinite(out)):
        raise InvalidSpecError(f"scale must be positive and finite, got {s!r}")
    return out


def default_out_size(in_size: int, s: Scale) -> int:
    """``ceil(s * in_size)``, evaluated exactly (floats are expanded exactly too)."""
    if in_size < 1:
        raise InvalidSpecError(f"in_size must be >= 1, got {in_size}")
    return math.ceil(Fraction(s) * in_size)


@dataclass(frozen=True)
class ScaleSpec:
    """Per-axis scale factors and the output size they are realized at."""

    scale_h: Scale
    scale_w: Scale
    out_h: int
    out_w: int

    def __post_init__(self) -> None:
        for s in (self.scale_h, self.scale_w):
            if not (isinstance(s, (Fraction, float)) and s > 0):
                raise InvalidSpecError(f"bad scale {s!r}")
        if self.out_h < 1 or self.out_w < 1:
            raise InvalidSpecError(f"out_size must be >= 1, got {(self.out_h, self.out_w)}")

    @classmethod
    def make(cls, in_size: tuple[int, int], scale, out_size: Optional[tuple[int, int]] = None):
        if isinstance(scale, (tuple, list)):
            sh, sw = as_scale(scale[0]), as_scale(scale[1])
        else:
            sh = sw = as_scale(scale)
        if out_size is None:
            out_size = (default_out_size(in_size[0], sh), default_out_size(in_size[1], sw))
        return cls(sh, sw, int(out_size[0]), int(out_size[1]))

    @property
    def is_rational(self) -> bool:
        return isinstance(self.scale_h, Fraction) and isinstance(self.scale_w, Fraction)

    @property
    def out_size(self) -> tuple[int, int]:
        return (self.out_h, self.out_w)


def grid_axis(in_size: int, s: Scale, out_size: int) -> np.ndarray:
    """Sub-pixel input coordinate of every output index along one axis.

    ``g_n = n/s + (in_size - 1)/2 - (out_size - 1)/(2 s)``
    """
    if out_size < 1:
        raise InvalidSpecError(f"out_size must be >= 1, got {out_size}")
    if in_size < 1:
        raise InvalidSpecError(f"in_size must be >= 1, got {in_size}")
    return np.array([float(v) for v in grid_axis_exact(in_size, s, out_size)], dtype=np.float64)


def grid_axis_exact(in_size: int, s: Scale, out_size: int) -> list[Fraction]:
    inv = 1 / Fraction(s)
    offset = Fraction(in_size - 1, 2) - inv * Fraction(out_size - 1, 2)
    return [n * inv + offset for n in range(out_size)]


@dataclass(frozen=True)
class ProjectedGrid:
    """Separable projected grid; ``coords`` materializes the [2,H',W'] form."""

    rows: np.ndarray  # [H'] vertical coordinates
    cols: np.ndarray  # [W'] horizontal coordinates
    in_size: tuple[int, int]
    out_size: tuple[int, int]
    spec: Optional[ScaleSpec] = None

    @property
    def coords(self) -> np.ndarray:
        ho, wo = self.out_size
        out = np.empty((2, ho, wo))
        out[0] = self.rows[:, None]
        out[1] = self.cols[None, :]
        return out

    def crop(self, rows: slice, cols: slice) -> "ProjectedGrid":
        r, c = self.rows[rows], self.cols[cols]
        return ProjectedGrid(r, c, self.in_size, (len(r), len(c)), None)


def projected_grid(in_size: tuple[int, int], spec: ScaleSpec) -> ProjectedGrid:
    rows = grid_axis(in_size[0], spec.scale_h, spec.out_h)
    cols = grid_axis(in_size[1], spec.scale_w, spec.out_w)
    return ProjectedGrid(rows, cols, tuple(in_size), spec.out_size, spec)


def window_start(g: np.ndarray, k: int) -> np.ndarray:
    """First neighbor index of the size-``k`` window around each coordinate."""
    return np.floor(g).astype(np.int64) - (k + 1) // 2 + 1


def resolve_indices(idx: np.ndarray, n: int, policy: BoundaryPolicy):
    """Map raw indices into [0, n-1]; returns (indices, valid-mask or None)."""
    policy = BoundaryPolicy(policy)
    if policy is BoundaryPolicy.REPLICATE:
        return np.clip(idx, 0, n - 1), None
    if policy is BoundaryPolicy.ZERO:
        valid = (idx >= 0) & (idx < n)
        return np.clip(idx, 0, n - 1), valid
    if n == 1:
        return np.zeros_like(idx), None
    # reflect without repeating the edge pixel: -1 -> 1, n -> n-2
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m), None


@dataclass(frozen=True)
class IndexPlan:
    """Boundary-resolved neighbor indices and signed distances, stored per axis.

    ``rows``/``dist_h`` are [k_h, H']; ``cols``/``dist_w`` are [k_w, W'].
    Distances are ``g - m`` taken before boundary resolution.
    """

    rows: np.ndarray
    cols: np.ndarray
    dist_h: np.ndarray
    dist_w: np.ndarray
    support: tuple[int, int]
    row_valid: Optional[np.ndarray] = None
    col_valid: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return self.support[0] * self.support[1]

    @property
    def out_size(self) -> tuple[int, int]:
        return (self.rows.shape[1], self.cols.shape[1])

    @property
    def mask(self) -> Optional[np.ndarray]:
        """[k_h, k_w, H', W'] validity, or None when every read is valid."""
        if self.row_valid is None and self.col_valid is None:
            return None
        kh, ho = self.rows.shape
        kw, wo = self.cols.shape
        rv = np.ones((kh, ho), bool) if self.row_valid is None else self.row_valid
        cv = np.ones((kw, wo), bool) if self.col_valid is None else self.col_valid
        return rv[:, None, :, None] & cv[None, :, None, :]

    @property
    def indices(self) -> np.ndarray:
        """[K, 2, H', W'] integer (row, col) of each neighbor."""
        kh, ho = self.rows.shape
        kw, wo = self.cols.shape
        out = np.empty((kh, kw, 2, ho, wo), np.int64)
        out[:, :, 0] = self.rows[:, None, :, None]
        out[:, :, 1] = self.cols[None, :, None, :]
        return out.reshape(kh * kw, 2, ho, wo)

    def distances(self, dtype=np.float64) -> np.ndarray:
        """[K, 2, H', W'] signed offsets, neighbor index k = a*k_w + b."""
        kh, ho = self.dist_h.shape
        kw, wo = self.dist_w.shape
        out = np.empty((kh, kw, 2, ho, wo), dtype)
        out[:, :, 0] = self.dist_h[:, None, :, None]
        out[:, :, 1] = self.dist_w[None, :, None, :]
        return out.reshape(kh * kw, 2, ho, wo)

    def crop(self, rows: slice, cols: slice) -> "IndexPlan":
        return IndexPlan(
            self.rows[:, rows],
            self.cols[:, cols],
            self.dist_h[:, rows],
            self.dist_w[:, cols],
            self.support,
            None if self.row_valid is None else self.row_valid[:, rows],
            None if self.col_valid is None else self.col_valid[:, cols],
        )


def _axis_plan(g: np.ndarray, k: int, n: int, policy: BoundaryPolicy):
    raw = window_start(g, k)[None, :] + np.arange(k)[:, None]
    dist = g[None, :] - raw
    idx, valid = resolve_indices(raw, n, policy)
    return idx, dist, valid


def index_plan(
    grid: ProjectedGrid,
    support: tuple[int, int],
    boundary: BoundaryPolicy = BoundaryPolicy.REPLICATE,
) -> IndexPlan:
    kh, kw = support
    if kh < 1 or kw < 1:
        raise InvalidSpecError(f"support must be >= 1 per axis, got {support}")
    rows, dh, rv = _axis_plan(grid.rows, kh, grid.in_size[0], boundary)
    cols, dw, cv = _axis_plan(grid.cols, kw, grid.in_size[1], boundary)
    return IndexPlan(rows, cols, dh, dw, (kh, kw), rv, cv)


def project_to_rational(s: float, max_den: int) -> Fraction:
    """Closest ``k/l`` with ``1 <= l <= max_den`` and ``k >= 1``.

    Ties go to the smaller denominator, then the smaller numerator.
    """
    if s <= 0 or max_den < 1:
        raise InvalidSpecError(f"need s > 0 and max_den >= 1, got {s}, {max_den}")
    exact = Fraction(s)
    best, best_key = None, None
    for den in range(1, max_den + 1):
        lo = max(1, math.floor(exact * den))
        for num in (lo, lo + 1):
            cand = Fraction(num, den)
            key = (abs(exact - cand), cand.denominator, cand.numerator)
            if best_key is None or key < best_key:
                best, best_key = cand, key
    return best


@dataclass(frozen=True)
class ChainLayer:
    sh: Fraction
    sw: Fraction
    out: tuple[int, int]


def chain_output_shapes(
    in_size: tuple[int, int], scales: Sequence[tuple[Fraction, Fraction]], target: tuple[Fraction, Fraction]
) -> list[tuple[int, int]]:
    """Output size of every layer of a chain.

    Intermediate layers take the ceiling of the cumulative scale times the
    input size; the last layer lands exactly on ``in_size * target``.
    """
    final = []
    for n, t in zip(in_size, target):
        v = Fraction(t) * n
        if v.denominator != 1:
            raise InvalidSpecError(f"in_size {n} * target {t} is not an integer")
        final.append(int(v))
    shapes = []
    cum = [Fraction(1), Fraction(1)]
    for j, (sh, sw) in enumerate(scales):
        cum = [cum[0] * sh, cum[1] * sw]
        if j == len(scales) - 1:
            shapes.append(tuple(final))
        else:
            shapes.append((math.ceil(cum[0] * in_size[0]), math.ceil(cum[1] * in_size[1])))
    return shapes


def sample_scale_chain(
    n_layers: int,
    target,
    mean_scale: float,
    sd: float,
    max_den: int,
    rng_seed,
    in_size: tuple[int, int] = (32, 32),
    max_retries: int = 100,
) -> list[ChainLayer]:
    """Random per-axis scale chain whose product is exactly ``target``.

    Each scale is drawn from ``Normal(mean_scale, sd)`` and projected to the
    nearest bounded-denominator rational. One uniformly chosen layer per
    axis is then overwritten so the product is exact; that corrected
    scale's denominator is not bounded.
    """
    if n_layers < 1:
        raise InvalidSpecError("n_layers must be >= 1")
    if isinstance(target, (tuple, list)):
        target = (as_scale(target[0]), as_scale(target[1]))
    else:
        target = (as_scale(target), as_scale(target))
    target = tuple(Fraction(t) for t in target)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for _ in range(max_retries):
        axes = []
        for t in target:
            draws = rng.normal(mean_scale, sd, size=n_layers)
            if np.any(draws <= 0):
                axes = None
                break
            scales = [project_to_rational(float(d), max_den) for d in draws]
            j = int(rng.integers(n_layers))
            rest = Fraction(1)
            for i, s in enumerate(scales):
                if i != j:
                    rest *= s
            scales[j] = t / rest
            axes.append(scales)
        if axes is None:
            continue
        pairs = list(zip(axes[0], axes[1]))
        shapes = chain_output_shapes(in_size, pairs, target)
        if all(h >= 1 and w >= 1 for h, w in shapes):
            return [ChainLayer(sh, sw, out) for (sh, sw), out in zip(pairs, shapes)]
    raise InvalidSpecError(f"no feasible scale chain after {max_retries} retries")


def chain_to_json(chain: Sequence[ChainLayer]) -> str:
    layers = [
        {
            "sh": [c.sh.numerator, c.sh.denominator],
            "sw": [c.sw.numerator, c.sw.denominator],
            "out": [int(c.out[0]), int(c.out[1])],
        }
        for c in chain
    ]
    return json.dumps({"layers": layers})


def chain_from_json(text: str) -> list[ChainLayer]:
    obj = json.loads(text)
    return [
        ChainLayer(Fraction(*d["sh"]), Fraction(*d["sw"]), tuple(d["out"]))
        for d in obj["layers"]
    ]
