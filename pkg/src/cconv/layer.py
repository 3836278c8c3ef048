"""The continuous-convolution layer.

Forward = projected grid -> neighbor plan -> internal-net weights ->
weighted neighbor sum. Three interchangeable execution modes:

``standard``
    materializes the full neighbors and weights tensors.
``chunked``
    walks the output in tiles, discards each tile's neighbors/weights and
    recomputes them during backward.
``rational_fast``
    for rational scales ``k/l`` the grid repeats every ``k`` outputs, so
    only ``k_h * k_w`` filter banks are evaluated and applied as strided
    discrete convolutions whose results are interleaved.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import internal_net
from . import io as ccio
from .grid import (
    BoundaryPolicy,
    IndexPlan,
    ScaleSpec,
    index_plan,
    projected_grid,
    resolve_indices,
    window_start,
)
from .internal_net import InitSpec, InternalNetParams
from .oracles import correlate, correlate_grads
from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    apply_op,
    contract_weights,
    gather_neighbors,
    getitem,
    mul,
    no_grad,
    reshape,
    take,
)

MODES = ("standard", "chunked", "rational_fast")


class ModeMismatchError(ValueError):
    """Execution mode cannot serve the requested scale."""


@dataclass(frozen=True)
class CCLayerConfig:
    c_in: int
    c_out: int
    support: tuple[int, int] = (3, 3)
    boundary: str = "replicate"
    mode: str = "standard"
    chunk: tuple[int, int] = (32, 32)
    input_mode: str = "distances"

    def __post_init__(self) -> None:
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if min(self.support) < 1:
            raise ValueError(f"support must be >= 1, got {self.support}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.chunk) < 1:
            raise ValueError(f"chunk dims must be >= 1, got {self.chunk}")
        BoundaryPolicy(self.boundary)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["support"] = list(self.support)
        d["chunk"] = list(self.chunk)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CCLayerConfig":
        d = dict(d)
        d["support"] = tuple(d["support"])
        d["chunk"] = tuple(d["chunk"])
        return cls(**d)


@dataclass
class CCLayer:
    config: CCLayerConfig
    params: InternalNetParams

    @classmethod
    def create(cls, config: CCLayerConfig, rng_seed=0, init_spec: InitSpec = InitSpec(), **kw):
        params = internal_net.init(
            config.c_in, config.c_out, config.support, config.input_mode, init_spec, rng_seed, **kw
        )
        return cls(config, params)

    def with_params(self, params: InternalNetParams) -> "CCLayer":
        return CCLayer(self.config, params)

    def __call__(self, x, spec: ScaleSpec, **kw) -> Tensor:
        return forward(self, x, spec, **kw)


def _plan(layer: CCLayer, in_size, spec: ScaleSpec) -> IndexPlan:
    grid = projected_grid(in_size, spec)
    return index_plan(grid, layer.config.support, BoundaryPolicy(layer.config.boundary))


def _apply_plan(params: InternalNetParams, x: Tensor, plan: IndexPlan) -> Tensor:
    offsets = Tensor(internal_net.net_input(plan, params.input_mode, x.dtype))
    weights = internal_net.forward(params, offsets)
    return contract_weights(gather_neighbors(x, plan), weights)


def forward(
    layer: CCLayer,
    x,
    spec: ScaleSpec,
    mode: Optional[str] = None,
    chunk: Optional[tuple[int, int]] = None,
    trace_dir=None,
) -> Tensor:
    """Resize ``x`` [N,C_in,H,W] onto ``spec``'s grid -> [N,C_out,H',W']."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != layer.config.c_in:
        raise DimensionError(
            f"layer expects [N,{layer.config.c_in},H,W] input, got {x.shape}"
        )
    mode = mode or layer.config.mode
    if trace_dir is not None:
        dump_trace(layer, x, spec, trace_dir)
    if mode == "standard":
        out = forward_standard(layer, x, spec)
    elif mode == "chunked":
        out = forward_chunked(layer, x, spec, chunk or layer.config.chunk)
    elif mode == "rational_fast":
        out = forward_rational_fast(layer, x, spec)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def forward_standard(layer: CCLayer, x: Tensor, spec: ScaleSpec) -> Tensor:
    return _apply_plan(layer.params, x, _plan(layer, x.shape[2:], spec))


def _tiles(n: int, step: int):
    return [slice(i, min(i + step, n)) for i in range(0, n, step)]


def forward_chunked(layer: CCLayer, x: Tensor, spec: ScaleSpec, chunk: tuple[int, int]) -> Tensor:
    """Tile the output; neighbors and weights live for one tile at a time."""
    if min(chunk) < 1:
        raise ValueError(f"chunk dims must be >= 1, got {chunk}")
    params = layer.params
    plan = _plan(layer, x.shape[2:], spec)
    ho, wo = plan.out_size
    tiles = [(r, c) for r in _tiles(ho, chunk[0]) for c in _tiles(wo, chunk[1])]
    out = np.zeros((x.shape[0], layer.config.c_out, ho, wo), x.dtype)
    with no_grad():
        for r, c in tiles:
            piece = _apply_plan(params, x, plan.crop(r, c))
            out[:, :, r, c] = piece.data
            del piece
    inputs = [x] + params.tensors()

    def backward(g):
        gx = np.zeros(x.shape, x.dtype)
        gp = [np.zeros(t.shape, t.dtype) for t in params.tensors()]
        for r, c in tiles:
            leaf_x = Tensor._wrap(x.data, requires_grad=True)
            leaf_p = params.replace(params.arrays())
            with Tape() as tape:
                piece = _apply_plan(leaf_p, leaf_x, plan.crop(r, c))
            grads = tape.gradient(
                piece, [leaf_x] + leaf_p.tensors(), np.ascontiguousarray(g[:, :, r, c])
            )
            gx += grads[0]
            for acc, gr in zip(gp, grads[1:]):
                acc += gr
            del tape, piece, grads
        return [gx] + gp

    return apply_op(out, inputs, backward, "cc_chunked")


def strided_conv(x: Tensor, f: Tensor, stride: tuple[int, int]) -> Tensor:
    """Differentiable valid cross-correlation backed by the oracle kernels."""
    out = correlate(x.data, f.data, stride)

    def backward(g):
        return correlate_grads(g, x.data, f.data, stride)

    return apply_op(out.astype(x.dtype, copy=False), (x, f), backward, "strided_conv")


def _windows(x: np.ndarray, kh: int, kw: int, stride: tuple[int, int]) -> np.ndarray:
    """Strided view [N, C, H', W', kh, kw] of every filter placement."""
    sh, sw = stride
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw]


def gemm_conv(x: Tensor, f: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid strided cross-correlation as one matrix product (im2col).

    Same contract as :func:`strided_conv`; this is the fast path's backend.
    """
    co, ci, kh, kw = f.shape
    if x.shape[1] != ci:
        raise DimensionError(f"conv channel mismatch: input {x.shape}, filter {f.shape}")
    cols = _windows(x.data, kh, kw, stride)
    out = np.tensordot(cols, f.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        gf = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, f.data, axes=([1], [0]))  # [N, H', W', C, kh, kw]
        gx = np.zeros(x.shape, x.dtype)
        sh, sw = stride
        ho, wo = g.shape[2:]
        for a in range(kh):
            for b in range(kw):
                gx[:, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw] += gcols[
                    ..., a, b
                ].transpose(0, 3, 1, 2)
        return gx, gf.astype(f.dtype, copy=False)

    return apply_op(np.ascontiguousarray(out, dtype=x.dtype), (x, f), backward, "gemm_conv")


def interleave(blocks: dict, period: tuple[int, int], out_shape) -> Tensor:
    """Place block (p, q) at output rows p::period[0], cols q::period[1]."""
    keys = list(blocks)
    tensors = [blocks[k] for k in keys]
    out = np.zeros(out_shape, tensors[0].dtype)
    ph, pw = period
    for (p, q), t in zip(keys, tensors):
        out[:, :, p::ph, q::pw] = t.data

    def backward(g):
        return [np.ascontiguousarray(g[:, :, p::ph, q::pw]) for p, q in keys]

    return apply_op(out, tensors, backward, "interleave")


@dataclass(frozen=True)
class AxisPhases:
    """Per-axis layout of the periodic grid for a rational scale ``num/den``."""

    period: int  # numerator: grid repeats every `period` outputs
    stride: int  # denominator: ...shifted by `stride` input pixels
    starts: np.ndarray  # raw window start of each phase's first output
    counts: np.ndarray  # outputs per phase
    lo: int  # first raw input index touched (may be negative)
    hi: int  # last raw input index touched


def axis_phases(g: np.ndarray, s: Fraction, k: int, n_in: int) -> AxisPhases:
    num, den = s.numerator, s.denominator
    n_out = len(g)
    raw = window_start(g, k)
    period = min(num, n_out)
    starts = raw[:period]
    counts = np.array([len(range(p, n_out, num)) for p in range(period)])
    # grid periodicity: output n + num sits exactly den input pixels further on
    t = np.arange(n_out) // num
    expected = starts[np.arange(n_out) % num] + den * t
    if not np.array_equal(expected, raw):
        raise AssertionError("grid is not periodic with the scale numerator")
    lo = min(int(raw.min()), 0)
    hi = max(int(raw.max()) + k - 1, n_in - 1)
    return AxisPhases(num, den, starts, counts, lo, hi)


def forward_rational_fast(layer: CCLayer, x: Tensor, spec: ScaleSpec) -> Tensor:
    if not spec.is_rational:
        raise ModeMismatchError("rational_fast needs rational scales on both axes")
    kh, kw = layer.config.support
    n, _, h, w = x.shape
    boundary = BoundaryPolicy(layer.config.boundary)
    grid = projected_grid((h, w), spec)
    plan = index_plan(grid, (kh, kw), boundary)
    ah = axis_phases(grid.rows, Fraction(spec.scale_h), kh, h)
    aw = axis_phases(grid.cols, Fraction(spec.scale_w), kw, w)

    # pad once so every phase reads a plain slice
    idx_h, valid_h = resolve_indices(np.arange(ah.lo, ah.hi + 1), h, boundary)
    idx_w, valid_w = resolve_indices(np.arange(aw.lo, aw.hi + 1), w, boundary)
    xp = take(take(x, idx_h, axis=2), idx_w, axis=3)
    if valid_h is not None:
        mask = (valid_h[:, None] & valid_w[None, :]).astype(x.dtype)
        xp = mul(xp, Tensor(mask))

    # one filter bank per phase pair
    phase_plan = plan.crop(slice(0, len(ah.starts)), slice(0, len(aw.starts)))
    offsets = Tensor(internal_net.net_input(phase_plan, layer.params.input_mode, x.dtype))
    weights = internal_net.forward(layer.params, offsets)  # [1,Co,Ci,K,ph,pw]
    co, ci = layer.config.c_out, layer.config.c_in

    blocks = {}
    for p, (sp, cp) in enumerate(zip(ah.starts, ah.counts)):
        for q, (sq, cq) in enumerate(zip(aw.starts, aw.counts)):
            filt = reshape(getitem(weights, (0, slice(None), slice(None), slice(None), p, q)), (co, ci, kh, kw))
            r0, c0 = int(sp) - ah.lo, int(sq) - aw.lo
            patch = getitem(
                xp,
                (
                    slice(None),
                    slice(None),
                    slice(r0, r0 + ah.stride * (int(cp) - 1) + kh),
                    slice(c0, c0 + aw.stride * (int(cq) - 1) + kw),
                ),
            )
            blocks[(p, q)] = gemm_conv(patch, filt, (ah.stride, aw.stride))
    out_shape = (n, co, spec.out_h, spec.out_w)
    for (p, q), b in blocks.items():
        if b.shape[2:] != (ah.counts[p], aw.counts[q]):
            raise AssertionError(f"phase ({p},{q}) produced {b.shape[2:]}")
    return interleave(blocks, (ah.period, aw.period), out_shape)


def dump_trace(layer: CCLayer, x: Tensor, spec: ScaleSpec, trace_dir) -> None:
    """Write distances, neighbor indices and weights of one call as CCT1."""
    trace_dir = Path(trace_dir)
    trace_dir.mkdir(parents=True, exist_ok=True)
    plan = _plan(layer, x.shape[2:], spec)
    with no_grad():
        offsets = Tensor(internal_net.net_input(plan, layer.params.input_mode, x.dtype))
        weights = internal_net.forward(layer.params, offsets)
    ccio.save_tensor(trace_dir / "distances.cct", plan.distances())
    ccio.save_tensor(trace_dir / "indices.cct", plan.indices.astype(np.float32))
    ccio.save_tensor(trace_dir / "weights.cct", weights.data)


def save_layer(layer: CCLayer, path) -> None:
    """``path.json`` holds config + net structure, ``path.cckp`` the params."""
    path = Path(path)
    meta = {"config": layer.config.to_dict(), "internal_net": layer.params.sidecar()}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    ccio.save_checkpoint(path.with_suffix(".cckp"), layer.params.named_arrays())


def load_layer(path) -> CCLayer:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = CCLayerConfig.from_dict(meta["config"])
    side = meta["internal_net"]
    arrays = ccio.load_checkpoint(path.with_suffix(".cckp"))
    n = len(side["widths"])
    params = InternalNetParams(
        [Tensor(arrays[f"stage{i}.weight"], requires_grad=True) for i in range(n)],
        [Tensor(arrays[f"stage{i}.bias"], requires_grad=True) for i in range(n)],
        side["c_in"],
        side["c_out"],
        tuple(side["support"]),
        side["input_mode"],
        side["slope"],
    )
    return CCLayer(config, params)
