"""Non-learned ground truth: analytic resizers, discrete strided conv, metrics.

All resizers use the same projected-grid convention as the CC layer. The
neighbor windows here are built independently (every integer within the
kernel radius) so they can serve as a check on the layer's own windowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import ScaleSpec, grid_axis
from .tensor import DimensionError


class DegenerateInputError(ValueError):
    pass


def keys_cubic(x, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def linear(x) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(x, dtype=np.float64)))


def box(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x >= -0.5) & (x < 0.5)).astype(np.float64)


@dataclass(frozen=True)
class AnalyticKernel:
    """A fixed resampling kernel.

    ``kind`` is one of ``bicubic``, ``bilinear``, ``box``, ``gaussian`` or
    ``tapered_gaussian``. The gaussian has standard deviations ``sigma_x``
    (horizontal) and ``sigma_y`` (vertical) before a counter-clockwise
    rotation by ``rotation_deg``. The tapered gaussian is separable and
    unrotated, with ``G(r)`` subtracted per axis so it reaches zero exactly
    at ``taper_radius``.
    """

    kind: str = "bicubic"
    a: float = -0.5
    sigma_x: float = 1.0
    sigma_y: float = 2.0
    rotation_deg: float = 45.0
    taper_radius: float = 2.0

    @property
    def separable(self) -> bool:
        return self.kind != "gaussian" or (self.rotation_deg % 180 == 0)

    @property
    def radius(self) -> float:
        if self.kind == "bicubic":
            return 2.0
        if self.kind == "bilinear":
            return 1.0
        if self.kind == "box":
            return 0.5
        if self.kind == "gaussian":
            return 3.0 * max(self.sigma_x, self.sigma_y)
        if self.kind == "tapered_gaussian":
            return self.taper_radius
        raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def support(self) -> int:
        """Smallest window size that sees every nonzero tap."""
        return max(1, int(math.ceil(2 * self.radius)))

    def axis(self, x, vertical: bool = False) -> np.ndarray:
        if self.kind == "bicubic":
            return keys_cubic(x, self.a)
        if self.kind == "bilinear":
            return linear(x)
        if self.kind == "box":
            return box(x)
        if self.kind == "gaussian" and self.separable:
            sig = self.sigma_y if vertical else self.sigma_x
            x = np.asarray(x, dtype=np.float64)
            return np.exp(-0.5 * (x / sig) ** 2) * (np.abs(x) <= self.radius)
        if self.kind == "tapered_gaussian":
            sig = self.sigma_y if vertical else self.sigma_x
            x = np.asarray(x, dtype=np.float64)
            floor = math.exp(-0.5 * (self.taper_radius / sig) ** 2)
            return np.maximum(np.exp(-0.5 * (x / sig) ** 2) - floor, 0.0)
        raise ValueError(f"{self.kind} kernel is not separable")

    def __call__(self, dy, dx) -> np.ndarray:
        """2-d kernel value at vertical offset ``dy`` and horizontal ``dx``."""
        dy = np.asarray(dy, dtype=np.float64)
        dx = np.asarray(dx, dtype=np.float64)
        if self.separable:
            return self.axis(dy, True) * self.axis(dx, False)
        th = math.radians(self.rotation_deg)
        u = math.cos(th) * dx + math.sin(th) * dy
        v = -math.sin(th) * dx + math.cos(th) * dy
        inside = (np.abs(dx) <= self.radius) & (np.abs(dy) <= self.radius)
        return np.exp(-0.5 * ((u / self.sigma_x) ** 2 + (v / self.sigma_y) ** 2)) * inside


def render_kernel(
    kernel: AnalyticKernel, resolution=(200, 200), extent=((-2.0, 2.0), (-2.0, 2.0))
) -> np.ndarray:
    ys = np.linspace(extent[0][0], extent[0][1], resolution[0])
    xs = np.linspace(extent[1][0], extent[1][1], resolution[1])
    return kernel(ys[:, None], xs[None, :])


def _axis_matrix(positions: np.ndarray, n_in: int, fn, radius: float) -> np.ndarray:
    """[len(positions), n_in] weights, replicate boundary, unnormalized."""
    mat = np.zeros((len(positions), n_in))
    for i, g in enumerate(positions):
        lo = math.ceil(g - radius)
        hi = math.floor(g + radius)
        for m in range(lo, hi + 1):
            wgt = float(fn(g - m))
            if wgt != 0.0:
                mat[i, min(max(m, 0), n_in - 1)] += wgt
    return mat


def _as_nchw(image) -> tuple[np.ndarray, tuple]:
    img = np.asarray(image, dtype=np.float64)
    shape = img.shape
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[None]
    elif img.ndim != 4:
        raise DimensionError(f"expected an image of rank 2..4, got shape {shape}")
    return img, shape


def resize(image, kernel: AnalyticKernel, spec: ScaleSpec) -> np.ndarray:
    """Resample onto the projected grid: ``out[n] = sum_m image[m] k(g_n - m)``.

    Replicate boundary. Gaussian weights are renormalized per output pixel.
    Accepts [H,W], [C,H,W] or [N,C,H,W] and returns the same rank.
    """
    img, shape = _as_nchw(image)
    _, _, h, w = img.shape
    gh = grid_axis(h, spec.scale_h, spec.out_h)
    gw = grid_axis(w, spec.scale_w, spec.out_w)
    if kernel.separable:
        ah = _axis_matrix(gh, h, lambda d: kernel.axis(d, True), kernel.radius)
        aw = _axis_matrix(gw, w, lambda d: kernel.axis(d, False), kernel.radius)
        if kernel.kind == "gaussian":
            ah /= ah.sum(axis=1, keepdims=True)
            aw /= aw.sum(axis=1, keepdims=True)
        out = np.einsum("ih,nchw,jw->ncij", ah, img, aw)
    else:
        out = _resize_2d(img, kernel, gh, gw)
    return out.reshape(shape[:-2] + out.shape[-2:])


def _resize_2d(img: np.ndarray, kernel: AnalyticKernel, gh: np.ndarray, gw: np.ndarray) -> np.ndarray:
    _, _, h, w = img.shape
    r = kernel.radius
    span = int(math.floor(2 * r)) + 1
    mh = np.ceil(gh - r).astype(int)[:, None] + np.arange(span)[None, :]  # [H', span]
    mw = np.ceil(gw - r).astype(int)[:, None] + np.arange(span)[None, :]
    dy = gh[:, None] - mh
    dx = gw[:, None] - mw
    wgt = kernel(dy[:, None, :, None], dx[None, :, None, :])  # [H',W',span,span]
    wgt = wgt * ((np.abs(dy) <= r)[:, None, :, None] & (np.abs(dx) <= r)[None, :, None, :])
    wgt /= wgt.sum(axis=(2, 3), keepdims=True)
    rows = np.clip(mh, 0, h - 1)
    cols = np.clip(mw, 0, w - 1)
    patches = img[:, :, rows[:, None, :, None], cols[None, :, None, :]]  # [N,C,H',W',s,s]
    return np.einsum("ncijab,ijab->ncij", patches, wgt)


@dataclass(frozen=True)
class DiscreteConvSpec:
    """Strided cross-correlation. ``padding`` is (top, bottom, left, right)."""

    filter: np.ndarray  # [C_out, C_in, k_h, k_w]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    pad_mode: str = "zero"

    def __post_init__(self) -> None:
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def same_padding(k: int) -> tuple[int, int]:
    """Size-preserving stride-1 padding; the extra pixel of even filters goes after."""
    return ((k - 1) // 2, k // 2)


def pad(x: np.ndarray, padding, mode: str = "zero") -> np.ndarray:
    t, b, l, r = padding
    width = ((0, 0), (0, 0), (t, b), (l, r))
    return np.pad(x, width, mode="constant" if mode == "zero" else "edge")


def correlate(x: np.ndarray, f: np.ndarray, stride=(1, 1)) -> np.ndarray:
    """Valid strided cross-correlation [N,Ci,H,W] x [Co,Ci,kh,kw]."""
    n, ci, h, w = x.shape
    co, ci2, kh, kw = f.shape
    if ci != ci2:
        raise DimensionError(f"conv channel mismatch: input {x.shape}, filter {f.shape}")
    if kh > h or kw > w:
        raise DimensionError(f"filter {f.shape[2:]} larger than padded input {(h, w)}")
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros((n, co, ho, wo), np.result_type(x, f))
    for a in range(kh):
        for b in range(kw):
            patch = x[:, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw]
            out += np.einsum("oc,nchw->nohw", f[:, :, a, b], patch)
    return out


def correlate_grads(
    g: np.ndarray, x: np.ndarray, f: np.ndarray, stride=(1, 1)
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of :func:`correlate` w.r.t. input and filter."""
    _, _, kh, kw = f.shape
    sh, sw = stride
    ho, wo = g.shape[2:]
    gx = np.zeros_like(x)
    gf = np.zeros_like(f)
    for a in range(kh):
        for b in range(kw):
            sl = (
                slice(None),
                slice(None),
                slice(a, a + sh * (ho - 1) + 1, sh),
                slice(b, b + sw * (wo - 1) + 1, sw),
            )
            gx[sl] += np.einsum("oc,nohw->nchw", f[:, :, a, b], g)
            gf[:, :, a, b] = np.einsum("nohw,nchw->oc", g, x[sl])
    return gx, gf


def discrete_conv(x, spec: DiscreteConvSpec) -> np.ndarray:
    """Plain strided conv; output side ``floor((H + pad - k) / stride) + 1``."""
    x, shape = _as_nchw(x)
    f = np.asarray(spec.filter, dtype=np.float64)
    if f.ndim == 2:
        f = f[None, None]
    xp = pad(x, spec.padding, spec.pad_mode)
    out = correlate(xp, f, spec.stride)
    if len(shape) < 4 and f.shape[0] == 1:
        return out.reshape(shape[:-2] + out.shape[-2:])
    return out


def centroid(image) -> tuple[float, float]:
    """Intensity-weighted mean (row, col)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"centroid expects [H,W], got {img.shape}")
    mass = img.sum()
    if not mass > 0:
        raise DegenerateInputError("image has no positive mass")
    ys = np.arange(img.shape[0])
    xs = np.arange(img.shape[1])
    return float((img.sum(axis=1) * ys).sum() / mass), float((img.sum(axis=0) * xs).sum() / mass)


def shift_image(img, shift: Sequence[float]) -> np.ndarray:
    """Bicubic-sample ``img`` at ``(y + dy, x + dx)``; works on [..., H, W]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    ah = _axis_matrix(np.arange(h) + shift[0], h, keys_cubic, 2.0)
    aw = _axis_matrix(np.arange(w) + shift[1], w, keys_cubic, 2.0)
    return np.einsum("ih,...hw,jw->...ij", ah, img, aw)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def shift_and_compare(featmap_a, featmap_b, shift, net_scale: float, crop: int = 2) -> float:
    """Cosine similarity after undoing an input shift on the second map.

    ``featmap_b`` is the response to the input translated by ``shift``
    (dy, dx) input pixels; it is resampled back by ``shift * net_scale``
    and both maps lose ``crop`` border pixels on every side.
    """
    a = np.asarray(featmap_a, dtype=np.float64)
    b = np.asarray(featmap_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h <= 2 * crop or w <= 2 * crop:
        raise DimensionError(f"cropping {crop} px empties a {h}x{w} map")
    back = shift_image(b, (shift[0] * net_scale, shift[1] * net_scale))
    sl = (..., slice(crop, h - crop), slice(crop, w - crop))
    return cosine_similarity(a[sl], back[sl])


def sampled_filter(kernel: AnalyticKernel, k: int) -> np.ndarray:
    """Normalized k x k discrete filter: ``kernel`` at pixel-centered taps.

    Even ``k`` puts the taps at half-integer offsets.
    """
    x = np.arange(k) - (k - 1) / 2
    f = kernel(x[:, None], x[None, :])
    return f / f.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: Optional[float] = None) -> float:
    from skimage.metrics import structural_similarity

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if data_range is None:
        data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
    return float(structural_similarity(a, b, data_range=data_range))
