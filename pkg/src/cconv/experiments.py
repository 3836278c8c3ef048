"""Desk-scale experiments: misalignment, shift equivariance, benchmarks.

Each runner returns plain dicts/arrays; the CLI decides what to write.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import oracles
from .grid import ScaleSpec, chain_output_shapes, resolve_indices
from .layer import CCLayer, CCLayerConfig, forward, strided_conv
from .oracles import AnalyticKernel, DiscreteConvSpec
from .tensor import Tape, Tensor, conv1x1, leaky_relu, memory, mse, no_grad, sum_, take
from .grid import sample_scale_chain
from .internal_net import sample_kernel
from .trainer import (
    AdamConfig,
    AdamState,
    ImitationTask,
    ScaleLaw,
    adam_step,
    ensemble_forward,
    run_chain,
    train_imitation,
)

# images ---------------------------------------------------------------------


def noise_image(size=64, seed=0) -> np.ndarray:
    """Zero-centered uniform white noise in [-0.5, 0.5]."""
    return np.random.default_rng(seed).uniform(-0.5, 0.5, (size, size))


def camera_image(size=64) -> np.ndarray:
    """The skimage cameraman, block-averaged to ``size`` and scaled to [0, 1]."""
    from skimage import data

    cam = data.camera().astype(np.float64) / 255.0
    f = cam.shape[0] // size
    return cam[: f * size, : f * size].reshape(size, f, size, f).mean(axis=(1, 3))


def texture_image(
    size, rng: np.random.Generator, n_waves: int = 6, theta: Optional[float] = None
) -> np.ndarray:
    """Sum of sinusoidal gratings, unit variance.

    Orientations are uniform, or jittered by up to pi/16 around ``theta``.
    """
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(n_waves):
        if theta is None:
            theta_i = rng.uniform(0, np.pi)
        else:
            theta_i = theta + rng.uniform(-np.pi / 16, np.pi / 16)
        freq = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.5, 1.0) * np.cos(
            2 * np.pi * freq * (np.cos(theta_i) * x + np.sin(theta_i) * y) + phase
        )
    return (img - img.mean()) / img.std()


def white_cross(size=64, arm=2) -> np.ndarray:
    img = np.zeros((size, size))
    c = size // 2
    img[c, c - arm : c + arm + 1] = 1.0
    img[c - arm : c + arm + 1, c] = 1.0
    return img


def impulse(size=64) -> np.ndarray:
    img = np.zeros((size, size))
    img[size // 2, size // 2] = 1.0
    return img


def kernel_ssim(layer: CCLayer, oracle: AnalyticKernel, resolution=(200, 200)) -> float:
    """SSIM between the sampled learned kernel and the analytic one on the support box."""
    kh, kw = layer.config.support
    extent = ((-kh / 2, kh / 2), (-kw / 2, kw / 2))
    learned = sample_kernel(layer.params, resolution, extent)[0]
    return oracles.ssim(learned, oracles.render_kernel(oracle, resolution, extent))


# misalignment ---------------------------------------------------------------


@dataclass(frozen=True)
class MisalignConfig:
    iters: int = 20
    filter_size: int = 4
    sigma: float = 1.0
    size: int = 64
    image: str = "cross"  # or "impulse"
    train_iters: int = 400
    train_size: int = 32
    seed: int = 0


def misalign_kernel(cfg: MisalignConfig) -> AnalyticKernel:
    return AnalyticKernel(
        "tapered_gaussian", sigma_x=cfg.sigma, sigma_y=cfg.sigma, taper_radius=cfg.filter_size / 2
    )


def fit_scale1_layer(cfg: MisalignConfig) -> CCLayer:
    """CC layer taught to reproduce the tapered Gaussian at scale 1 (float64)."""
    from .tensor import precision

    kernel = misalign_kernel(cfg)
    support = (cfg.filter_size, cfg.filter_size)
    with precision("f64"):
        layer = CCLayer.create(CCLayerConfig(1, 1, support), cfg.seed)
        task = ImitationTask(
            noise_image(cfg.train_size, cfg.seed),
            kernel,
            ScaleLaw("fixed", fixed="1"),
            cfg.train_iters,
            cfg.seed,
            AdamConfig(lr=1e-2, weight_decay=0.0, decay_steps=cfg.train_iters),
        )
        return train_imitation(task, layer).layer


def run_misalignment(cfg: MisalignConfig, layer: Optional[CCLayer] = None) -> dict:
    """Apply the even discrete filter and the CC layer ``iters`` times each.

    Returns per-iteration centroids (row, col) for both paths plus the
    final images. Drift is the centroid displacement from the start.
    """
    if cfg.iters < 1:
        raise ValueError("iters must be >= 1")
    img = impulse(cfg.size) if cfg.image == "impulse" else white_cross(cfg.size)
    k = cfg.filter_size
    filt = oracles.sampled_filter(misalign_kernel(cfg), k)
    pad = oracles.same_padding(k) + oracles.same_padding(k)
    spec = DiscreteConvSpec(filt, padding=pad)
    layer = layer or fit_scale1_layer(cfg)
    unit = ScaleSpec.make((cfg.size, cfg.size), 1)

    disc, cc = img, Tensor(img[None, None].astype(layer.params.weights[0].dtype))
    rows = [("discrete",) + oracles.centroid(disc) + (0,), ("cc",) + oracles.centroid(img) + (0,)]
    with no_grad():
        for i in range(1, cfg.iters + 1):
            disc = oracles.discrete_conv(disc, spec)
            cc = forward(layer, cc, unit)
            rows.append(("discrete",) + oracles.centroid(disc) + (i,))
            rows.append(("cc",) + oracles.centroid(cc.data[0, 0]) + (i,))
    start = oracles.centroid(img)

    def drift(path):
        last = [r for r in rows if r[0] == path][-1]
        return (last[1] - start[0], last[2] - start[1])

    return {
        "centroids": [{"path": p, "iter": i, "row": r, "col": c} for p, r, c, i in rows],
        "drift": {"discrete": drift("discrete"), "cc": drift("cc")},
        "final": {"discrete": disc, "cc": np.asarray(cc.data[0, 0], np.float64)},
        "filter": filt,
    }


# shift equivariance ---------------------------------------------------------


@dataclass(frozen=True)
class EquivarianceConfig:
    size: int = 32
    channels: int = 8
    support: int = 5
    iters: int = 1000
    batch: int = 4
    lr: float = 3e-4
    target_sigma: float = 1.0
    radii: tuple = (2, 4, 6)
    n_eval: int = 16
    eval_size: int = 64
    down_kernel: int = 3
    n_classes: int = 4
    scale_jitter: float = 0.15
    context: int = 16
    n_seeds: int = 3
    seed: int = 0


def _pad_replicate(x: Tensor, padding) -> Tensor:
    t, b, l, r = padding
    h, w = x.shape[2:]
    rows, _ = resolve_indices(np.arange(-t, h + b), h, "replicate")
    cols, _ = resolve_indices(np.arange(-l, w + r), w, "replicate")
    return take(take(x, rows, axis=2), cols, axis=3)


class _ToyNet:
    """Three feature layers, then LeakyReLU, a 1x1 readout and global pooling.

    Shift similarity is measured on ``features`` (the last conv layer's
    output); the training signal only sees the pooled class scores.
    """

    def __init__(self, channels: int, rng: np.random.Generator, n_classes: int = 4, dtype=np.float32):
        std = math.sqrt(1.0 / channels)
        self.readout = [
            Tensor(rng.normal(0, std, (n_classes, channels)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(n_classes, dtype), requires_grad=True),
        ]

    def body_params(self) -> list[Tensor]:
        raise NotImplementedError

    def set_body_params(self, arrays) -> None:
        raise NotImplementedError

    def params(self) -> list[Tensor]:
        return self.body_params() + self.readout

    def set_params(self, arrays) -> None:
        self.set_body_params(arrays[:-2])
        self.readout = [Tensor(a, requires_grad=True) for a in arrays[-2:]]

    n_stages = 3

    def plan(self, in_size) -> list:
        """Per-stage static arguments for an input of ``in_size``."""
        return [None] * self.n_stages

    def stage(self, i: int, x: Tensor, arg) -> Tensor:
        raise NotImplementedError

    def scale_stage(self, i: int, c: float) -> None:
        raise NotImplementedError

    def features(self, x: Tensor) -> Tensor:
        for i, arg in enumerate(self.plan(x.shape[2:])):
            if i:
                x = leaky_relu(x)
            x = self.stage(i, x, arg)
        return x

    def calibrate(self, batch: np.ndarray) -> None:
        """Rescale each stage so its output has unit second moment on ``batch``."""
        with no_grad():
            x = Tensor(batch)
            for i, arg in enumerate(self.plan(x.shape[2:])):
                if i:
                    x = leaky_relu(x)
                y = self.stage(i, x, arg)
                c = 1.0 / math.sqrt(float(np.mean(y.data.astype(np.float64) ** 2)))
                self.scale_stage(i, c)
                x = Tensor(y.data * c)

    def __call__(self, x: Tensor) -> Tensor:
        """Class scores [B, n_classes]."""
        y = conv1x1(leaky_relu(self.features(x)), *self.readout)
        h, w = y.shape[2:]
        return sum_(y, axis=(2, 3)) * (1.0 / (h * w))


class StridedNet(_ToyNet):
    """conv3x3 -> conv kxk/stride 2 -> conv3x3, LeakyReLU between."""

    def __init__(
        self, channels: int, rng: np.random.Generator, down_kernel: int = 3, n_classes: int = 4, dtype=np.float32
    ):
        self.layout = ((3, 1), (down_kernel, 2), (3, 1))
        chans = [1, channels, channels, channels]
        self.filters = []
        for (k, _), ci, co in zip(self.layout, chans[:-1], chans[1:]):
            std = math.sqrt(2.0 / (ci * k * k))
            self.filters.append(Tensor(rng.normal(0, std, (co, ci, k, k)).astype(dtype), requires_grad=True))
        super().__init__(channels, rng, n_classes, dtype)

    def body_params(self) -> list[Tensor]:
        return list(self.filters)

    def set_body_params(self, arrays) -> None:
        self.filters = [Tensor(a, requires_grad=True) for a in arrays]

    def stage(self, i: int, x: Tensor, arg) -> Tensor:
        k, s = self.layout[i]
        return strided_conv(_pad_replicate(x, oracles.same_padding(k) * 2), self.filters[i], (s, s))

    def scale_stage(self, i: int, c: float) -> None:
        self.filters[i] = Tensor(self.filters[i].data * c, requires_grad=True)


class GradualCCNet(_ToyNet):
    """Three CC layers at ``2^(-1/3)`` each; the last lands exactly on in/2."""

    scale = 2.0 ** (-1.0 / 3.0)

    def __init__(self, channels: int, support: int, rng: np.random.Generator, n_classes: int = 4):
        chans = [1, channels, channels, channels]
        self.layers = [
            CCLayer.create(CCLayerConfig(ci, co, (support, support)), rng)
            for ci, co in zip(chans[:-1], chans[1:])
        ]
        super().__init__(channels, rng, n_classes)
        self.train_scales: Optional[list[float]] = None

    def jitter(self, rng: np.random.Generator, amount: float) -> None:
        """Draw per-layer training scales ``2^(-1/3) * exp(U(-amount, amount))``."""
        self.train_scales = list(self.scale * np.exp(rng.uniform(-amount, amount, 3)))

    def plan(self, in_size: tuple[int, int]) -> list[ScaleSpec]:
        if self.train_scales is not None:
            specs = []
            for sc in self.train_scales:
                specs.append(ScaleSpec.make(in_size, float(sc)))
                in_size = specs[-1].out_size
            return specs
        s = Fraction(self.scale)
        shapes = chain_output_shapes(in_size, [(s, s)] * 3, (Fraction(1, 2), Fraction(1, 2)))
        return [ScaleSpec(self.scale, self.scale, h, w) for h, w in shapes]

    def body_params(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.params.tensors()]

    def set_body_params(self, arrays) -> None:
        i = 0
        for j, layer in enumerate(self.layers):
            n = len(layer.params.tensors())
            self.layers[j] = layer.with_params(layer.params.replace(arrays[i : i + n]))
            i += n

    def stage(self, i: int, x: Tensor, spec) -> Tensor:
        return forward(self.layers[i], x, spec)

    def scale_stage(self, i: int, c: float) -> None:
        # the kernel is linear in the last stage's weights and biases
        p = self.layers[i].params
        arrays = p.arrays()
        arrays[-2:] = [a * c for a in arrays[-2:]]
        self.layers[i] = self.layers[i].with_params(p.replace(arrays))


class TargetNet:
    """Anti-aliased half-size resampling, as a reference row."""

    def __init__(self, sigma: float):
        self.sigma = sigma

    def features(self, x: Tensor) -> Tensor:
        return Tensor(_target(x.data.astype(np.float64), self.sigma))


def _target(batch: np.ndarray, sigma: float) -> np.ndarray:
    kernel = AnalyticKernel("gaussian", sigma_x=sigma, sigma_y=sigma, rotation_deg=0.0)
    n = batch.shape[-1]
    return oracles.resize(batch, kernel, ScaleSpec.make((n, n), Fraction(1, 2)))


def _train_batch(cfg: EquivarianceConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Textures whose dominant orientation is one of ``n_classes`` bins."""
    labels = rng.integers(cfg.n_classes, size=cfg.batch)
    imgs = [texture_image(cfg.size, rng, 3, np.pi * c / cfg.n_classes) for c in labels]
    onehot = np.eye(cfg.n_classes, dtype=np.float32)[labels]
    return np.stack(imgs)[:, None].astype(np.float32), onehot


def train_toy(
    net, cfg: EquivarianceConfig, rng: np.random.Generator, scale_rng: Optional[np.random.Generator] = None
) -> list[float]:
    """Orientation classification; pooled scores regress onto one-hot labels.

    CC nets draw jittered layer scales from ``scale_rng`` each iteration, so
    the data stream stays identical across nets.
    """
    adam = AdamConfig(lr=cfg.lr, weight_decay=0.0, decay_steps=cfg.iters)
    state = AdamState.zeros([p.data for p in net.params()], adam)
    net.calibrate(_train_batch(cfg, rng)[0])
    losses = []
    for _ in range(cfg.iters):
        batch, onehot = _train_batch(cfg, rng)
        if cfg.scale_jitter and hasattr(net, "jitter"):
            net.jitter(scale_rng or np.random.default_rng(), cfg.scale_jitter)
        params = net.params()
        with Tape() as tape:
            loss = mse(net(Tensor(batch)), onehot)
        grads = tape.gradient(loss, params)
        state, new = adam_step(state, [p.data for p in params], grads)
        net.set_params(new)
        losses.append(float(loss.data))
    if hasattr(net, "jitter"):
        net.train_scales = None
    return losses


def _shifts(radius: int, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    pts = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if 0 < dy * dy + dx * dx <= radius * radius
    ]
    if not pts:
        return [(0, 0)] * n
    return [pts[i] for i in rng.integers(len(pts), size=n)]


def shift_similarity(
    net, canvases: Sequence[np.ndarray], size: int, radius: int, rng, context: int = 0
) -> float:
    """Mean cosine similarity between f(x) and shifted-back f(shift(x)).

    ``context`` extra input pixels surround each compared window; the matching
    output border is cropped so padding effects stay out of the comparison.
    """
    win = size + 2 * context
    margin = (canvases[0].shape[0] - win) // 2
    sims = []
    for canvas, (dy, dx) in zip(canvases, _shifts(radius, len(canvases), rng)):
        a = canvas[margin : margin + win, margin : margin + win]
        # content moves by +(dy, dx)
        b = canvas[margin - dy : margin - dy + win, margin - dx : margin - dx + win]
        with no_grad():
            fa = net.features(Tensor(a[None, None].astype(np.float32))).data[0]
            fb = net.features(Tensor(b[None, None].astype(np.float32))).data[0]
        sims.append(oracles.shift_and_compare(fa, fb, (dy, dx), 0.5, crop=2 + context // 2))
    return float(np.mean(sims))


def _equivariance_trial(cfg: EquivarianceConfig, seed: int) -> tuple[list[dict], dict]:
    nets = {
        "baseline": StridedNet(cfg.channels, np.random.default_rng([seed, 0]), cfg.down_kernel, cfg.n_classes),
        "cc": GradualCCNet(cfg.channels, cfg.support, np.random.default_rng([seed, 1]), cfg.n_classes),
    }
    losses = {
        name: train_toy(net, cfg, np.random.default_rng([seed, 2]), np.random.default_rng([seed, 5]))
        for name, net in nets.items()
    }
    nets["target"] = TargetNet(cfg.target_sigma)
    big = cfg.eval_size + 2 * (cfg.context + max(cfg.radii))
    eval_rng = np.random.default_rng([seed, 3])
    inputs = {
        "texture": [texture_image(big, eval_rng) for _ in range(cfg.n_eval)],
        "noise": [eval_rng.normal(0, 1, (big, big)) for _ in range(cfg.n_eval)],
    }
    rows = []
    for kind, canvases in inputs.items():
        for radius in (0,) + tuple(cfg.radii):
            for name, net in nets.items():
                rng = np.random.default_rng([seed, 4, radius])
                sim = shift_similarity(net, canvases, cfg.eval_size, radius, rng, cfg.context)
                rows.append({"seed": seed, "input": kind, "radius": radius, "net": name, "similarity": sim})
    return rows, losses


def run_equivariance(cfg: EquivarianceConfig) -> dict:
    """Train and measure ``n_seeds`` independent net pairs.

    ``rows`` holds the per-seed similarities; ``mean`` averages them per
    (input, radius, net) and is what the ordering claim is judged on.
    """
    rows, losses = [], {}
    for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
        r, l = _equivariance_trial(cfg, seed)
        rows += r
        losses[seed] = l
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row["input"], row["radius"], row["net"]), []).append(row["similarity"])
    mean = [
        {"input": k[0], "radius": k[1], "net": k[2], "similarity": float(np.mean(v))}
        for k, v in groups.items()
    ]
    final = {seed: {k: v[-1] for k, v in l.items()} for seed, l in losses.items()}
    return {"rows": rows, "mean": mean, "final_loss": final, "losses": losses}


def equivariance_ordering(mean_rows: list[dict]) -> dict:
    """Per (input, radius): does the CC net match or beat the baseline?"""
    sims = {(r["input"], r["radius"], r["net"]): r["similarity"] for r in mean_rows}
    return {
        f"{kind}/r{radius}": sims[(kind, radius, "cc")] >= sims[(kind, radius, "baseline")]
        for kind, radius, net in sims
        if net == "cc" and radius > 0
    }


# scale ensembles ------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    n_layers: int = 2
    channels: int = 4
    support: int = 4
    target: str = "1/2"
    size: int = 32
    iters: int = 300
    lr: float = 3e-3
    sd: float = 0.05
    max_den: int = 10
    n_members: int = 3
    n_eval: int = 8
    aggregator: str = "mean"
    sigma: float = 1.0
    seed: int = 0


def _ensemble_target(x: np.ndarray, cfg: EnsembleConfig) -> np.ndarray:
    kernel = AnalyticKernel("gaussian", sigma_x=cfg.sigma, sigma_y=cfg.sigma, rotation_deg=0.0)
    return oracles.resize(x, kernel, ScaleSpec.make(x.shape[-2:], Fraction(cfg.target)))


def run_ensemble(cfg: EnsembleConfig) -> dict:
    """Train a CC chain under random scale chains, then compare ensembles to single chains.

    The chain regresses a Gaussian downscaling of white noise by ``target``.
    Returns per-member MSEs, their mean, and the aggregated ensemble MSE.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    chans = [1] + [cfg.channels] * (cfg.n_layers - 1) + [1]
    layers = [
        CCLayer.create(CCLayerConfig(ci, co, (cfg.support,) * 2), rng) for ci, co in zip(chans[:-1], chans[1:])
    ]
    target = Fraction(cfg.target)
    mean_scale = float(target) ** (1.0 / cfg.n_layers)
    size = (cfg.size, cfg.size)
    state = AdamState.zeros(
        [a for l in layers for a in l.params.arrays()], AdamConfig(lr=cfg.lr, weight_decay=0.0, decay_steps=cfg.iters)
    )
    losses = []
    for _ in range(cfg.iters):
        x = rng.normal(0.0, 1.0, (1, 1) + size)
        chain = sample_scale_chain(cfg.n_layers, target, mean_scale, cfg.sd, cfg.max_den, rng, size)
        params = [t for l in layers for t in l.params.tensors()]
        with Tape() as tape:
            loss = mse(run_chain(layers, Tensor(x.astype(np.float32)), chain), _ensemble_target(x, cfg).astype(np.float32))
        grads = tape.gradient(loss, params)
        state, new = adam_step(state, [p.data for p in params], grads)
        i = 0
        for j, l in enumerate(layers):
            n = len(l.params.tensors())
            layers[j] = l.with_params(l.params.replace(new[i : i + n]))
            i += n
        losses.append(float(loss.data))
    eval_rng = np.random.default_rng([cfg.seed, 1])
    single, ens = [], []
    for _ in range(cfg.n_eval):
        x = eval_rng.normal(0.0, 1.0, (1, 1) + size)
        y = _ensemble_target(x, cfg)
        chains = [
            sample_scale_chain(cfg.n_layers, target, mean_scale, cfg.sd, cfg.max_den, eval_rng, size)
            for _ in range(cfg.n_members)
        ]
        xt = Tensor(x.astype(np.float32))
        for c in chains:
            with no_grad():
                single.append(float(np.mean((run_chain(layers, xt, c).data - y) ** 2)))
        out = ensemble_forward(layers, xt, target, cfg.n_members, aggregator=cfg.aggregator, chains=chains)
        ens.append(float(np.mean((out - y) ** 2)))
    return {
        "losses": losses,
        "single_mse": single,
        "single_mean": float(np.mean(single)),
        "ensemble_mse": float(np.mean(ens)),
        "layers": layers,
    }


# benchmarks -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    sizes: tuple = (32, 64, 96, 128)
    layers: tuple = (1, 2, 4, 8)
    modes: tuple = ("standard", "chunked", "rational_fast")
    channels: int = 32
    support: int = 3
    scale: str = "2/3"
    layer_size: int = 32
    batch: int = 1
    repeats: int = 11
    chunk: int = 32
    budget_gib: float = 3.0
    seed: int = 0


def estimate_bytes(mode: str, size: int, c: int, k: int, scale: Fraction, chunk: int, n_layers: int = 1) -> int:
    """Rough upper bound on the largest live buffers of one forward+backward."""
    out = math.ceil(scale * size)
    per = c * c * k * k * 4
    if mode == "rational_fast":
        return 4 * c * size * size * 4 * n_layers
    pts = min(out, chunk) ** 2 if mode == "chunked" else out * out
    return 4 * per * pts * (1 if mode == "chunked" else n_layers)


def time_layers(mode: str, size: int, n_layers: int, cfg: BenchConfig, scale) -> dict:
    """Forward+backward through ``n_layers`` CC layers; drop the first run."""
    if cfg.repeats < 2:
        raise ValueError("repeats must be >= 2 (the first run is discarded)")
    rng = np.random.default_rng(cfg.seed)
    layers = [
        CCLayer.create(
            CCLayerConfig(cfg.channels, cfg.channels, (cfg.support,) * 2, mode=mode, chunk=(cfg.chunk,) * 2),
            rng,
        )
        for _ in range(n_layers)
    ]
    x = Tensor(rng.normal(size=(cfg.batch, cfg.channels, size, size)).astype(np.float32), requires_grad=True)
    times = []
    memory.reset_peak()
    base = memory.current
    for _ in range(cfg.repeats):
        t0 = time.perf_counter()
        with Tape() as tape:
            y = x
            for layer in layers:
                h = y.shape[2]
                y = forward(layer, y, ScaleSpec.make((h, h), scale))
            loss = mse(y, 0.0)
        tape.backward(loss)
        times.append(time.perf_counter() - t0)
        del tape, y, loss
    return {
        "time_ms": 1000.0 * float(np.mean(times[1:])),
        "peak_bytes": int(memory.peak - base),
        "status": "ok",
    }


def run_bench(cfg: BenchConfig, log=None) -> list[dict]:
    """Size sweep (one layer at ``cfg.scale``) and depth sweep (scale 1)."""
    rows = []
    budget = cfg.budget_gib * 2**30
    plan = [("size", s, 1, Fraction(cfg.scale)) for s in cfg.sizes]
    plan += [("layers", cfg.layer_size, n, Fraction(1)) for n in cfg.layers]
    for sweep, size, n, scale in plan:
        for mode in cfg.modes:
            est = estimate_bytes(mode, size, cfg.channels, cfg.support, scale, cfg.chunk, n)
            row = {"sweep": sweep, "mode": mode, "size": size, "layers": n, "scale": str(scale)}
            if est > budget:
                row.update(time_ms=float("nan"), peak_bytes=-1, status="OUT OF MEMORY")
            else:
                row.update(time_layers(mode, size, n, cfg, scale))
            if log:
                log(row)
            rows.append(row)
    return rows
