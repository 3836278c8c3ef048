"""``cconv``: command-line runner for the desk-scale experiments.

Every subcommand writes its artifacts plus ``manifest.json`` into
``--out-dir``. Exit codes: 0 ok, 2 bad flags, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import json
import os
import subprocess
import sys
import traceback
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, experiments, oracles
from . import io as ccio
from .grid import InvalidSpecError, ScaleSpec, as_scale, index_plan, projected_grid
from .internal_net import sample_kernel
from .layer import CCLayer, CCLayerConfig, save_layer
from .oracles import AnalyticKernel
from .tensor import NumericalError, precision
from .trainer import (
    AdamConfig,
    ImitationTask,
    ScaleLaw,
    evaluate_generalization,
    train_imitation,
    write_generalization_csv,
    write_json,
    write_loss_csv,
)

EXIT_OK, EXIT_FLAGS, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class FlagError(ValueError):
    pass


def _version() -> str:
    """``v<version>`` plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: int
    version: str
    started: Optional[str] = None
    finished: Optional[str] = None
    outputs: list[str] = field(default_factory=list)
    error: Optional[str] = None
    exit_code: int = EXIT_OK


class Run:
    """Output directory bookkeeping shared by all subcommands."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out_dir)
        self.deterministic = args.deterministic
        flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        self.manifest = RunManifest(
            args.command,
            json.loads(json.dumps(flags, default=str)),
            args.seed,
            _version(),
            None if self.deterministic else _now(),
        )

    def path(self, name: str) -> Path:
        p = self.out / name
        rel = p.relative_to(self.out).as_posix()
        if rel not in self.manifest.outputs:
            self.manifest.outputs.append(rel)
        return p

    def log(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg, flush=True)

    def finish(self, code: int, error: Optional[str] = None) -> None:
        m = self.manifest
        m.exit_code, m.error = code, error
        m.finished = None if self.deterministic else _now()
        m.outputs = sorted(m.outputs)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            write_json(self.out / "manifest.json", asdict(m))
        except OSError as e:
            print(f"cconv: could not write manifest: {e}", file=sys.stderr)


# helpers --------------------------------------------------------------------


def _parse_pair(text: str, cast=int) -> tuple:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise FlagError(f"expected one value or a pair, got {text!r}")
    try:
        return tuple(cast(p.strip()) for p in parts)
    except ValueError as e:
        raise FlagError(str(e)) from None


def _parse_scale_pair(text: str) -> tuple:
    try:
        return _parse_pair(text, as_scale)
    except InvalidSpecError as e:
        raise FlagError(str(e)) from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise FlagError(f"expected comma-separated integers, got {text!r}") from None


def _oracle(args) -> AnalyticKernel:
    return AnalyticKernel(
        args.oracle,
        sigma_x=args.sigma_x,
        sigma_y=args.sigma_y,
        rotation_deg=args.rotation,
    )


def _image(args) -> np.ndarray:
    """Grayscale float64 input: a PGM/PPM file, or seeded zero-centered noise."""
    if args.image is None:
        return experiments.noise_image(args.image_size, args.seed)
    img = ccio.read_netpbm(args.image).astype(np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _law(args) -> ScaleLaw:
    try:
        return ScaleLaw(args.law, args.lo, args.hi, args.fixed_scale)
    except ValueError as e:
        raise FlagError(str(e)) from None


def _task(args, image) -> ImitationTask:
    if args.iters < 0:
        raise FlagError("--iters must be >= 0")
    adam = AdamConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        decay_steps=args.iters if args.cosine else 0,
    )
    return ImitationTask(image, _oracle(args), _law(args), args.iters, args.seed, adam)


def _layer(args, oracle: AnalyticKernel) -> CCLayer:
    support = args.support or oracle.support
    return CCLayer.create(CCLayerConfig(1, 1, (support, support)), args.seed)


def _write_kernel(run: Run, layer: CCLayer, tag: str) -> None:
    kh, kw = layer.config.support
    img = sample_kernel(layer.params, (200, 200), ((-kh / 2, kh / 2), (-kw / 2, kw / 2)))[0]
    ccio.write_netpbm(run.path(f"kernel_{tag}.pgm"), ccio.normalize_to_unit(img))
    ccio.save_tensor(run.path(f"kernel_{tag}.cct"), img)


# subcommands ----------------------------------------------------------------


def cmd_imitate(run: Run) -> None:
    args = run.args
    image = _image(args)
    task = _task(args, image)
    layer = _layer(args, task.oracle)
    if args.dry_run:
        return
    snaps = set(_int_list(args.snapshots)) | {0, args.iters}
    result = train_imitation(task, layer, snapshot_at=sorted(snaps), diag_dir=run.out)
    for it, params in sorted(result.snapshots.items()):
        _write_kernel(run, layer.with_params(params), f"{it:06d}")
    write_loss_csv(run.path("loss.csv"), result.losses)
    save_layer(result.layer, run.out / "layer")
    run.path("layer.json"), run.path("layer.cckp")
    summary = {
        "config_hash": task.config_hash(),
        "task": task.describe(),
        "train_mse": result.train_mse,
        "final_loss": result.losses[-1] if result.losses else None,
        "kernel_ssim": experiments.kernel_ssim(result.layer, task.oracle),
    }
    write_json(run.path("summary.json"), summary)
    run.log(f"train_mse={result.train_mse:.3e} kernel_ssim={summary['kernel_ssim']}")


def cmd_generalize(run: Run) -> None:
    args = run.args
    if args.n_scales < 0:
        raise FlagError("--n-scales must be >= 0")
    image = _image(args)
    task = _task(args, image)
    layer = _layer(args, task.oracle)
    if args.dry_run:
        return
    result = train_imitation(task, layer, diag_dir=run.out)
    report = evaluate_generalization(
        result.layer,
        task.oracle,
        image,
        args.n_scales,
        (args.lo, args.hi),
        seed=args.seed + 1,
        train_mse=result.train_mse,
    )
    write_loss_csv(run.path("loss.csv"), result.losses)
    write_generalization_csv(run.path("generalization.csv"), report)
    ratio = report.ratio
    verdict = {
        "train_mse": result.train_mse,
        "test_mse": report.mean if report.mses else None,
        "ratio": None if not report.mses else ratio,
        "ranged_ok": bool(ratio <= args.max_ratio) if report.mses else None,
        "law": args.law,
        "n_scales": args.n_scales,
        "config_hash": task.config_hash(),
    }
    write_json(run.path("verdict.json"), verdict)
    run.log(f"train={result.train_mse:.3e} test={verdict['test_mse']} ratio={verdict['ratio']}")


def cmd_misalign(run: Run) -> None:
    args = run.args
    if args.iters < 1:
        raise FlagError("--iters must be >= 1")
    if args.filter_size < 1:
        raise FlagError("--filter-size must be >= 1")
    cfg = experiments.MisalignConfig(
        iters=args.iters,
        filter_size=args.filter_size,
        sigma=args.sigma,
        size=args.size,
        image=args.shape,
        train_iters=args.train_iters,
        seed=args.seed,
    )
    if args.dry_run:
        return
    res = experiments.run_misalignment(cfg)
    with open(run.path("centroids.csv"), "w") as f:
        f.write("path,iter,row,col\n")
        for r in res["centroids"]:
            f.write(f"{r['path']},{r['iter']},{r['row']!r},{r['col']!r}\n")
    for name, img in res["final"].items():
        ccio.write_netpbm(run.path(f"final_{name}.pgm"), ccio.normalize_to_unit(img))
        ccio.save_tensor(run.path(f"final_{name}.cct"), img)
    drift = {k: {"row": v[0], "col": v[1]} for k, v in res["drift"].items()}
    write_json(run.path("drift.json"), {"drift": drift, "config": asdict(cfg)})
    run.log(f"drift discrete={res['drift']['discrete']} cc={res['drift']['cc']}")


def cmd_equivariance(run: Run) -> None:
    args = run.args
    radii = _int_list(args.radii)
    if not radii or any(r < 0 for r in radii):
        raise FlagError("--radii must list non-negative integers")
    cfg = experiments.EquivarianceConfig(
        iters=args.iters, radii=radii, n_eval=args.n_eval, n_seeds=args.n_seeds, seed=args.seed
    )
    if args.dry_run:
        return
    res = experiments.run_equivariance(cfg)
    with open(run.path("similarity.csv"), "w") as f:
        f.write("seed,input,radius,net,similarity\n")
        for r in res["rows"]:
            f.write(f"{r['seed']},{r['input']},{r['radius']},{r['net']},{r['similarity']!r}\n")
    ordering = experiments.equivariance_ordering(res["mean"])
    write_json(
        run.path("equivariance.json"),
        {
            "mean": res["mean"],
            "cc_ge_baseline": ordering,
            "final_loss": {str(k): v for k, v in res["final_loss"].items()},
            "config": asdict(cfg),
        },
    )
    for r in res["mean"]:
        if r["net"] != "target":
            run.log(f"{r['input']:7s} r={r['radius']} {r['net']:8s} {r['similarity']:.4f}")


def cmd_ensemble(run: Run) -> None:
    args = run.args
    if args.n_members < 1:
        raise FlagError("--n-members must be >= 1")
    cfg = experiments.EnsembleConfig(
        n_layers=args.n_layers,
        target=args.target,
        iters=args.iters,
        n_members=args.n_members,
        aggregator=args.aggregator,
        seed=args.seed,
    )
    try:
        Fraction(cfg.target)
    except ValueError:
        raise FlagError(f"bad --target {cfg.target!r}") from None
    if args.dry_run:
        return
    res = experiments.run_ensemble(cfg)
    write_loss_csv(run.path("loss.csv"), res["losses"])
    cfg_dict = asdict(cfg)
    write_json(
        run.path("ensemble.json"),
        {
            "single_mse": res["single_mse"],
            "single_mean": res["single_mean"],
            "ensemble_mse": res["ensemble_mse"],
            "config": cfg_dict,
        },
    )
    run.log(f"single={res['single_mean']:.4e} ensemble={res['ensemble_mse']:.4e}")


def cmd_bench(run: Run) -> None:
    args = run.args
    if args.repeats < 2:
        raise FlagError("--repeats must be >= 2")
    modes = tuple(m for m in args.modes.split(",") if m)
    bad = [m for m in modes if m not in ("standard", "chunked", "rational_fast")]
    if bad:
        raise FlagError(f"unknown modes {bad}")
    cfg = experiments.BenchConfig(
        sizes=_int_list(args.sizes),
        layers=_int_list(args.layers),
        modes=modes,
        channels=args.channels,
        repeats=args.repeats,
        scale=args.scale,
        seed=args.seed,
    )
    if args.dry_run:
        return
    rows = experiments.run_bench(cfg, log=lambda r: run.log(str(r)))
    with open(run.path("bench.csv"), "w") as f:
        f.write("sweep,mode,size,layers,scale,time_ms,peak_bytes,status\n")
        for r in rows:
            timing = "" if args.deterministic else repr(r["time_ms"])
            f.write(
                f"{r['sweep']},{r['mode']},{r['size']},{r['layers']},{r['scale']},"
                f"{timing},{r['peak_bytes']},{r['status']}\n"
            )


def cmd_grid(run: Run) -> None:
    args = run.args
    in_size = _parse_pair(args.in_size)
    scale = _parse_scale_pair(args.scale)
    support = _parse_pair(args.support)
    try:
        spec = ScaleSpec.make(in_size, scale)
        grid = projected_grid(in_size, spec)
        plan = index_plan(grid, support, args.boundary)
    except InvalidSpecError as e:
        raise FlagError(str(e)) from None
    if args.dry_run:
        return

    def fmt(v) -> str:
        return f"{float(v):g}"

    lines = [
        f"out_size {spec.out_h} {spec.out_w}",
        "rows " + " ".join(fmt(v) for v in grid.rows),
        "cols " + " ".join(fmt(v) for v in grid.cols),
    ]
    for k in range(support[0]):
        lines.append(f"row_index[{k}] " + " ".join(str(int(v)) for v in plan.rows[k]))
        lines.append(f"row_dist[{k}] " + " ".join(fmt(v) for v in plan.dist_h[k]))
    for k in range(support[1]):
        lines.append(f"col_index[{k}] " + " ".join(str(int(v)) for v in plan.cols[k]))
        lines.append(f"col_dist[{k}] " + " ".join(fmt(v) for v in plan.dist_w[k]))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    run.path("grid.txt").write_text(text)
    write_json(
        run.path("grid.json"),
        {
            "out_size": [spec.out_h, spec.out_w],
            "rows": [fmt(v) for v in grid.rows],
            "cols": [fmt(v) for v in grid.cols],
            "row_index": plan.rows.tolist(),
            "col_index": plan.cols.tolist(),
        },
    )


# parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_FLAGS)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", default="runs/latest")
    g.add_argument("--precision", choices=("f32", "f64"), default="f32")
    g.add_argument("--deterministic", action="store_true", help="omit timestamps and timings; one thread")
    g.add_argument("--dry-run", action="store_true", help="validate flags and exit")
    g.add_argument("--quiet", action="store_true")
    return p


def _imitation_flags(p: argparse.ArgumentParser, iters: int, law: str) -> None:
    p.add_argument("--image", help="PGM/PPM input; default is seeded zero-centered noise")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument(
        "--oracle", default="bicubic", choices=("bicubic", "bilinear", "box", "gaussian", "tapered_gaussian")
    )
    p.add_argument("--sigma-x", type=float, default=1.0)
    p.add_argument("--sigma-y", type=float, default=2.0)
    p.add_argument("--rotation", type=float, default=45.0, help="gaussian rotation in degrees")
    p.add_argument("--law", default=law, choices=("uniform", "fixed", "single"))
    p.add_argument("--lo", type=float, default=0.3)
    p.add_argument("--hi", type=float, default=1.3)
    p.add_argument("--fixed-scale", default="1/2")
    p.add_argument("--iters", type=int, default=iters)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--no-cosine", dest="cosine", action="store_false", help="constant learning rate")
    p.add_argument("--support", type=int, default=0, help="0: the oracle's support")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="cconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cconv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = add("imitate", cmd_imitate, "train one CC layer to imitate a resizing kernel")
    _imitation_flags(p, 3000, "uniform")
    p.add_argument("--snapshots", default="", help="extra iterations to dump the kernel at, e.g. 100,500")

    p = add("generalize", cmd_generalize, "train, then test on unseen scales")
    _imitation_flags(p, 3000, "uniform")
    p.add_argument("--n-scales", type=int, default=100)
    p.add_argument("--max-ratio", type=float, default=10.0, help="ratio bound for ranged_ok")

    p = add("misalign", cmd_misalign, "repeated even-filter conv vs CC drift")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--filter-size", type=int, default=4)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shape", choices=("cross", "impulse"), default="cross")
    p.add_argument("--train-iters", type=int, default=400)

    p = add("equivariance", cmd_equivariance, "toy strided vs gradual-CC shift similarity")
    p.add_argument("--radii", default="2,4,6")
    p.add_argument("--iters", type=int, default=experiments.EquivarianceConfig.iters)
    p.add_argument("--n-eval", type=int, default=experiments.EquivarianceConfig.n_eval)
    p.add_argument("--n-seeds", type=int, default=experiments.EquivarianceConfig.n_seeds)

    p = add("ensemble", cmd_ensemble, "scale-chain ensembles vs single chains")
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--target", default="1/2")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--n-members", type=int, default=3)
    p.add_argument("--aggregator", choices=("mean", "median"), default="mean")

    p = add("bench", cmd_bench, "runtime and tracked memory per mode")
    p.add_argument("--sizes", default="32,64,96,128")
    p.add_argument("--layers", default="1,2,4,8")
    p.add_argument("--modes", default="standard,chunked,rational_fast")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--scale", default="2/3")
    p.add_argument("--repeats", type=int, default=11)

    p = add("grid", cmd_grid, "print the projected grid and index plan")
    p.add_argument("--in-size", default="8", help="N or HxW")
    p.add_argument("--scale", default="1/2", help="s or sh,sw")
    p.add_argument("--support", default="3", help="k or kh,kw")
    p.add_argument("--boundary", choices=("replicate", "zero", "reflect"), default="replicate")
    return parser


def _threads(args) -> Optional[int]:
    if args.deterministic or args.command == "bench":
        return 1
    env = os.environ.get("CCONV_THREADS")
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise FlagError(f"CCONV_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise FlagError("CCONV_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args)
    code, error = EXIT_OK, None
    try:
        n = _threads(args)
        limits = threadpool_limits(n) if n else contextlib.nullcontext()
        if not args.dry_run:
            run.out.mkdir(parents=True, exist_ok=True)
        with limits, precision(args.precision):
            args.func(run)
    except FlagError as e:
        code, error = EXIT_FLAGS, f"flag error: {e}"
    except NumericalError as e:
        code, error = EXIT_NUMERIC, f"numeric failure: {e}"
    except (OSError, ccio.FormatError) as e:
        code, error = EXIT_IO, f"I/O error: {e}"
    except Exception as e:  # noqa: BLE001 - recorded in the manifest, then re-raised
        run.finish(1, "".join(traceback.format_exception_only(type(e), e)).strip())
        raise
    if error:
        print(f"cconv: {error}", file=sys.stderr)
    run.finish(code, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
