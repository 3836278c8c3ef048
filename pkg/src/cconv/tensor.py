"""Dense tensors with tape-based reverse-mode autodiff.

The op set is deliberately small: exactly what the CC layer, its fast
paths and the trainer need. Values are immutable numpy buffers; gradients
are produced by replaying a :class:`Tape` in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import constants


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward requested for a value that was not recorded."""


class NumericalError(ArithmeticError):
    """A non-finite value was detected."""


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(constants.DEFAULT_DTYPE)
        self.tapes: list[Tape] = []


_state = _State()


def default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    if isinstance(dtype, str):
        dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    old = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class MemoryTracker:
    """Counts bytes owned by live tensors plus gradient buffers during backward.

    This is a deterministic stand-in for a device allocator's peak counter.
    """

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0
        self._lock = threading.Lock()

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.current += nbytes
            if self.current > self.peak:
                self.peak = self.current

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current


memory = MemoryTracker()


class Tensor:
    """Immutable dense float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _pick_dtype(data), copy=True)
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        # Tensor buffers are read-only, so a writeable root buffer can only be
        # a fresh op result: count it once and freeze it.
        root = arr
        while isinstance(root.base, np.ndarray):
            root = root.base
        self._tracked = 0
        if root.flags.writeable:
            self._tracked = root.nbytes
            root.flags.writeable = False
            memory.alloc(self._tracked)
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t._init(arr, requires_grad)
        return t

    def __del__(self) -> None:
        if getattr(self, "_tracked", 0):
            memory.free(self._tracked)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)


def _pick_dtype(data) -> np.dtype:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return _state.dtype


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    name: str = ""


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; every op whose inputs require grad is
    appended while the tape is active. :meth:`backward` replays the record
    in reverse and can be called repeatedly.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def gradient(
        self, output: Tensor, sources: Sequence[Tensor], grad: Optional[np.ndarray] = None
    ) -> list[np.ndarray]:
        """Gradients of ``output`` w.r.t. ``sources`` (zeros where unreachable)."""
        grads = self._run(output, grad)
        return [
            grads.get(id(s), np.zeros(s.shape, s.dtype)) for s in sources
        ]

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf reached from ``output``."""
        grads = self._run(output, grad)
        produced = {id(n.out) for n in self.nodes}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) in grads:
                    t.grad = grads[id(t)]

    def _run(self, output: Tensor, grad: Optional[np.ndarray]) -> dict[int, np.ndarray]:
        if not any(n.out is output for n in self.nodes):
            raise TapeError("output was not produced on this tape; run forward inside it")
        if grad is None:
            if output.data.size != 1:
                raise TapeError("non-scalar output needs an explicit upstream grad")
            grad = np.ones(output.shape, output.dtype)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, output.dtype)}
        memory.alloc(grads[id(output)].nbytes)
        leaves: dict[int, np.ndarray] = {}
        produced = {id(n.out) for n in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            memory.free(g.nbytes)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if ig.shape != t.shape:
                    raise DimensionError(
                        f"{node.name}: grad shape {ig.shape} != input shape {t.shape}"
                    )
                key = id(t)
                store = grads if key in produced else leaves
                if key in store:
                    store[key] = store[key] + ig
                else:
                    store[key] = ig
                    memory.alloc(ig.nbytes)
        for g in grads.values():
            memory.free(g.nbytes)
        for g in leaves.values():
            memory.free(g.nbytes)
        return leaves


def apply_op(
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    name: str = "",
) -> Tensor:
    """Wrap a freshly computed array and record it on the active tape.

    This is the extension point for ops defined outside this module.
    """
    recording = bool(_state.tapes) and _state.tapes[-1] is not None
    needs = recording and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        _state.tapes[-1].nodes.append(Node(result, tuple(inputs), backward, name))
    return result


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    _state.tapes.append(None)
    try:
        yield
    finally:
        _state.tapes.pop()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def leaky_relu(x: Tensor, slope: float = constants.LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return apply_op(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def elementwise(op: str, a, b=None, *, slope: float = constants.LEAKY_SLOPE) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``leaky_relu``."""
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    fn = {"add": add, "sub": sub, "mul": mul}[op]
    return fn(a, b)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return apply_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sum_(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return apply_op(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return mul(sum_(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return apply_op(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape"
    )


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return apply_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only, so backward needs no scatter-add."""
    x = as_tensor(x)
    idx = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in idx):
        raise TypeError("getitem supports basic slicing only; use take()")

    def backward(g):
        gx = np.zeros(x.shape, x.dtype)
        gx[index] = g
        return (gx,)

    return apply_op(np.array(x.data[index]), (x,), backward, "getitem")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices scatter-add on backward."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise IndexError(f"take index out of range for axis of size {x.shape[axis]}")

    def backward(g):
        gx = np.zeros(x.shape, x.dtype)
        sel = [slice(None)] * x.ndim
        sel[axis] = indices
        np.add.at(gx, tuple(sel), g)
        return (gx,)

    return apply_op(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        out = []
        for i in range(len(xs)):
            sel = [slice(None)] * g.ndim
            sel[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(sel)]))
        return out

    return apply_op(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine map over channels: [B,Ci,H,W] -> [B,Co,H,W]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv1x1 expects x[B,Ci,H,W], w[Co,Ci], b[Co]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    b_, ci, h, w = x.shape
    if weight.shape[1] != ci:
        raise DimensionError(f"conv1x1 channel mismatch: input {ci}, weight {weight.shape}")
    co = weight.shape[0]
    flat = x.data.reshape(b_, ci, h * w)
    # f64 accumulation keeps each pixel's channel sum independent of how
    # many pixels BLAS sees at once (tiles must match the full map).
    acc = np.matmul(weight.data.astype(np.float64), flat.astype(np.float64))
    out = (acc + bias.data[:, None]).astype(x.dtype, copy=False)

    def backward(g):
        g = g.reshape(b_, co, h * w)
        gx = np.matmul(weight.data.T, g).reshape(x.shape)
        gw = np.tensordot(g, flat, axes=([0, 2], [0, 2]))
        gb = g.sum(axis=(0, 2))
        return gx, gw.astype(weight.dtype), gb.astype(bias.dtype)

    return apply_op(out.reshape(b_, co, h, w), (x, weight, bias), backward, "conv1x1")


def _selection_matrix(idx: np.ndarray, valid: Optional[np.ndarray], n: int, dtype) -> np.ndarray:
    """One-hot [k*out, n] matrix whose rows pick (and optionally zero) sources."""
    flat = idx.reshape(-1)
    sel = np.zeros((flat.size, n), dtype)
    sel[np.arange(flat.size), flat] = 1.0 if valid is None else valid.reshape(-1)
    return sel


def gather_neighbors(x: Tensor, plan) -> Tensor:
    """Copy-gather the support window of every output point.

    ``plan`` supplies separable, boundary-resolved ``rows`` [k_h, H'] and
    ``cols`` [k_w, W'] plus optional validity masks (zero padding).
    Result shape is [N, 1, C, k_h*k_w, H', W'].
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"gather_neighbors expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    rows, cols = plan.rows, plan.cols
    if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
        raise AssertionError("IndexPlan contract broken: index out of range")
    kh, ho = rows.shape
    kw, wo = cols.shape
    out = x.data[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    mask = plan.mask
    if mask is not None:
        out = out * mask.astype(x.dtype)
    out = out.reshape(n, 1, c, kh * kw, ho, wo)

    def backward(g):
        g = g.reshape(n, c, kh, kw, ho, wo)
        sel_w = _selection_matrix(cols, plan.col_valid, w, x.dtype)  # [kw*wo, w]
        sel_h = _selection_matrix(rows, plan.row_valid, h, x.dtype)  # [kh*ho, h]
        t = g.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, kh * ho, kw * wo)
        t = np.matmul(t, sel_w)  # [n, c, kh*ho, w]
        gx = np.matmul(sel_h.T, t)  # [n, c, h, w]
        return (gx,)

    return apply_op(out, (x,), backward, "gather_neighbors")


def contract_weights(neighbors: Tensor, weights: Tensor) -> Tensor:
    """Sum over input channels and neighbors of neighbors*weights.

    neighbors [N,1,Ci,K,H',W'] and weights [1,Co,Ci,K,H',W'] give
    [N,Co,H',W']. Accumulation order is fixed (channel outer, neighbor
    inner) so results do not depend on how the output is tiled.
    """
    neighbors, weights = as_tensor(neighbors), as_tensor(weights)
    if neighbors.ndim != 6 or weights.ndim != 6:
        raise DimensionError(
            f"contract_weights expects 6-d operands, got {neighbors.shape} and {weights.shape}"
        )
    n, one, ci, k, ho, wo = neighbors.shape
    if one != 1 or weights.shape[0] != 1 or weights.shape[2:] != (ci, k, ho, wo):
        raise DimensionError(
            f"contract_weights dim mismatch: neighbors {neighbors.shape}, weights {weights.shape}"
        )
    co = weights.shape[1]
    nb = neighbors.data[:, 0]
    wt = weights.data[0]
    dtype = np.result_type(nb, wt)
    out = np.zeros((n, co, ho, wo), dtype)
    tmp = np.empty_like(out)
    for c in range(ci):
        for j in range(k):
            np.multiply(nb[:, None, c, j], wt[None, :, c, j], out=tmp)
            out += tmp

    def backward(g):
        g_nb = np.einsum("ockhw,nohw->nckhw", wt, g)[:, None]
        g_w = np.einsum("nckhw,nohw->ockhw", nb, g)[None]
        return g_nb.astype(neighbors.dtype), g_w.astype(weights.dtype)

    return apply_op(out, (neighbors, weights), backward, "contract_weights")


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NumericalError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NumericalError(f"{what}: {bad} non-finite values")
    return x


def mse(pred: Tensor, target) -> Tensor:
    return mean(square(sub(pred, target)))
