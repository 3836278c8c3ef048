import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cconv.constants import FD_STEP
from cconv.tensor import Tape, Tensor, precision

settings.register_profile(
    "cconv", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("cconv")


@pytest.fixture
def f64():
    with precision("f64"):
        yield


def numeric_grad(fn, arr, step=FD_STEP):
    """Central differences of scalar ``fn(arr)`` w.r.t. every entry of ``arr``."""
    arr = np.array(arr, dtype=np.float64)
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + step
        hi = fn(arr.copy())
        arr[i] = orig - step
        lo = fn(arr.copy())
        arr[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def grad_of(build, *arrays):
    """Analytic grads of ``sum(build(*tensors) * probe)`` plus the probe used."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*ts)
    probe = np.random.default_rng(123).normal(size=out.shape)
    return tape.gradient(out, ts, probe), probe
