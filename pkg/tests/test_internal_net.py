import numpy as np
import pytest

from cconv import internal_net as inet
from cconv.constants import LAST_STAGE_WEIGHT_GAIN
from cconv.oracles import AnalyticKernel
from cconv.tensor import DimensionError, Tensor, precision
from cconv.trainer import AdamConfig, fit_kernel


def test_target_bias_std():
    assert np.sqrt(inet.InitSpec.target_variance(1, 9)) == pytest.approx(0.4714, abs=1e-4)


@pytest.mark.parametrize("scheme", ["normal-fan-in", "uniform-fan-in"])
def test_last_bias_variance_monte_carlo(scheme):
    # a 250x400 layer gives 10^5 last-stage biases
    p = inet.init(250, 400, (3, 3), init_spec=inet.InitSpec(scheme), rng_seed=1)
    b = p.biases[-1].data
    assert b.size == 100_000
    target = inet.InitSpec.target_variance(250, 9)
    assert abs(b.var() / target - 1) < 0.2


def test_init_structure():
    p = inet.init(2, 3, (2, 2))
    assert p.widths == [16, 16, 6]
    assert p.weights[0].shape == (16, 2)
    g = inet.init(2, 3, (2, 2), input_mode="grid_direct")
    assert g.widths == [16, 16, 24]
    std = np.sqrt(2 / 16)
    assert abs(p.weights[-1].data.std() - LAST_STAGE_WEIGHT_GAIN * std) < 0.1 * std


def test_init_is_seeded():
    a, b = inet.init(2, 2, (3, 3), rng_seed=5), inet.init(2, 2, (3, 3), rng_seed=5)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    c = inet.init(2, 2, (3, 3), rng_seed=6)
    assert not np.array_equal(a.arrays()[-1], c.arrays()[-1])


def test_forward_shape_distances_mode():
    p = inet.init(2, 3, (2, 2))
    offs = np.random.default_rng(0).normal(size=(4, 2, 5, 5)).astype(np.float32)
    assert inet.forward(p, offs).shape == (1, 3, 2, 4, 5, 5)


def test_forward_shape_grid_direct():
    p = inet.init(2, 3, (2, 2), input_mode="grid_direct")
    assert inet.forward(p, np.zeros((1, 2, 5, 5), np.float32)).shape == (1, 3, 2, 4, 5, 5)


def test_wrong_batch_raises():
    with pytest.raises(DimensionError):
        inet.forward(inet.init(1, 1, (2, 2)), np.zeros((3, 2, 2, 2), np.float32))
    with pytest.raises(DimensionError):
        inet.forward(inet.init(1, 1, (2, 2), input_mode="grid_direct"), np.zeros((4, 2, 2, 2), np.float32))


def test_bias_passthrough():
    p = inet.init(2, 3, (2, 2))
    b = p.biases[-1].data
    zeroed = p.replace([np.zeros_like(a) if i % 2 == 0 else a for i, a in enumerate(p.arrays())])
    out = inet.forward(zeroed, np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32))
    # channel index is c_out * C_in + c_in, constant over neighbors and space
    expect = b.reshape(3, 2)[None, :, :, None, None, None]
    np.testing.assert_array_equal(out.data, np.broadcast_to(expect, out.shape))


def mlp_point(p, dy, dx):
    v = np.array([dy, dx])
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        v = w.data.astype(np.float64) @ v + b.data
        if i < len(p.weights) - 1:
            v = np.where(v > 0, v, 0.01 * v)
    return v


def test_forward_matches_pointwise_mlp():
    with precision("f64"):
        p = inet.init(2, 3, (2, 2), rng_seed=3)
        offs = np.random.default_rng(4).normal(size=(4, 2, 3, 2))
        out = inet.forward(p, offs).data
    for k in range(4):
        for i in range(3):
            for j in range(2):
                v = mlp_point(p, offs[k, 0, i, j], offs[k, 1, i, j]).reshape(3, 2)
                np.testing.assert_allclose(out[0, :, :, k, i, j], v, atol=1e-12)


def test_sample_kernel_resolution_and_constant_net():
    p = inet.init(1, 1, (3, 3))
    img = inet.sample_kernel(p)
    assert img.shape == (1, 200, 200)
    const = p.replace([np.zeros_like(a) if i % 2 == 0 else a for i, a in enumerate(p.arrays())])
    img = inet.sample_kernel(const, (7, 9))
    assert img.shape == (1, 7, 9)
    assert np.all(img == img.flat[0])
    with pytest.raises(ValueError):
        inet.sample_kernel(p, (1, 5))


def test_bilinear_imitation_corners():
    kernel = AnalyticKernel("bilinear")
    p = inet.init(1, 1, (2, 2), rng_seed=0)
    p, losses = fit_kernel(
        p, kernel, 1.0, iterations=1500, adam=AdamConfig(lr=1e-2, weight_decay=0.0, decay_steps=1500)
    )
    corners = inet.kernel_values(p, np.array([[0.5, 0.5], [-0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]]))
    np.testing.assert_allclose(corners.ravel(), 0.25, atol=0.03)
    assert losses[-1] < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    p = inet.init(2, 2, (3, 3), input_mode="grid_direct", rng_seed=9)
    inet.save_params(p, tmp_path / "net.cckp")
    q = inet.load_params(tmp_path / "net.cckp")
    assert q.sidecar() == p.sidecar()
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_kernel_values_matches_forward():
    p = inet.init(1, 2, (2, 2), rng_seed=2)
    offs = np.random.default_rng(1).normal(size=(4, 2, 1, 1)).astype(np.float32)
    w = inet.forward(p, offs).data[0, :, 0, :, 0, 0]  # [C_out, K]
    v = inet.kernel_values(p, offs[:, :, 0, 0])  # [K, C_final]
    np.testing.assert_allclose(w.T, v, rtol=1e-6)
