import numpy as np
import pytest

from cconv.experiments import (
    EquivarianceConfig,
    GradualCCNet,
    StridedNet,
    impulse,
    kernel_ssim,
    run_equivariance,
    texture_image,
    white_cross,
)
from cconv.layer import CCLayer, CCLayerConfig
from cconv.oracles import AnalyticKernel, centroid
from cconv.tensor import Tensor


def test_synthetic_inputs_are_centered():
    assert centroid(white_cross(64)) == (32.0, 32.0)
    assert centroid(impulse(33)) == (16.0, 16.0)
    t = texture_image(32, np.random.default_rng(0))
    assert t.shape == (32, 32) and np.isfinite(t).all()


def test_kernel_ssim_untrained_is_low():
    layer = CCLayer.create(CCLayerConfig(1, 1, (4, 4)), 0)
    assert kernel_ssim(layer, AnalyticKernel("bicubic")) < 0.5


def test_toy_nets_halve_the_input():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 1, 32, 32)).astype(np.float32))
    for net in (StridedNet(4, rng), GradualCCNet(4, 3, rng)):
        assert net.features(x).shape == (2, 4, 16, 16)
        assert net(x).shape == (2, 4)


def test_calibration_gives_unit_features():
    rng = np.random.default_rng(1)
    net = GradualCCNet(4, 5, rng)
    batch = rng.normal(size=(4, 1, 32, 32)).astype(np.float32)
    net.calibrate(batch)
    feats = net.features(Tensor(batch)).data
    assert np.mean(feats.astype(np.float64) ** 2) == pytest.approx(1.0, rel=1e-3)


def test_zero_shift_similarity_is_one():
    cfg = EquivarianceConfig(iters=2, n_eval=2, radii=(2,), n_seeds=1, eval_size=16, context=4, channels=2)
    out = run_equivariance(cfg)
    zero = [r for r in out["mean"] if r["radius"] == 0]
    assert {r["net"] for r in zero} == {"baseline", "cc", "target"}
    for r in zero:
        assert r["similarity"] == pytest.approx(1.0)
