import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cconv.constants import PARTITION_TOL
from cconv.grid import ScaleSpec, grid_axis
from cconv.oracles import (
    AnalyticKernel,
    DegenerateInputError,
    DiscreteConvSpec,
    centroid,
    cosine_similarity,
    discrete_conv,
    keys_cubic,
    render_kernel,
    resize,
    same_padding,
    sampled_filter,
    shift_and_compare,
    shift_image,
    ssim,
)
from cconv.tensor import DimensionError

BICUBIC = AnalyticKernel("bicubic")


def test_bicubic_partition_of_unity():
    x = np.random.default_rng(0).uniform(-10, 10, size=1000)
    j = np.arange(-14, 15)
    total = keys_cubic(x[:, None] - j[None, :]).sum(axis=1)
    assert np.max(np.abs(total - 1)) < PARTITION_TOL


def test_bicubic_interpolates():
    assert keys_cubic(0.0) == 1.0
    np.testing.assert_array_equal(keys_cubic(np.array([-2.0, -1.0, 1.0, 2.0, 3.0])), 0.0)


def test_bicubic_scale_one_is_identity():
    img = np.random.default_rng(1).normal(size=(9, 7))
    np.testing.assert_allclose(resize(img, BICUBIC, ScaleSpec.make((9, 7), 1)), img, atol=1e-12)


def test_gaussian_impulse_is_symmetric_bump():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    g = AnalyticKernel("gaussian", sigma_x=1.0, sigma_y=1.0, rotation_deg=0.0)
    out = resize(img, g, ScaleSpec.make((15, 15), 1))
    np.testing.assert_allclose(out, out.T, atol=1e-15)
    np.testing.assert_allclose(out, out[::-1, ::-1], atol=1e-15)
    assert np.unravel_index(out.argmax(), out.shape) == (7, 7)


def loop_resize_1d(row, kernel_fn, radius, s, out):
    n = len(row)
    g = grid_axis(n, s, out)
    res = []
    for gi in g:
        acc = 0.0
        for m in range(math.floor(gi - radius) - 1, math.ceil(gi + radius) + 2):
            acc += row[min(max(m, 0), n - 1)] * float(kernel_fn(gi - m))
        res.append(acc)
    return np.array(res)


def test_ramp_half_scale_matches_double_loop():
    ramp = np.arange(8.0)[None, :]
    got = resize(ramp, BICUBIC, ScaleSpec(1, 0.5, 1, 4) if False else ScaleSpec.make((1, 8), (1, 0.5)))
    ref = loop_resize_1d(ramp[0], keys_cubic, 2.0, 0.5, 4)
    np.testing.assert_allclose(got[0], ref, atol=1e-12)


def test_separable_equals_composition():
    img = np.random.default_rng(2).normal(size=(11, 13))
    spec = ScaleSpec.make((11, 13), (0.7, 1.3))
    full = resize(img, BICUBIC, spec)
    rows = resize(img, BICUBIC, ScaleSpec.make((11, 13), (0.7, 1.0)))
    both = resize(rows, BICUBIC, ScaleSpec.make(rows.shape, (1.0, 1.3), (rows.shape[0], spec.out_w)))
    np.testing.assert_allclose(full, both, atol=1e-6)


def test_rotated_gaussian_rows_normalized():
    g = AnalyticKernel("gaussian")
    assert not g.separable
    out = resize(np.ones((12, 12)), g, ScaleSpec.make((12, 12), 0.75))
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_render_kernel_shape():
    assert render_kernel(BICUBIC).shape == (200, 200)


def test_resize_keeps_rank():
    assert resize(np.zeros((2, 6, 6)), BICUBIC, ScaleSpec.make((6, 6), 0.5)).shape == (2, 3, 3)
    assert resize(np.zeros((1, 2, 6, 6)), BICUBIC, ScaleSpec.make((6, 6), 0.5)).shape == (1, 2, 3, 3)


def test_tapered_gaussian_vanishes_at_radius():
    k = AnalyticKernel("tapered_gaussian", sigma_x=1.0, sigma_y=1.0, taper_radius=2.0)
    assert k.axis(2.0) == 0.0 and k.axis(-2.5) == 0.0 and k.axis(0.0) > 0


def test_discrete_conv_trivial_cases():
    img = np.random.default_rng(3).normal(size=(6, 6))
    np.testing.assert_array_equal(discrete_conv(img, DiscreteConvSpec(np.ones((1, 1)))), img)
    out = discrete_conv(np.full((6, 6), 2.0), DiscreteConvSpec(np.full((3, 3), 1 / 9)))
    np.testing.assert_allclose(out, 2.0)


def test_discrete_conv_matches_loop():
    rng = np.random.default_rng(4)
    x, f = rng.normal(size=(5, 5)), rng.normal(size=(3, 3))
    out = discrete_conv(x, DiscreteConvSpec(f, stride=(2, 2)))
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for a in range(3):
                for b in range(3):
                    ref[i, j] += x[2 * i + a, 2 * j + b] * f[a, b]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_discrete_conv_output_size_and_errors():
    spec = DiscreteConvSpec(np.ones((4, 4)), stride=(3, 3), padding=(1, 2, 1, 2))
    assert discrete_conv(np.zeros((10, 10)), spec).shape == (4, 4)
    with pytest.raises(DimensionError):
        discrete_conv(np.zeros((2, 2)), DiscreteConvSpec(np.ones((3, 3))))
    with pytest.raises(ValueError):
        DiscreteConvSpec(np.ones((3, 3)), stride=(0, 1))


def test_centroid_examples():
    img = np.zeros((8, 8))
    img[3, 4] = 1
    assert centroid(img) == (3.0, 4.0)
    img = np.zeros((4, 4))
    img[0, 0] = img[2, 0] = 1
    assert centroid(img) == (1.0, 0.0)
    y, x = np.mgrid[:33, :33]
    bump = np.exp(-((y - 16) ** 2 + (x - 16) ** 2) / 18)
    np.testing.assert_allclose(centroid(bump), (16, 16), atol=1e-6)
    with pytest.raises(DegenerateInputError):
        centroid(np.zeros((3, 3)))


def test_even_filter_drifts_half_pixel_per_application():
    img = np.zeros((40, 40))
    img[20, 20] = 1
    f = sampled_filter(AnalyticKernel("gaussian", sigma_x=1.0, sigma_y=1.0, rotation_deg=0.0), 4)
    spec = DiscreteConvSpec(f, padding=same_padding(4) + same_padding(4))
    start = centroid(img)
    for i in range(1, 6):
        img = discrete_conv(img, spec)
        np.testing.assert_allclose(np.subtract(centroid(img), start), (-0.5 * i, -0.5 * i), atol=1e-9)


def smooth_map(h, w, phase=0.0):
    y, x = np.mgrid[:h, :w]
    return np.sin(0.3 * y + phase) + np.cos(0.25 * x) + 0.5 * np.sin(0.2 * (x + y))


def test_shift_and_compare_identical():
    a = smooth_map(10, 10)
    assert shift_and_compare(a, a, (0, 0), 1.0) == pytest.approx(1.0)


def test_shift_and_compare_integer_translate():
    big = smooth_map(40, 40)
    a = big[8:24, 8:24]
    b = big[7:23, 8:24]  # content moved down 1 px: input shifted by (4, 0) at net scale 1/4
    assert shift_and_compare(a, b, (4, 0), 0.25) == pytest.approx(1.0, abs=1e-3)


def test_shift_and_compare_orthogonal_noise():
    rng = np.random.default_rng(5)
    sims = [shift_and_compare(rng.normal(size=(12, 12)), rng.normal(size=(12, 12)), (0, 0), 1.0) for _ in range(50)]
    assert abs(np.mean(sims)) < 0.1


def test_shift_and_compare_errors():
    with pytest.raises(DimensionError):
        shift_and_compare(np.zeros((4, 4)), np.zeros((4, 4)), (0, 0), 1.0)
    with pytest.raises(DimensionError):
        shift_and_compare(np.zeros((8, 8)), np.zeros((8, 9)), (0, 0), 1.0)


def test_shift_image_integer_is_exact_in_interior():
    img = np.random.default_rng(6).normal(size=(10, 10))
    np.testing.assert_allclose(shift_image(img, (2, -1))[2:-2, 2:-2], img[4:, 1:-3][:6, :6], atol=1e-12)


def test_ssim_of_identical_images():
    a = np.random.default_rng(7).normal(size=(20, 20))
    assert ssim(a, a) == pytest.approx(1.0)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)


@given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0.3, 1.7), st.floats(0.3, 1.7))
def test_resize_preserves_constants_and_range(img, sh, sw):
    spec = ScaleSpec.make((6, 6), (sh, sw))
    lin = AnalyticKernel("bilinear")
    out = resize(img, lin, spec)
    # bilinear with scale <= 1 still only blends neighbors, so values stay in range
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9
    np.testing.assert_allclose(resize(np.full((6, 6), 0.3), lin, spec), 0.3, atol=1e-12)


def test_odd_filter_keeps_centroid():
    img = np.zeros((40, 40))
    img[20, 20] = 1
    f = sampled_filter(AnalyticKernel("gaussian", sigma_x=1.0, sigma_y=1.0, rotation_deg=0.0), 3)
    spec = DiscreteConvSpec(f, padding=same_padding(3) + same_padding(3))
    for _ in range(20):
        img = discrete_conv(img, spec)
    assert np.max(np.abs(np.subtract(centroid(img), (20, 20)))) < 0.01
