"""The numba and numpy kernel implementations agree."""

import numpy as np
import pytest

from gppvae import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba backend unavailable")

CASES = [((2, 1, 28, 28), (8, 1, 3, 3)), ((3, 8, 14, 14), (16, 8, 3, 3)), ((1, 3, 5, 6), (2, 3, 3, 3))]


@pytest.mark.parametrize("xs,ws", CASES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_kernels_agree(xs, ws, dtype, rng):
    x, w = rng.normal(size=xs).astype(dtype), rng.normal(size=ws).astype(dtype)
    ho, wo = _accel.conv_out_size(xs[2], 3, 2, 1), _accel.conv_out_size(xs[3], 3, 2, 1)
    tol = 1e-12 if dtype == np.float64 else 1e-4
    a, b = np.empty((xs[0], ws[0], ho, wo), dtype), np.empty((xs[0], ws[0], ho, wo), dtype)
    _accel.nb_conv2d(x, w, 2, 1, a)
    _accel.np_conv2d(x, w, 2, 1, b)
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)

    g = rng.normal(size=a.shape).astype(dtype)
    dx1, dx2 = np.empty_like(x), np.empty_like(x)
    _accel.nb_conv2d_grad_input(g, w, 2, 1, dx1)
    _accel.np_conv2d_grad_input(g, w, 2, 1, dx2)
    np.testing.assert_allclose(dx1, dx2, rtol=tol, atol=tol)

    dw1, dw2 = np.empty_like(w), np.empty_like(w)
    _accel.nb_conv2d_grad_weight(x, g, 2, 1, dw1)
    _accel.np_conv2d_grad_weight(x, g, 2, 1, dw2)
    np.testing.assert_allclose(dw1, dw2, rtol=tol * 10, atol=tol * 10)


@pytest.mark.parametrize("angle", [0.0, 0.3, np.pi / 2, 2.5])
def test_rotation_kernels_agree(angle, rng):
    img = rng.random((17, 17))
    a, b = np.empty_like(img), np.empty_like(img)
    _accel.nb_rotate_bilinear(img, angle, a)
    _accel.np_rotate_bilinear(img, angle, b)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_rotation_by_zero_is_identity(rng):
    img = rng.random((9, 9))
    out = np.empty_like(img)
    _accel.rotate_bilinear(img, 0.0, out)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_quarter_turn_matches_rot90(rng):
    img = rng.random((11, 11))
    out = np.empty_like(img)
    _accel.rotate_bilinear(img, np.pi / 2, out)
    # out[i, j] = img[n - 1 - j, i]
    np.testing.assert_allclose(out, np.rot90(img, k=-1), atol=1e-9)
