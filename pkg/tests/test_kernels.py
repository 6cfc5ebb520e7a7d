"""The compiled kernels and their numpy fallback must agree bit for bit."""

import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from lowbridge import _pykernels as py

try:
    from lowbridge import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")
BACKENDS = [pytest.param(py, id="python"), pytest.param(cy, id="cython", marks=needs_ext)]


@pytest.fixture
def rng():
    return np.random.default_rng(17)


@pytest.mark.parametrize("k", BACKENDS)
def test_crc64_check_value(k):
    assert k.crc64(np.frombuffer(b"123456789", np.uint8)) == 0x995DC9BBDF1939FA


@pytest.mark.parametrize("k", BACKENDS)
def test_crc64_incremental(k, rng):
    data = rng.integers(0, 256, 1000, dtype=np.uint8)
    assert k.crc64(data[600:], k.crc64(data[:600])) == k.crc64(data)


@pytest.mark.parametrize("k", BACKENDS)
@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_im2col_matches_loop(k, rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
    cols = k.im2col(x, 3, 3, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (7 + 2 * pad - 3) // stride + 1
    for i in range(2):
        for c in range(3):
            for dy in range(3):
                for dx in range(3):
                    row = (c * 3 + dy) * 3 + dx
                    patch = xp[i, c, dy:dy + stride * ho:stride, dx:dx + stride * ho:stride]
                    np.testing.assert_array_equal(cols[i, row], patch.ravel())


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_parity(rng, dtype):
    x = rng.normal(size=(2, 4, 8, 6)).astype(dtype)
    np.testing.assert_array_equal(cy.im2col(x, 3, 3, 1, 1), py.im2col(x, 3, 3, 1, 1))
    cols = rng.normal(size=(2, 36, 48)).astype(dtype)
    a = cy.col2im(cols, x.shape, 3, 3, 1, 1)
    b = py.col2im(cols, x.shape, 3, 3, 1, 1)
    np.testing.assert_allclose(a, b, rtol=1e-6 if dtype == np.float32 else 1e-14)


@pytest.mark.parametrize("k", BACKENDS)
def test_col2im_is_adjoint_of_im2col(k, rng):
    x = rng.normal(size=(1, 2, 6, 6))
    c = rng.normal(size=(1, 18, 36))
    lhs = (k.im2col(x, 3, 3, 1, 1) * c).sum()
    rhs = (x * k.col2im(c, x.shape, 3, 3, 1, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_ext
def test_maxpool_parity_with_ties(rng):
    x = rng.integers(0, 3, size=(2, 3, 6, 8)).astype(np.float32)
    out_c, arg_c = cy.maxpool2x2_forward(x)
    out_p, arg_p = py.maxpool2x2_forward(x)
    np.testing.assert_array_equal(out_c, out_p)
    np.testing.assert_array_equal(arg_c, arg_p)
    g = rng.normal(size=out_c.shape).astype(np.float32)
    np.testing.assert_array_equal(cy.maxpool2x2_backward(g, arg_c), py.maxpool2x2_backward(g, arg_p))


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_nms_and_hysteresis_parity(seed):
    rng = np.random.default_rng(seed)
    mag = np.round(rng.random((20, 17)), 1)  # rounding forces ties
    bins = rng.integers(0, 4, size=(20, 17)).astype(np.int8)
    sup_c = cy.nms(mag, bins)
    np.testing.assert_array_equal(sup_c, py.nms(mag, bins))
    np.testing.assert_array_equal(cy.hysteresis(sup_c, 0.3, 0.7), py.hysteresis(sup_c, 0.3, 0.7))


@needs_ext
def test_min_distances_parity(rng):
    a = rng.integers(0, 50, size=(40, 2)).astype(np.int64)
    b = rng.integers(0, 50, size=(33, 2)).astype(np.int64)
    np.testing.assert_array_equal(cy.min_distances(a, b, 0.7, 1.3), py.min_distances(a, b, 0.7, 1.3))


def test_fallback_selected_by_environment():
    code = "from lowbridge._backend import BACKEND; print(BACKEND)"
    env = {**os.environ, "LOWBRIDGE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_reports_choice():
    backend = importlib.import_module("lowbridge._backend")
    assert backend.BACKEND in ("cython", "python")
    if cy is not None and not os.environ.get("LOWBRIDGE_PURE_PYTHON"):
        assert backend.BACKEND == "cython"
