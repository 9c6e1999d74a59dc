import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from falconlab import _kernels_py as pyk
from falconlab import kernels

ck = pytest.importorskip("falconlab._ckernels")


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1)])
def test_im2col_col2im_backends_bitwise_equal(stride, pad):
    x = np.random.default_rng(0).standard_normal((3, 2, 9, 8))
    a, b = pyk.im2col(x, 3, 3, stride, pad), ck.im2col(x, 3, 3, stride, pad)
    assert a.tobytes() == b.tobytes()
    assert pyk.col2im(a, x.shape, 3, 3, stride, pad).tobytes() == ck.col2im(a, x.shape, 3, 3, stride, pad).tobytes()


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = kernels.im2col(x, 3, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    assert np.sum(cols * y) == pytest.approx(np.sum(x * kernels.col2im(y, x.shape, 3, 3, 2, 1)), rel=1e-12)


def test_maxpool_backends_equal():
    x = np.random.default_rng(2).standard_normal((2, 3, 8, 6))
    (o1, a1), (o2, a2) = pyk.maxpool_forward(x, 2), ck.maxpool_forward(x, 2)
    assert o1.tobytes() == o2.tobytes() and np.array_equal(a1, a2)
    g = np.random.default_rng(3).standard_normal(o1.shape)
    assert pyk.maxpool_backward(g, a1, x.shape, 2).tobytes() == ck.maxpool_backward(g, a2, x.shape, 2).tobytes()
    np.testing.assert_array_equal(o1, oracles.maxpool(x, 2))


def test_warp_backends_equal_and_match_pixel_oracle():
    rng = np.random.default_rng(4)
    imgs = rng.random((3, 10, 9))
    t = 0.4
    m = np.array([[np.cos(t), -np.sin(t), 1.3], [np.sin(t), np.cos(t), -0.7]])
    a, b = pyk.warp_bilinear(imgs, m), ck.warp_bilinear(imgs, m)
    assert a.tobytes() == b.tobytes()
    for r in range(10):
        for c in range(9):
            sx = m[0, 0] * c + m[0, 1] * r + m[0, 2]
            sy = m[1, 0] * c + m[1, 1] * r + m[1, 2]
            assert a[1, r, c] == pytest.approx(oracles.bilinear_pixel(imgs[1].tolist(), sx, sy), abs=1e-12)


def test_float32_inputs_supported_by_both():
    x = np.random.default_rng(5).standard_normal((1, 2, 6, 6)).astype(np.float32)
    assert pyk.im2col(x, 3, 3, 1, 1).dtype == np.float32
    np.testing.assert_array_equal(pyk.im2col(x, 3, 3, 1, 1), ck.im2col(x, 3, 3, 1, 1))


def test_pure_python_env_var_selects_fallback():
    env = dict(os.environ, FALCONLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import falconlab.kernels as k; print(k.BACKEND)"], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == ("python" if os.environ.get("FALCONLAB_PURE_PYTHON") else "cython")
