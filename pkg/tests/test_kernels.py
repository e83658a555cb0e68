import os
import subprocess
import sys

import numpy as np
import pytest

from lowbudget import _kernels
from lowbudget.budget import uniform_bins
from lowbudget.perturbation import _affine_inverse, gaussian_kernel


def test_uniform_order_variants_agree():
    for seed in range(300):
        r = np.random.default_rng(seed)
        m = int(r.integers(1, 150))
        k = int(r.integers(1, m + 1))
        scores = np.round(r.random(m), int(r.integers(1, 4)))
        bins = uniform_bins(scores, k)
        a = _kernels.uniform_order_numba(scores, bins, k)
        b = _kernels.uniform_order_numpy(scores, bins, k)
        assert a.tolist() == b.tolist()


def test_warp_variants_agree():
    for seed in range(30):
        r = np.random.default_rng(seed)
        img = r.random((int(r.integers(1, 20)), int(r.integers(1, 20)), int(r.integers(1, 4))))
        h, w, _ = img.shape
        inv = _affine_inverse(r.uniform(-30, 30), *r.uniform(-3, 3, 2), r.uniform(0.8, 1.2), h, w)
        np.testing.assert_allclose(_kernels.bilinear_warp_numba(img, inv), _kernels.bilinear_warp_numpy(img, inv),
                                   rtol=0, atol=1e-13)


@pytest.mark.parametrize("axis", [0, 1])
def test_blur_variants_agree(axis):
    for seed in range(30):
        r = np.random.default_rng(seed)
        img = r.random((int(r.integers(1, 15)), int(r.integers(1, 15)), 2))
        k = gaussian_kernel(r.uniform(0.1, 2.0))
        np.testing.assert_allclose(_kernels.blur_axis_numba(img, k, axis), _kernels.blur_axis_numpy(img, k, axis),
                                   rtol=0, atol=1e-13)


def test_identity_warp_is_exact():
    img = np.random.default_rng(0).random((6, 7, 1))
    inv = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    for fn in (_kernels.bilinear_warp_numba, _kernels.bilinear_warp_numpy):
        np.testing.assert_array_equal(fn(img, inv), img)


@pytest.mark.parametrize("flag,expected", [("0", "uniform_order_numpy"), ("1", "uniform_order_numba")])
def test_environment_flag_selects_backend(flag, expected):
    code = "from lowbudget import _kernels; print(_kernels.uniform_order.__name__)"
    env = {**os.environ, "LOWBUDGET_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
