import os
import subprocess
import sys

import numpy as np
import pytest

from bulkcredal import _kernels_py, kernels

cy = pytest.importorskip("bulkcredal._kernels")


def _case(seed, n=300, d=4):
    r = np.random.default_rng(seed)
    S = np.ascontiguousarray(r.normal(30, 10, size=(n, d)))
    S[:5, 0] = 30.0  # exact kinks at x_0 = 30
    x = np.ascontiguousarray(r.uniform(10, 50, size=d))
    x[0] = 30.0
    w = np.ascontiguousarray(r.dirichlet(np.ones(n)))
    return S, x, w


@pytest.mark.parametrize("seed", range(5))
def test_newsvendor_kernels_agree(seed):
    S, x, w = _case(seed)
    np.testing.assert_allclose(cy.newsvendor_losses(x, S, 3.0, 8.0),
                               _kernels_py.newsvendor_losses(x, S, 3.0, 8.0), rtol=1e-13, atol=1e-12)
    np.testing.assert_allclose(cy.newsvendor_grad(x, S, 3.0, 8.0, w),
                               _kernels_py.newsvendor_grad(x, S, 3.0, 8.0, w), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_lad_kernels_agree(seed):
    S, x, w = _case(seed)
    theta = np.ascontiguousarray(np.append(x[:-1] / 30, 1.0))
    np.testing.assert_allclose(cy.lad_grad(theta, S, w), _kernels_py.lad_grad(theta, S, w),
                               rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("eps", [0.01, 0.3, 2.0, 10.0])
def test_kl_kernels_agree(eps):
    l = np.ascontiguousarray(np.random.default_rng(3).exponential(size=200) * 20)
    s = float(l.max() - l.min()) + 1e-12
    v1, lam1, w1 = cy.kl_dual_inner(l, eps, 1e-6 * s, 10 * s)
    v2, lam2, w2 = _kernels_py.kl_dual_inner(l, eps, 1e-6 * s, 10 * s)
    assert abs(v1 - v2) <= 1e-9 * (1 + abs(v2))
    np.testing.assert_allclose(w1, w2, atol=1e-7)


def test_dispatch_respects_environment():
    env = dict(os.environ, BULKCREDAL_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from bulkcredal import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == ("python" if os.environ.get("BULKCREDAL_PURE") == "1" else "cython")
