import os
import subprocess
import sys

import numpy as np
import pytest

from cellattn import _kernels_py, kernels

try:
    from cellattn import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_compiled = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def problem(dtype, b=3, t_len=7, h=5, seed=0):
    rng = np.random.default_rng(seed)
    gates_x = rng.normal(size=(b, t_len, 4 * h)).astype(dtype)
    w_h = (rng.normal(size=(h, 4 * h)) * 0.5).astype(dtype)
    d_hs = rng.normal(size=(b, t_len, h)).astype(dtype)
    return gates_x, w_h, d_hs


@needs_compiled
@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_compiled_matches_python(dtype, tol):
    gates_x, w_h, d_hs = problem(dtype)
    hs_py, cache_py = _kernels_py.lstm_forward(gates_x, w_h)
    hs_c, cache_c = _ckernels.lstm_forward(gates_x, w_h)
    assert hs_c.dtype == dtype
    np.testing.assert_allclose(hs_c, hs_py, rtol=tol, atol=tol)
    for a, b in zip(cache_c, cache_py):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    dg_py, dw_py = _kernels_py.lstm_backward(d_hs, hs_py, cache_py, w_h)
    dg_c, dw_c = _ckernels.lstm_backward(d_hs, hs_c, cache_c, w_h)
    np.testing.assert_allclose(dg_c, dg_py, rtol=tol, atol=tol)
    np.testing.assert_allclose(dw_c, dw_py, rtol=tol * 10, atol=tol * 10)


@needs_compiled
def test_compiled_rejects_integer_input():
    with pytest.raises(TypeError):
        _ckernels.lstm_forward(np.zeros((1, 2, 4), dtype=np.int64), np.zeros((1, 4), dtype=np.int64))


def test_single_step_matches_hand_computation():
    gates_x = np.array([[[0.0, 0.0, 0.0, 1.0]]])
    hs, (cs, _, _) = _kernels_py.lstm_forward(gates_x, np.zeros((1, 4)))
    # c = sigmoid(0) * tanh(1), h = sigmoid(0) * tanh(c)
    c = 0.5 * np.tanh(1.0)
    np.testing.assert_allclose(cs[0, 0, 0], c, rtol=1e-15)
    np.testing.assert_allclose(hs[0, 0, 0], 0.5 * np.tanh(c), rtol=1e-15)


def test_sigmoid_is_stable_at_extremes():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = _kernels_py.sigmoid(x)
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s[[0, 2, 4]], [0.0, 0.5, 1.0])
    np.testing.assert_allclose(s + _kernels_py.sigmoid(-x), 1.0)


def test_environment_variable_forces_python_backend():
    code = "from cellattn import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CELLATTN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_backend_is_compiled_when_built():
    expected = "compiled" if _ckernels is not None and not os.environ.get("CELLATTN_PURE_PYTHON") else "python"
    assert kernels.BACKEND == expected
