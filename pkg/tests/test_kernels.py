"""numba and numpy backends must agree bit for bit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitcomp import _jit, kernels
from splitcomp.model.zoo import build_teacher


@pytest.fixture
def both():
    prev = _jit.backend()

    def run(fn):
        out = {}
        for b in ("numpy", "numba"):
            _jit.set_backend(b)
            out[b] = fn()
        return out["numpy"], out["numba"]

    yield run
    _jit.set_backend(prev)


def _eq(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
    else:
        np.testing.assert_array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2), hw=st.integers(4, 9), seed=st.integers(0, 999))
def test_im2col_col2im_parity(k, s, p, hw, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, hw, hw + 1)).astype(np.float32)
    prev = _jit.backend()
    try:
        res = {}
        for b in ("numpy", "numba"):
            _jit.set_backend(b)
            cols = kernels.im2col(x, k, k, (s, s), (p, p))
            res[b] = (cols, kernels.col2im(cols, x.shape, k, k, (s, s), (p, p)))
    finally:
        _jit.set_backend(prev)
    _eq(res["numpy"], res["numba"])


def test_maxpool_parity(both, rng):
    x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
    fwd = both(lambda: kernels.maxpool_forward(x, 3, 2, 1))
    _eq(*fwd)
    dy = rng.standard_normal(fwd[0][0].shape).astype(np.float32)
    _eq(*both(lambda: kernels.maxpool_backward(dy, fwd[0][1], x.shape)))


def test_quantize_parity(both, rng):
    flat = rng.standard_normal(5000) * 3
    flat[:4] = [0.5, -0.5, 2.5, -2.5]
    _eq(*both(lambda: kernels.quantize_int8(flat, 1.0)))
    _eq(*both(lambda: kernels.quantize_int8(flat, float(np.abs(flat).max() / 127))))


def test_trace_drain_parity(both, rng):
    times = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 1, 50))])
    rates = rng.uniform(1e5, 1e7, len(times))
    t0s = rng.uniform(0, times[-1], 200)
    bits = rng.uniform(0, 1e6, 200)
    a, b = both(lambda: kernels.trace_transfer_times(times, rates, t0s, bits))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_model_forward_parity(both, rng):
    x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
    for arch in ("small_resnet", "small_densenet"):
        m = build_teacher(arch, seed=1)
        _eq(*both(lambda: m(x)))


def test_env_flag_subprocess():
    import subprocess
    import sys

    code = "from splitcomp import _jit; print(_jit.backend())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"SPLITCOMP_DISABLE_NUMBA": "1", "PATH": ""}, check=True).stdout.strip()
    assert out == "numpy"
