"""Backend agreement and thread invariance for the convolution kernels."""

import os

import numpy as np
import pytest

from voxsynth import kernels
from voxsynth.kernels import compiled_backend, numpy_backend, thread_count

HAS_COMPILED = compiled_backend is not None

CASES = [
    # (batch, c_in, c_out, dims, k, stride, padding)
    (1, 1, 2, (6, 7, 8), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
    (2, 3, 4, (5, 5, 5), (3, 3, 3), (2, 2, 2), (0, 0, 0)),
    (1, 2, 2, (4, 6, 5), (1, 1, 1), (1, 1, 1), (0, 0, 0)),
    (1, 4, 3, (8, 4, 6), (2, 2, 2), (2, 2, 2), (1, 0, 1)),
]


def _conv_inputs(case, seed, dtype):
    b, ci, co, dims, k, stride, padding = case
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, ci) + dims).astype(dtype)
    w = rng.normal(size=(co, ci) + k).astype(dtype)
    bias = rng.normal(size=co).astype(dtype)
    return x, w, bias, stride, padding


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled extension not built")
@pytest.mark.parametrize("case", CASES)
def test_backends_agree_on_conv_forward(case):
    x, w, bias, stride, padding = _conv_inputs(case, 10, np.float32)
    a = numpy_backend.conv3d_forward(x, w, bias, stride, padding)
    b = compiled_backend.conv3d_forward(x, w, bias, stride, padding)
    assert a.shape == b.shape
    assert float(np.max(np.abs(a.astype(np.float64) - b))) < 1e-3


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled extension not built")
@pytest.mark.parametrize("case", CASES)
def test_backends_agree_on_conv_backward(case):
    x, w, bias, stride, padding = _conv_inputs(case, 11, np.float32)
    y = numpy_backend.conv3d_forward(x, w, bias, stride, padding)
    g = np.random.default_rng(12).normal(size=y.shape).astype(np.float32)
    ax, aw, ab = numpy_backend.conv3d_backward(
        x, w, stride, padding, g, need_x=True, need_w=True
    )
    bx, bw, bb = compiled_backend.conv3d_backward(
        x, w, stride, padding, g, need_x=True, need_w=True
    )
    for u, v in ((ax, bx), (aw, bw), (ab, bb)):
        assert float(np.max(np.abs(u.astype(np.float64) - v))) < 1e-3


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled extension not built")
def test_backends_agree_on_tconv_round_trip():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(1, 3, 4, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 3, 2, 2, 2)).astype(np.float32)
    bias = rng.normal(size=2).astype(np.float32)
    a = numpy_backend.tconv3d_forward(x, w, bias, (2, 2, 2), (0, 0, 0))
    b = compiled_backend.tconv3d_forward(x, w, bias, (2, 2, 2), (0, 0, 0))
    assert a.shape == b.shape == (1, 2, 8, 8, 8)
    assert float(np.max(np.abs(a.astype(np.float64) - b))) < 1e-3
    g = rng.normal(size=a.shape).astype(np.float32)
    ax, aw, ab = numpy_backend.tconv3d_backward(
        x, w, (2, 2, 2), (0, 0, 0), g, need_x=True, need_w=True
    )
    bx, bw, bb = compiled_backend.tconv3d_backward(
        x, w, (2, 2, 2), (0, 0, 0), g, need_x=True, need_w=True
    )
    for u, v in ((ax, bx), (aw, bw), (ab, bb)):
        assert float(np.max(np.abs(u.astype(np.float64) - v))) < 1e-3


@pytest.mark.skipif(not HAS_COMPILED, reason="compiled extension not built")
def test_compiled_results_do_not_depend_on_thread_count(monkeypatch):
    x, w, bias, stride, padding = _conv_inputs(CASES[1], 14, np.float32)
    monkeypatch.setenv("VOXSYNTH_THREADS", "1")
    y1 = compiled_backend.conv3d_forward(x, w, bias, stride, padding)
    monkeypatch.setenv("VOXSYNTH_THREADS", "4")
    y4 = compiled_backend.conv3d_forward(x, w, bias, stride, padding)
    assert np.array_equal(y1, y4)
    g = np.random.default_rng(15).normal(size=y1.shape).astype(np.float32)
    monkeypatch.setenv("VOXSYNTH_THREADS", "1")
    a = compiled_backend.conv3d_backward(x, w, stride, padding, g, need_x=True, need_w=True)
    monkeypatch.setenv("VOXSYNTH_THREADS", "3")
    b = compiled_backend.conv3d_backward(x, w, stride, padding, g, need_x=True, need_w=True)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_thread_count_reads_env(monkeypatch):
    monkeypatch.setenv("VOXSYNTH_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("VOXSYNTH_THREADS", "junk")
    assert thread_count() >= 1
    monkeypatch.delenv("VOXSYNTH_THREADS")
    assert 1 <= thread_count() <= 8


def test_active_backend_exposes_required_kernels():
    assert kernels.NAME in ("compiled", "numpy")
    for name in ("conv3d_forward", "conv3d_backward", "tconv3d_forward", "tconv3d_backward"):
        assert callable(getattr(kernels, name))


def test_float64_paths_agree_tightly():
    if not HAS_COMPILED:
        pytest.skip("compiled extension not built")
    x, w, bias, stride, padding = _conv_inputs(CASES[0], 16, np.float64)
    a = numpy_backend.conv3d_forward(x, w, bias, stride, padding)
    b = compiled_backend.conv3d_forward(x, w, bias, stride, padding)
    assert float(np.max(np.abs(a - b))) < 1e-12
