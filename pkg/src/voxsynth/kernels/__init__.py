"""Backend selection for the 3D convolution kernels.

The compiled extension is preferred when importable; otherwise the
pure-numpy implementation is used. Set VOXSYNTH_BACKEND=compiled|numpy to
force one (forcing an unavailable backend raises), VOXSYNTH_THREADS to pin
the compiled backend's thread count. Compiled kernels give bitwise
identical results for any thread count.
"""

import os

from . import numpy_backend

try:
    from . import compiled_backend
except ImportError:
    compiled_backend = None


def thread_count():
    """Worker threads for the compiled kernels (env override, capped at 8)."""
    raw = os.environ.get("VOXSYNTH_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = min(8, os.cpu_count() or 1)
    return n


def _select():
    choice = os.environ.get("VOXSYNTH_BACKEND", "auto").strip().lower()
    if choice in ("", "auto"):
        return compiled_backend if compiled_backend is not None else numpy_backend
    if choice == "compiled":
        if compiled_backend is None:
            raise ImportError(
                "VOXSYNTH_BACKEND=compiled but the extension is not built"
            )
        return compiled_backend
    if choice == "numpy":
        return numpy_backend
    raise ValueError(f"unknown VOXSYNTH_BACKEND value: {choice!r}")


_impl = _select()

NAME = _impl.NAME
conv3d_forward = _impl.conv3d_forward
conv3d_backward = _impl.conv3d_backward
tconv3d_forward = _impl.tconv3d_forward
tconv3d_backward = _impl.tconv3d_backward

__all__ = [
    "NAME",
    "conv3d_forward",
    "conv3d_backward",
    "tconv3d_forward",
    "tconv3d_backward",
    "thread_count",
    "numpy_backend",
    "compiled_backend",
]
