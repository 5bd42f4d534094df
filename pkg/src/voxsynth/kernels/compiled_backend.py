"""Wrappers around the Cython convolution kernels.

Handles padding, output allocation and cropping in numpy; the inner loops
run in the compiled extension. Interface mirrors numpy_backend exactly.
"""

import numpy as np

from . import _compiled

NAME = "compiled"


def _nthreads():
    from . import thread_count

    return thread_count()


def _out_dim(d, k, s, p):
    return (d + 2 * p - k) // s + 1


def conv3d_forward(x, w, bias, stride, padding):
    dt = x.dtype
    sz, sy, sx = stride
    pz, py, px = padding
    kz, ky, kx = w.shape[2:]
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px))))
    oz = _out_dim(x.shape[2], kz, sz, pz)
    oy = _out_dim(x.shape[3], ky, sy, py)
    ox = _out_dim(x.shape[4], kx, sx, px)
    out = np.empty((x.shape[0], w.shape[0], oz, oy, ox), dtype=dt)
    b = bias if bias is not None else np.zeros(w.shape[0], dtype=dt)
    _compiled.conv_fwd(
        xp,
        np.ascontiguousarray(w, dtype=dt),
        np.ascontiguousarray(b, dtype=dt),
        sz,
        sy,
        sx,
        out,
        _nthreads(),
    )
    return out


def conv3d_backward(x, w, stride, padding, gout, need_x=True, need_w=True):
    dt = x.dtype
    sz, sy, sx = stride
    pz, py, px = padding
    gout = np.ascontiguousarray(gout, dtype=dt)
    wc = np.ascontiguousarray(w, dtype=dt)
    nt = _nthreads()

    gx = gw = gb = None
    if need_w:
        xp = np.ascontiguousarray(
            np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
        )
        gw = np.empty_like(wc)
        _compiled.conv_bwd_w(xp, gout, sz, sy, sx, gw, nt)
        gb = gout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
    if need_x:
        gxp = np.zeros(
            (
                x.shape[0],
                x.shape[1],
                x.shape[2] + 2 * pz,
                x.shape[3] + 2 * py,
                x.shape[4] + 2 * px,
            ),
            dtype=dt,
        )
        _compiled.conv_bwd_x(gout, wc, sz, sy, sx, gxp, nt)
        gx = np.ascontiguousarray(
            gxp[:, :, pz : pz + x.shape[2], py : py + x.shape[3], px : px + x.shape[4]]
        )
    return gx, gw, gb


def tconv3d_forward(x, w, bias, stride, padding):
    dt = x.dtype
    sz, sy, sx = stride
    pz, py, px = padding
    kz, ky, kx = w.shape[2:]
    if kz - 1 - pz < 0 or ky - 1 - py < 0 or kx - 1 - px < 0:
        raise ValueError("transposed conv requires padding <= kernel-1")
    oz = (x.shape[2] - 1) * sz - 2 * pz + kz
    oy = (x.shape[3] - 1) * sy - 2 * py + ky
    ox = (x.shape[4] - 1) * sx - 2 * px + kx
    out = np.empty((x.shape[0], w.shape[0], oz, oy, ox), dtype=dt)
    b = bias if bias is not None else np.zeros(w.shape[0], dtype=dt)
    _compiled.tconv_fwd(
        np.ascontiguousarray(x),
        np.ascontiguousarray(w, dtype=dt),
        np.ascontiguousarray(b, dtype=dt),
        sz,
        sy,
        sx,
        pz,
        py,
        px,
        out,
        _nthreads(),
    )
    return out


def tconv3d_backward(x, w, stride, padding, gout, need_x=True, need_w=True):
    dt = x.dtype
    sz, sy, sx = stride
    pz, py, px = padding
    gout = np.ascontiguousarray(gout, dtype=dt)

    gx = gw = gb = None
    if need_x:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4))
        gx = conv3d_forward(gout, wt, None, stride, padding)
    if need_w:
        gw = np.empty_like(np.ascontiguousarray(w, dtype=dt))
        _compiled.tconv_bwd_w(
            np.ascontiguousarray(x), gout, sz, sy, sx, pz, py, px, gw, _nthreads()
        )
        gb = gout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
    return gx, gw, gb
