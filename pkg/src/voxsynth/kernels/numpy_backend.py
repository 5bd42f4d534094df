"""Pure-numpy convolution kernels (fallback backend).

Implements the same six entry points as the compiled backend using
sliding-window views and tensordot (BLAS). Results are deterministic for a
fixed BLAS thread count. Shapes follow the deep-learning convention
(batch, channel, z, y, x); weights are (out_ch, in_ch, kz, ky, kx) for both
the strided and the transposed convolution.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _strided_windows(xp, kdims, stride):
    """All kernel-sized windows of padded input, subsampled by stride.

    Returns a view of shape (B, C, OZ, OY, OX, kz, ky, kx).
    """
    win = sliding_window_view(xp, kdims, axis=(2, 3, 4))
    sz, sy, sx = stride
    return win[:, :, ::sz, ::sy, ::sx]


def conv3d_forward(x, w, bias, stride, padding):
    pz, py, px = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    win = _strided_windows(xp, w.shape[2:], stride)
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.moveaxis(y, -1, 1)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv3d_backward(x, w, stride, padding, gout, need_x=True, need_w=True):
    dt = x.dtype
    sz, sy, sx = stride
    pz, py, px = padding
    kz, ky, kx = w.shape[2:]
    oz, oy, ox = gout.shape[2:]

    gx = gw = gb = None
    if need_w:
        xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
        win = _strided_windows(xp, (kz, ky, kx), stride)
        gw = np.tensordot(gout, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gw = np.ascontiguousarray(gw, dtype=dt)
        gb = gout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
    if need_x:
        b, ci = x.shape[0], x.shape[1]
        gxp = np.zeros(
            (b, ci, x.shape[2] + 2 * pz, x.shape[3] + 2 * py, x.shape[4] + 2 * px),
            dtype=dt,
        )
        # (B, OZ, OY, OX, CI, kz, ky, kx) contributions, scattered per tap
        t = np.tensordot(gout, w, axes=([1], [0]))
        for iz in range(kz):
            for iy in range(ky):
                for ix in range(kx):
                    gxp[
                        :,
                        :,
                        iz : iz + oz * sz : sz,
                        iy : iy + oy * sy : sy,
                        ix : ix + ox * sx : sx,
                    ] += np.moveaxis(t[..., iz, iy, ix], -1, 1)
        gx = np.ascontiguousarray(
            gxp[:, :, pz : pz + x.shape[2], py : py + x.shape[3], px : px + x.shape[4]]
        )
    return gx, gw, gb


def _dilate(x, stride):
    sz, sy, sx = stride
    if (sz, sy, sx) == (1, 1, 1):
        return x
    b, c, z, y, xd = x.shape
    out = np.zeros(
        (b, c, (z - 1) * sz + 1, (y - 1) * sy + 1, (xd - 1) * sx + 1), dtype=x.dtype
    )
    out[:, :, ::sz, ::sy, ::sx] = x
    return out


def tconv3d_forward(x, w, bias, stride, padding):
    # scatter form y[u = z*s + k - p] += x[z] * w[k], computed as a stride-1
    # correlation of the dilated input with the flipped kernel
    kz, ky, kx = w.shape[2:]
    pz, py, px = padding
    if kz - 1 - pz < 0 or ky - 1 - py < 0 or kx - 1 - px < 0:
        raise ValueError("transposed conv requires padding <= kernel-1")
    xd = _dilate(x, stride)
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1])
    return conv3d_forward(xd, wf, bias, (1, 1, 1), (kz - 1 - pz, ky - 1 - py, kx - 1 - px))


def tconv3d_backward(x, w, stride, padding, gout, need_x=True, need_w=True):
    dt = x.dtype
    pz, py, px = padding
    kdims = w.shape[2:]

    gx = gw = gb = None
    if need_x:
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4))
        gx = conv3d_forward(gout, wt, None, stride, padding)
    if need_w:
        gp = np.pad(gout, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
        win = _strided_windows(gp, kdims, stride)
        gw = np.tensordot(win, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gw = np.ascontiguousarray(np.moveaxis(gw, -1, 1), dtype=dt)
        gb = gout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
    return gx, gw, gb
