# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled 3D convolution kernels.

Every parallel loop partitions work so that each output element is written
by exactly one task and inner accumulation order is fixed, which makes the
results bitwise identical for any thread count. Weight gradients accumulate
in double precision.
"""

from cython.parallel import prange
from libc.stdlib cimport free, malloc

ctypedef fused floating:
    float
    double


def conv_fwd(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
             floating[::1] bias, Py_ssize_t sz, Py_ssize_t sy, Py_ssize_t sx,
             floating[:, :, :, :, ::1] out, int nthreads):
    cdef Py_ssize_t B = out.shape[0], CO = out.shape[1]
    cdef Py_ssize_t OZ = out.shape[2], OY = out.shape[3], OX = out.shape[4]
    cdef Py_ssize_t CI = xp.shape[1], KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t bc, b, co, ci, kz, ky, kx, oz, oy, ox, iz, iy
    cdef floating wv
    cdef floating *orow
    cdef floating *xrow

    for bc in prange(B * CO, nogil=True, schedule='static', num_threads=nthreads):
        b = bc // CO
        co = bc % CO
        for oz in range(OZ):
            for oy in range(OY):
                orow = &out[b, co, oz, oy, 0]
                for ox in range(OX):
                    orow[ox] = bias[co]
                for ci in range(CI):
                    for kz in range(KZ):
                        iz = oz * sz + kz
                        for ky in range(KY):
                            iy = oy * sy + ky
                            xrow = &xp[b, ci, iz, iy, 0]
                            for kx in range(KX):
                                wv = w[co, ci, kz, ky, kx]
                                if sx == 1:
                                    for ox in range(OX):
                                        orow[ox] = orow[ox] + wv * xrow[ox + kx]
                                else:
                                    for ox in range(OX):
                                        orow[ox] = orow[ox] + wv * xrow[ox * sx + kx]
    return 0


def conv_bwd_x(floating[:, :, :, :, ::1] gout, floating[:, :, :, :, ::1] w,
               Py_ssize_t sz, Py_ssize_t sy, Py_ssize_t sx,
               floating[:, :, :, :, ::1] gxp, int nthreads):
    cdef Py_ssize_t B = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t OZ = gout.shape[2], OY = gout.shape[3], OX = gout.shape[4]
    cdef Py_ssize_t CI = gxp.shape[1], KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t bc, b, co, ci, kz, ky, kx, oz, oy, ox
    cdef floating wv
    cdef floating *gxrow
    cdef floating *grow

    for bc in prange(B * CI, nogil=True, schedule='static', num_threads=nthreads):
        b = bc // CI
        ci = bc % CI
        for oz in range(OZ):
            for oy in range(OY):
                for co in range(CO):
                    grow = &gout[b, co, oz, oy, 0]
                    for kz in range(KZ):
                        for ky in range(KY):
                            gxrow = &gxp[b, ci, oz * sz + kz, oy * sy + ky, 0]
                            for kx in range(KX):
                                wv = w[co, ci, kz, ky, kx]
                                if sx == 1:
                                    for ox in range(OX):
                                        gxrow[ox + kx] = gxrow[ox + kx] + wv * grow[ox]
                                else:
                                    for ox in range(OX):
                                        gxrow[ox * sx + kx] = gxrow[ox * sx + kx] + wv * grow[ox]
    return 0


def conv_bwd_w(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] gout,
               Py_ssize_t sz, Py_ssize_t sy, Py_ssize_t sx,
               floating[:, :, :, :, ::1] gw, int nthreads):
    cdef Py_ssize_t B = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t OZ = gout.shape[2], OY = gout.shape[3], OX = gout.shape[4]
    cdef Py_ssize_t CI = gw.shape[1], KZ = gw.shape[2], KY = gw.shape[3], KX = gw.shape[4]
    cdef Py_ssize_t wc, b, co, ci, kz, ky, kx, oz, oy, ox
    cdef double acc
    cdef double *lane
    cdef floating *xrow
    cdef floating *grow

    for wc in prange(CO * CI, nogil=True, schedule='static', num_threads=nthreads):
        co = wc // CI
        ci = wc % CI
        lane = <double *> malloc(OX * sizeof(double))
        for kz in range(KZ):
            for ky in range(KY):
                for kx in range(KX):
                    for ox in range(OX):
                        lane[ox] = 0.0
                    for b in range(B):
                        for oz in range(OZ):
                            for oy in range(OY):
                                grow = &gout[b, co, oz, oy, 0]
                                xrow = &xp[b, ci, oz * sz + kz, oy * sy + ky, 0]
                                if sx == 1:
                                    for ox in range(OX):
                                        lane[ox] = lane[ox] + (<double> grow[ox]) * (<double> xrow[ox + kx])
                                else:
                                    for ox in range(OX):
                                        lane[ox] = lane[ox] + (<double> grow[ox]) * (<double> xrow[ox * sx + kx])
                    acc = 0.0
                    for ox in range(OX):
                        acc = acc + lane[ox]
                    gw[co, ci, kz, ky, kx] = <floating> acc
        free(lane)
    return 0


def tconv_fwd(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] w,
              floating[::1] bias, Py_ssize_t sz, Py_ssize_t sy, Py_ssize_t sx,
              Py_ssize_t pz, Py_ssize_t py, Py_ssize_t px,
              floating[:, :, :, :, ::1] out, int nthreads):
    cdef Py_ssize_t B = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4]
    cdef Py_ssize_t CO = out.shape[1], OZ = out.shape[2], OY = out.shape[3], OX = out.shape[4]
    cdef Py_ssize_t KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t bc, b, co, ci, kz, ky, kx, z, y, xi, uz, uy
    cdef Py_ssize_t zlo, zhi, ylo, yhi, xlo, xhi
    cdef floating wv
    cdef floating *orow
    cdef floating *xrow

    for bc in prange(B * CO, nogil=True, schedule='static', num_threads=nthreads):
        b = bc // CO
        co = bc % CO
        for uz in range(OZ):
            for uy in range(OY):
                orow = &out[b, co, uz, uy, 0]
                for xi in range(OX):
                    orow[xi] = bias[co]
        for ci in range(CI):
            for kz in range(KZ):
                zlo = 0 if kz >= pz else (pz - kz + sz - 1) // sz
                zhi = (OZ - 1 - kz + pz) // sz if OZ - 1 - kz + pz >= 0 else -1
                if zhi > Z - 1:
                    zhi = Z - 1
                for ky in range(KY):
                    ylo = 0 if ky >= py else (py - ky + sy - 1) // sy
                    yhi = (OY - 1 - ky + py) // sy if OY - 1 - ky + py >= 0 else -1
                    if yhi > Y - 1:
                        yhi = Y - 1
                    for kx in range(KX):
                        xlo = 0 if kx >= px else (px - kx + sx - 1) // sx
                        xhi = (OX - 1 - kx + px) // sx if OX - 1 - kx + px >= 0 else -1
                        if xhi > X - 1:
                            xhi = X - 1
                        wv = w[co, ci, kz, ky, kx]
                        for z in range(zlo, zhi + 1):
                            uz = z * sz + kz - pz
                            for y in range(ylo, yhi + 1):
                                uy = y * sy + ky - py
                                xrow = &x[b, ci, z, y, 0]
                                orow = &out[b, co, uz, uy, 0]
                                for xi in range(xlo, xhi + 1):
                                    orow[xi * sx + kx - px] = orow[xi * sx + kx - px] + wv * xrow[xi]
    return 0


def tconv_bwd_w(floating[:, :, :, :, ::1] x, floating[:, :, :, :, ::1] gout,
                Py_ssize_t sz, Py_ssize_t sy, Py_ssize_t sx,
                Py_ssize_t pz, Py_ssize_t py, Py_ssize_t px,
                floating[:, :, :, :, ::1] gw, int nthreads):
    cdef Py_ssize_t B = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4]
    cdef Py_ssize_t CO = gout.shape[1], OZ = gout.shape[2], OY = gout.shape[3], OX = gout.shape[4]
    cdef Py_ssize_t KZ = gw.shape[2], KY = gw.shape[3], KX = gw.shape[4]
    cdef Py_ssize_t wc, b, co, ci, kz, ky, kx, z, y, xi
    cdef Py_ssize_t zlo, zhi, ylo, yhi, xlo, xhi
    cdef double acc
    cdef double *lane
    cdef floating *xrow
    cdef floating *grow

    for wc in prange(CO * CI, nogil=True, schedule='static', num_threads=nthreads):
        co = wc // CI
        ci = wc % CI
        lane = <double *> malloc(X * sizeof(double))
        for kz in range(KZ):
            zlo = 0 if kz >= pz else (pz - kz + sz - 1) // sz
            zhi = (OZ - 1 - kz + pz) // sz if OZ - 1 - kz + pz >= 0 else -1
            if zhi > Z - 1:
                zhi = Z - 1
            for ky in range(KY):
                ylo = 0 if ky >= py else (py - ky + sy - 1) // sy
                yhi = (OY - 1 - ky + py) // sy if OY - 1 - ky + py >= 0 else -1
                if yhi > Y - 1:
                    yhi = Y - 1
                for kx in range(KX):
                    xlo = 0 if kx >= px else (px - kx + sx - 1) // sx
                    xhi = (OX - 1 - kx + px) // sx if OX - 1 - kx + px >= 0 else -1
                    if xhi > X - 1:
                        xhi = X - 1
                    for xi in range(X):
                        lane[xi] = 0.0
                    for b in range(B):
                        for z in range(zlo, zhi + 1):
                            for y in range(ylo, yhi + 1):
                                xrow = &x[b, ci, z, y, 0]
                                grow = &gout[b, co, z * sz + kz - pz, y * sy + ky - py, 0]
                                for xi in range(xlo, xhi + 1):
                                    lane[xi] = lane[xi] + (<double> xrow[xi]) * (<double> grow[xi * sx + kx - px])
                    acc = 0.0
                    for xi in range(X):
                        acc = acc + lane[xi]
                    gw[co, ci, kz, ky, kx] = <floating> acc
        free(lane)
    return 0
