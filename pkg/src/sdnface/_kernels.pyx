# cython: language_level=3
"""Compiled convolution and pooling kernels.

float32/float64 arrays in, float64 accumulation inside, results cast back
to the input dtype.  Summation order is fixed by the code path, so results
are reproducible bit for bit from run to run; the 3x3 stride-1 case takes
an unrolled fast path whose grouping differs from the generic loop (and
from the BLAS-backed fallback backend) by ordinary rounding only.
"""
import numpy as np

from cython cimport floating

COMPILED = True


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, int stride, int padding):
    cdef Py_ssize_t batch = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t h_out = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t w_out = (wid + 2 * padding - k) // stride + 1

    if floating is float:
        dt = np.float32
    else:
        dt = np.float64

    if padding:
        xp_arr = np.zeros((batch, c, h + 2 * padding, wid + 2 * padding), dtype=dt)
        xp_arr[:, :, padding:padding + h, padding:padding + wid] = np.asarray(x)
    else:
        xp_arr = np.asarray(x)
    cdef floating[:, :, :, ::1] xp = xp_arr

    out_arr = np.empty((batch, o, h_out, w_out), dtype=dt)
    cdef floating[:, :, :, ::1] out = out_arr
    # One output row of f64 partial sums stays in L1 across the whole
    # (ic, ky, kx) reduction; streaming the full plane instead is what
    # makes the naive loop memory bound.
    row_arr = np.empty(w_out, dtype=np.float64)
    cdef double[::1] row = row_arr
    cdef Py_ssize_t bi, oc, ic, ky, kx, oy, ox, iy
    cdef double wv, bv
    cdef double w00, w01, w02, w10, w11, w12, w20, w21, w22

    if k == 3 and stride == 1:
        for bi in range(batch):
            for oc in range(o):
                bv = <double> b[oc]
                for oy in range(h_out):
                    for ox in range(w_out):
                        row[ox] = bv
                    for ic in range(c):
                        w00 = <double> w[oc, ic, 0, 0]
                        w01 = <double> w[oc, ic, 0, 1]
                        w02 = <double> w[oc, ic, 0, 2]
                        w10 = <double> w[oc, ic, 1, 0]
                        w11 = <double> w[oc, ic, 1, 1]
                        w12 = <double> w[oc, ic, 1, 2]
                        w20 = <double> w[oc, ic, 2, 0]
                        w21 = <double> w[oc, ic, 2, 1]
                        w22 = <double> w[oc, ic, 2, 2]
                        for ox in range(w_out):
                            row[ox] += (
                                w00 * <double> xp[bi, ic, oy, ox]
                                + w01 * <double> xp[bi, ic, oy, ox + 1]
                                + w02 * <double> xp[bi, ic, oy, ox + 2]
                                + w10 * <double> xp[bi, ic, oy + 1, ox]
                                + w11 * <double> xp[bi, ic, oy + 1, ox + 1]
                                + w12 * <double> xp[bi, ic, oy + 1, ox + 2]
                                + w20 * <double> xp[bi, ic, oy + 2, ox]
                                + w21 * <double> xp[bi, ic, oy + 2, ox + 1]
                                + w22 * <double> xp[bi, ic, oy + 2, ox + 2])
                    for ox in range(w_out):
                        out[bi, oc, oy, ox] = <floating> row[ox]
        return out_arr

    for bi in range(batch):
        for oc in range(o):
            bv = <double> b[oc]
            for oy in range(h_out):
                for ox in range(w_out):
                    row[ox] = bv
                for ic in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky
                        for kx in range(k):
                            wv = <double> w[oc, ic, ky, kx]
                            if stride == 1:
                                for ox in range(w_out):
                                    row[ox] += wv * <double> xp[bi, ic, iy, ox + kx]
                            else:
                                for ox in range(w_out):
                                    row[ox] += wv * <double> xp[bi, ic, iy, ox * stride + kx]
                for ox in range(w_out):
                    out[bi, oc, oy, ox] = <floating> row[ox]
    return out_arr


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    int stride, int padding, floating[:, :, :, ::1] dy):
    cdef Py_ssize_t batch = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t h_out = dy.shape[2], w_out = dy.shape[3]

    if floating is float:
        dt = np.float32
    else:
        dt = np.float64

    if padding:
        xp_arr = np.zeros((batch, c, h + 2 * padding, wid + 2 * padding), dtype=dt)
        xp_arr[:, :, padding:padding + h, padding:padding + wid] = np.asarray(x)
    else:
        xp_arr = np.asarray(x)
    cdef floating[:, :, :, ::1] xp = xp_arr

    dxp_arr = np.zeros(np.asarray(xp_arr).shape, dtype=np.float64)
    dw_arr = np.zeros((o, c, k, k), dtype=np.float64)
    db_arr = np.zeros(o, dtype=np.float64)
    cdef double[:, :, :, ::1] dxp = dxp_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr

    cdef Py_ssize_t bi, oc, ic, ky, kx, oy, ox, iy, m4
    cdef Py_ssize_t hp = h + 2 * padding, wp = wid + 2 * padding
    cdef double wv, d, s_dw, s_db, s0, s1, s2, s3
    rowb_arr = np.empty(wp, dtype=np.float64)
    cdef double[::1] rowb = rowb_arr

    for bi in range(batch):
        for oc in range(o):
            s_db = 0.0
            for oy in range(h_out):
                for ox in range(w_out):
                    s_db += <double> dy[bi, oc, oy, ox]
            db[oc] += s_db

    if stride == 1:
        # Row-centric: finish one dx row at a time so the accumulator stays
        # in L1.  The dx update is a plain axpy the compiler can vectorize;
        # the dw dot runs over four independent partial sums (deterministic
        # grouping) so the chains overlap instead of serializing on FP
        # latency.
        m4 = w_out - (w_out & 3)
        for bi in range(batch):
            for ic in range(c):
                for iy in range(hp):
                    for ox in range(wp):
                        rowb[ox] = 0.0
                    for oc in range(o):
                        for ky in range(k):
                            oy = iy - ky
                            if oy < 0 or oy >= h_out:
                                continue
                            for kx in range(k):
                                wv = <double> w[oc, ic, ky, kx]
                                for ox in range(w_out):
                                    rowb[ox + kx] += wv * <double> dy[bi, oc, oy, ox]
                            for kx in range(k):
                                s0 = 0.0
                                s1 = 0.0
                                s2 = 0.0
                                s3 = 0.0
                                for ox in range(0, m4, 4):
                                    s0 += (<double> dy[bi, oc, oy, ox]
                                           * <double> xp[bi, ic, iy, ox + kx])
                                    s1 += (<double> dy[bi, oc, oy, ox + 1]
                                           * <double> xp[bi, ic, iy, ox + 1 + kx])
                                    s2 += (<double> dy[bi, oc, oy, ox + 2]
                                           * <double> xp[bi, ic, iy, ox + 2 + kx])
                                    s3 += (<double> dy[bi, oc, oy, ox + 3]
                                           * <double> xp[bi, ic, iy, ox + 3 + kx])
                                for ox in range(m4, w_out):
                                    s0 += (<double> dy[bi, oc, oy, ox]
                                           * <double> xp[bi, ic, iy, ox + kx])
                                dw[oc, ic, ky, kx] += ((s0 + s1) + s2) + s3
                    for ox in range(wp):
                        dxp[bi, ic, iy, ox] = rowb[ox]
    else:
        for bi in range(batch):
            for oc in range(o):
                for ic in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            wv = <double> w[oc, ic, ky, kx]
                            s_dw = 0.0
                            for oy in range(h_out):
                                iy = oy * stride + ky
                                for ox in range(w_out):
                                    d = <double> dy[bi, oc, oy, ox]
                                    dxp[bi, ic, iy, ox * stride + kx] += wv * d
                                    s_dw += d * <double> xp[bi, ic, iy, ox * stride + kx]
                            dw[oc, ic, ky, kx] += s_dw

    if padding:
        dx_arr = dxp_arr[:, :, padding:padding + h, padding:padding + wid]
    else:
        dx_arr = dxp_arr
    return np.ascontiguousarray(dx_arr).astype(dt), dw_arr.astype(dt), db_arr.astype(dt)


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t batch = x.shape[0], c = x.shape[1], h = x.shape[2], wid = x.shape[3]
    cdef Py_ssize_t h_out = (h + 1) // 2, w_out = (wid + 1) // 2

    if floating is float:
        dt = np.float32
    else:
        dt = np.float64

    y_arr = np.empty((batch, c, h_out, w_out), dtype=dt)
    idx_arr = np.empty((batch, c, h_out, w_out), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr

    cdef Py_ssize_t bi, ci, oy, ox, y0, x0, by, bx
    cdef floating best, v

    for bi in range(batch):
        for ci in range(c):
            for oy in range(h_out):
                y0 = 2 * oy
                for ox in range(w_out):
                    x0 = 2 * ox
                    best = x[bi, ci, y0, x0]
                    by = y0
                    bx = x0
                    if x0 + 1 < wid:
                        v = x[bi, ci, y0, x0 + 1]
                        if v > best:
                            best = v
                            bx = x0 + 1
                    if y0 + 1 < h:
                        v = x[bi, ci, y0 + 1, x0]
                        if v > best:
                            best = v
                            by = y0 + 1
                            bx = x0
                        if x0 + 1 < wid:
                            v = x[bi, ci, y0 + 1, x0 + 1]
                            if v > best:
                                best = v
                                by = y0 + 1
                                bx = x0 + 1
                    y[bi, ci, oy, ox] = best
                    idx[bi, ci, oy, ox] = by * wid + bx
    return y_arr, idx_arr


def maxpool2x2_backward(long long[:, :, :, ::1] indices, input_shape,
                        floating[:, :, :, ::1] dy):
    cdef Py_ssize_t batch = dy.shape[0], c = dy.shape[1]
    cdef Py_ssize_t h_out = dy.shape[2], w_out = dy.shape[3]
    cdef Py_ssize_t h = input_shape[2], wid = input_shape[3]

    if floating is float:
        dt = np.float32
    else:
        dt = np.float64

    dx_arr = np.zeros((batch, c, h * wid), dtype=dt)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t bi, ci, oy, ox

    for bi in range(batch):
        for ci in range(c):
            for oy in range(h_out):
                for ox in range(w_out):
                    dx[bi, ci, indices[bi, ci, oy, ox]] += dy[bi, ci, oy, ox]
    return dx_arr.reshape(batch, c, h, wid)
