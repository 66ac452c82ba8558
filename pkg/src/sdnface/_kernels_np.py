"""Numpy fallback for the hot kernels.

Same contracts as the compiled module ``sdnface._kernels``: float32 or
float64 arrays in, float64 accumulation inside, results cast back to the
input dtype.  Convolution goes through im2col + GEMM; scratch is chunked
over the batch so the column matrix never exceeds ~64 MB.
"""
import numpy as np

_SCRATCH_BYTES = 1 << 26

COMPILED = False


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _batch_chunks(batch, per_item_bytes):
    step = max(1, _SCRATCH_BYTES // max(1, per_item_bytes))
    for lo in range(0, batch, step):
        yield lo, min(batch, lo + step)


def _im2col(xp, k, stride, h_out, w_out):
    """(n, C, Hp, Wp) -> float64 columns (n, h_out, w_out, C, k, k)."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, h_out, w_out, c, k, k), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            win = xp[:, :, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride]
            cols[:, :, :, :, ky, kx] = win.transpose(0, 2, 3, 1)
    return cols


def conv2d_forward(x, w, b, stride, padding):
    batch, _, h, wid = x.shape
    o, c, k, _ = w.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wid + 2 * padding - k) // stride + 1
    xp = _pad(x, padding)
    wmat = w.reshape(o, -1).astype(np.float64)
    bias = b.astype(np.float64)
    out = np.empty((batch, o, h_out, w_out), dtype=x.dtype)
    per_item = h_out * w_out * c * k * k * 8
    for lo, hi in _batch_chunks(batch, per_item):
        cols = _im2col(xp[lo:hi], k, stride, h_out, w_out)
        y = cols.reshape((hi - lo) * h_out * w_out, -1) @ wmat.T
        y += bias
        out[lo:hi] = y.reshape(hi - lo, h_out, w_out, o).transpose(0, 3, 1, 2)
    return out


def conv2d_backward(x, w, stride, padding, dy):
    batch, c, h, wid = x.shape
    o, _, k, _ = w.shape
    h_out, w_out = dy.shape[2], dy.shape[3]
    xp = _pad(x, padding)
    wmat = w.reshape(o, -1).astype(np.float64)
    dw = np.zeros((o, c * k * k), dtype=np.float64)
    db = np.zeros(o, dtype=np.float64)
    dxp = np.zeros(xp.shape, dtype=np.float64)
    per_item = h_out * w_out * c * k * k * 8
    for lo, hi in _batch_chunks(batch, per_item):
        d = dy[lo:hi].astype(np.float64)
        db += d.sum(axis=(0, 2, 3))
        cols = _im2col(xp[lo:hi], k, stride, h_out, w_out)
        d2 = d.transpose(0, 2, 3, 1).reshape(-1, o)
        dw += d2.T @ cols.reshape(d2.shape[0], -1)
        dcols = (d2 @ wmat).reshape(hi - lo, h_out, w_out, c, k, k)
        dxp_c = dxp[lo:hi]
        for ky in range(k):
            for kx in range(k):
                dxp_c[:, :, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride] += \
                    dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if padding:
        dx = dxp[:, :, padding:padding + h, padding:padding + wid]
    else:
        dx = dxp
    return dx.astype(x.dtype), dw.reshape(w.shape).astype(w.dtype), db.astype(w.dtype)


def maxpool2x2_forward(x):
    batch, c, h, wid = x.shape
    h_out, w_out = (h + 1) // 2, (wid + 1) // 2
    if h % 2 or wid % 2:
        # pad right/bottom with -inf so a padded cell can never win
        xe = np.full((batch, c, 2 * h_out, 2 * w_out), -np.inf, dtype=x.dtype)
        xe[:, :, :h, :wid] = x
    else:
        xe = x
    win = xe.reshape(batch, c, h_out, 2, w_out, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(batch, c, h_out, w_out, 4)
    arg = win.argmax(axis=4)  # first max -> lowest row-major index on ties
    y = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    rows = 2 * np.arange(h_out)[:, None] + arg // 2
    cols = 2 * np.arange(w_out)[None, :] + arg % 2
    indices = (rows * wid + cols).astype(np.int64)
    return np.ascontiguousarray(y), np.ascontiguousarray(indices)


def maxpool2x2_backward(indices, input_shape, dy):
    batch, c, h, wid = input_shape
    dx = np.zeros((batch, c, h * wid), dtype=dy.dtype)
    np.put_along_axis(dx, indices.reshape(batch, c, -1), dy.reshape(batch, c, -1), axis=2)
    return dx.reshape(input_shape)
