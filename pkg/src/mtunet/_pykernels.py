"""Pure numpy implementations of the hot kernels.

These are the reference path and the fallback when the compiled extension
is unavailable. Signatures match ``_ckernels`` exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, out_h, out_w):
    """(B, C, Hp, Wp) padded input -> (B, C*k*k, out_h*out_w) patch matrix."""
    b, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(b, c * k * k, out_h * out_w)


def col2im(cols, channels, hp, wp, k, stride):
    """Scatter-add adjoint of :func:`im2col`."""
    b = cols.shape[0]
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    cols = cols.reshape(b, channels, k, k, out_h, out_w)
    out = np.zeros((b, channels, hp, wp), dtype=cols.dtype)
    h_end = (out_h - 1) * stride + 1
    w_end = (out_w - 1) * stride + 1
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + h_end : stride, dj : dj + w_end : stride] += cols[:, :, di, dj]
    return out


def min_distances(a, b, chunk=4096):
    """For each row of ``a`` (n, 2), the Euclidean distance to the nearest row of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(a.shape[0], dtype=np.float64)
    step = max(1, chunk // max(1, b.shape[0]))
    for s in range(0, a.shape[0], step):
        d = a[s : s + step, None, :] - b[None, :, :]
        out[s : s + step] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", d, d), axis=1))
    return out
