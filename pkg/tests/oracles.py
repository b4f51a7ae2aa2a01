"""Slow, loop-based reference implementations used only by the tests."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def axial_positions(i, j, hg, wg):
    """Every grid cell sharing a row or a column with (i, j), by exhaustive scan."""
    return {(a, b) for a in range(hg) for b in range(wg) if a == i or b == j}


def axial_attention(g, wq, wk, wv, wo, w=0.0):
    """Loop oracle for single-head axial attention with additive ``w * dist^2`` bias.

    ``g`` is (C, Hg, Wg) in float64.
    """
    c, hg, wg = g.shape
    tok = g.reshape(c, -1).T
    q, k, v = tok @ wq, tok @ wk, tok @ wv
    out = np.zeros_like(tok)
    for i in range(hg):
        for j in range(wg):
            cells = sorted(axial_positions(i, j, hg, wg))
            logits = []
            for a, b in cells:
                d2 = (a - i) ** 2 + (b - j) ** 2
                logits.append(q[i * wg + j] @ k[a * wg + b] / math.sqrt(c) + w * d2)
            att = softmax_rows(np.array(logits))
            out[i * wg + j] = sum(att[t] * v[a * wg + b] for t, (a, b) in enumerate(cells))
    return (out @ wo).T.reshape(c, hg, wg)


def dice(a, b):
    inter = na = nb = 0
    for x, y in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        na += bool(x)
        nb += bool(y)
        inter += bool(x) and bool(y)
    return 1.0 if na + nb == 0 else 2 * inter / (na + nb)


def boundary_pixels(m):
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not m[a, b] for a, b in nbrs):
                pts.append((i, j))
    return pts


def _directed95(src, dst):
    d = sorted(min(math.hypot(a - c, b - e) for c, e in dst) for a, b in src)
    rank = math.ceil(Fraction(95, 100) * len(d))
    return d[rank - 1]


def hd95(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() or not b.any():
        return None
    pa, pb = boundary_pixels(a), boundary_pixels(b)
    return max(_directed95(pa, pb), _directed95(pb, pa))


def loss_loop(logits, labels, smooth=1.0):
    """0.5 CE + 0.5 (1 - mean soft Dice), pixel by pixel."""
    b, k, h, w = logits.shape
    ce = 0.0
    inter = np.zeros((b, k))
    psum = np.zeros((b, k))
    gsum = np.zeros((b, k))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                z = logits[n, :, i, j]
                m = max(z)
                lse = m + math.log(sum(math.exp(t - m) for t in z))
                y = labels[n, i, j]
                ce -= z[y] - lse
                for c in range(k):
                    pc = math.exp(z[c] - lse)
                    psum[n, c] += pc
                    if c == y:
                        inter[n, c] += pc
                        gsum[n, c] += 1
    ce /= b * h * w
    dice = (2 * inter + smooth) / (psum + gsum + smooth)
    return 0.5 * ce + 0.5 * (1 - dice.mean())
