"""Local-global Gaussian-weighted self-attention and external attention.

All public ops accept a single sample ``(C, H, W)`` or a batch
``(B, C, H, W)``; batch members never interact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import BoundsError, ConfigError, DimensionError
from .optim import ParameterStore
from .tensor import Tensor

AGG_MODES = ("dynamic", "strided-conv", "max-pool")


@dataclass
class AttentionConfig:
    channels: int
    p: int = 4
    heads: int = 1
    slots: int = 64
    expand: int = 2
    agg_mode: str = "dynamic"
    w_init: float | None = None

    @property
    def gaussian_init(self) -> float:
        return -1.0 / (2 * self.p ** 2) if self.w_init is None else self.w_init


@dataclass
class AggregatorParams:
    mode: str
    score: Tensor | None = None   # (C, p*p), dynamic mode
    kernel: Tensor | None = None  # (C, C, p, p), strided-conv mode
    bias: Tensor | None = None


@dataclass
class LggSaParams:
    p: int
    channels: int
    heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    agg: AggregatorParams
    gq: Tensor
    gk: Tensor
    gv: Tensor
    go: Tensor
    w: Tensor      # (heads,) Gaussian distance coefficient
    fuse: Tensor   # (2C, C)


@dataclass
class ExternalMemory:
    mk: Tensor         # (S, d)
    mv: Tensor         # (S, d)
    wq_expand: Tensor  # (C, d)
    wo: Tensor         # (d, C)

    @property
    def slots(self) -> int:
        return self.mk.shape[0]


@dataclass
class AxialNeighborhood:
    indices: list
    distances: list


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_aggregator(store: ParameterStore, prefix: str, channels: int, p: int, mode: str,
                    rng: np.random.Generator) -> AggregatorParams:
    if mode == "dynamic":
        return AggregatorParams(mode, score=store.add(f"{prefix}.score", kaiming_uniform(rng, (channels, p * p), channels)))
    if mode == "strided-conv":
        fan = channels * p * p
        return AggregatorParams(mode,
                                kernel=store.add(f"{prefix}.kernel", kaiming_uniform(rng, (channels, channels, p, p), fan)),
                                bias=store.add(f"{prefix}.bias", np.zeros(channels)))
    if mode == "max-pool":
        return AggregatorParams(mode)
    raise ConfigError(f"unknown aggregation mode {mode!r}; expected one of {AGG_MODES}")


def init_lgg_sa(store: ParameterStore, prefix: str, cfg: AttentionConfig,
                rng: np.random.Generator) -> LggSaParams:
    c = cfg.channels
    if c % cfg.heads:
        raise ConfigError(f"channels {c} not divisible by heads {cfg.heads}")

    def lin(name, fan_in=c, out=c):
        return store.add(f"{prefix}.{name}", kaiming_uniform(rng, (fan_in, out), fan_in))

    return LggSaParams(
        p=cfg.p, channels=c, heads=cfg.heads,
        wq=lin("local.wq"), wk=lin("local.wk"), wv=lin("local.wv"), wo=lin("local.wo"),
        agg=init_aggregator(store, f"{prefix}.agg", c, cfg.p, cfg.agg_mode, rng),
        gq=lin("global.wq"), gk=lin("global.wk"), gv=lin("global.wv"), go=lin("global.wo"),
        w=store.add(f"{prefix}.global.w", np.full(cfg.heads, cfg.gaussian_init)),
        fuse=lin("fuse", 2 * c, c),
    )


def init_external_memory(store: ParameterStore, prefix: str, cfg: AttentionConfig,
                         rng: np.random.Generator) -> ExternalMemory:
    if cfg.slots < 1:
        raise ConfigError(f"external attention needs at least one memory slot, got {cfg.slots}")
    c, d, s = cfg.channels, cfg.expand * cfg.channels, cfg.slots
    if d <= c:
        raise ConfigError(f"expanded width {d} must exceed channel width {c}")
    return ExternalMemory(
        mk=store.add(f"{prefix}.mk", kaiming_uniform(rng, (s, d), d)),
        mv=store.add(f"{prefix}.mv", kaiming_uniform(rng, (s, d), s)),
        wq_expand=store.add(f"{prefix}.wq", kaiming_uniform(rng, (c, d), c)),
        wo=store.add(f"{prefix}.wo", kaiming_uniform(rng, (d, c), d)),
    )


# ----------------------------------------------------------------------------
# layout helpers


def _as_batch(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got shape {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


def _check_window(h: int, w: int, p: int) -> None:
    if p < 1 or h % p or w % p:
        raise DimensionError(f"window size p={p} must divide H={h} and W={w}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, C) -> (..., heads, T, C/heads)"""
    *lead, t, c = x.shape
    if heads == 1:
        return T.reshape(x, tuple(lead) + (1, t, c))
    x = T.reshape(x, tuple(lead) + (t, heads, c // heads))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh)"""
    *lead, h, t, dh = x.shape
    if h == 1:
        return T.reshape(x, tuple(lead) + (t, dh))
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, tuple(lead) + (t, h * dh))


def to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)"""
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """(B, H*W, C) -> (B, C, H, W)"""
    b, _, c = x.shape
    return T.transpose(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


# ----------------------------------------------------------------------------
# windows


def window_partition(x: Tensor, p: int) -> Tensor:
    """(B?, C, H, W) -> (B?, H/p * W/p, p*p, C), tiles and tokens in row-major order."""
    xb, squeeze = _as_batch(x)
    b, c, h, w = xb.shape
    _check_window(h, w, p)
    y = T.reshape(xb, (b, c, h // p, p, w // p, p))
    y = T.transpose(y, (0, 2, 4, 3, 5, 1))
    y = T.reshape(y, (b, (h // p) * (w // p), p * p, c))
    return _unbatch(y, squeeze)


def window_reverse(windows: Tensor, h: int, w: int, p: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    squeeze = windows.ndim == 3
    wb = T.reshape(windows, (1,) + windows.shape) if squeeze else windows
    if wb.ndim != 4:
        raise DimensionError(f"windows must be (B?, nW, p*p, C), got {windows.shape}")
    _check_window(h, w, p)
    b, nw, t, c = wb.shape
    if nw != (h // p) * (w // p) or t != p * p:
        raise DimensionError(f"{nw} windows of {t} tokens inconsistent with H={h}, W={w}, p={p}")
    y = T.reshape(wb, (b, h // p, w // p, p, p, c))
    y = T.transpose(y, (0, 5, 1, 3, 2, 4))
    y = T.reshape(y, (b, c, h, w))
    return _unbatch(y, squeeze)


# ----------------------------------------------------------------------------
# local self-attention


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None) -> Tensor:
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    logits = T.mul(T.matmul(qh, T.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))), scale)
    if bias is not None:
        logits = T.add(logits, bias)
    return _merge_heads(T.matmul(T.softmax(logits, -1), vh))


def local_self_attention(x: Tensor, params: LggSaParams) -> Tensor:
    """Scaled dot-product attention restricted to non-overlapping p x p windows."""
    xb, squeeze = _as_batch(x)
    _, _, h, w = xb.shape
    win = window_partition(xb, params.p)
    q, k, v = (T.matmul(win, m) for m in (params.wq, params.wk, params.wv))
    out = T.matmul(_attend(q, k, v, params.heads), params.wo)
    return _unbatch(window_reverse(out, h, w, params.p), squeeze)


# ----------------------------------------------------------------------------
# aggregation


def aggregate(z: Tensor, agg: AggregatorParams, p: int) -> Tensor:
    """Pool each p x p window of (B?, C, H, W) into one token -> (B?, C, H/p, W/p)."""
    zb, squeeze = _as_batch(z)
    b, c, h, w = zb.shape
    _check_window(h, w, p)
    hg, wg = h // p, w // p
    if agg.mode == "strided-conv":
        return _unbatch(T.conv2d(zb, agg.kernel, agg.bias, stride=p, pad=0), squeeze)
    if agg.mode not in AGG_MODES:
        raise ConfigError(f"unknown aggregation mode {agg.mode!r}")
    win = window_partition(zb, p)  # (B, nW, p*p, C)
    if agg.mode == "max-pool":
        pooled = T.tmax(win, axis=2)
    else:
        scores = T.tsum(T.mul(win, T.transpose(agg.score, (1, 0))), axis=-1)  # (B, nW, p*p)
        weights = T.reshape(T.softmax(scores, -1), (b, hg * wg, 1, p * p))
        pooled = T.reshape(T.matmul(weights, win), (b, hg * wg, c))
    return _unbatch(from_tokens(pooled, hg, wg), squeeze)


# ----------------------------------------------------------------------------
# Gaussian-weighted axial attention


def axial_neighborhood(i: int, j: int, hg: int, wg: int) -> AxialNeighborhood:
    """Row ``i`` then column ``j`` of an hg x wg grid, with (i, j) listed once."""
    if not (0 <= i < hg and 0 <= j < wg):
        raise BoundsError(f"position ({i}, {j}) outside {hg}x{wg} grid")
    indices = [(i, jj) for jj in range(wg)] + [(ii, j) for ii in range(hg) if ii != i]
    distances = [float(abs(jj - j)) for jj in range(wg)] + [float(abs(ii - i)) for ii in range(hg) if ii != i]
    return AxialNeighborhood(indices, distances)


@lru_cache(maxsize=64)
def axial_tables(hg: int, wg: int):
    """Flat neighbor indices (N, L) and squared distances (N, 1, L) for every grid cell."""
    idx = np.empty((hg * wg, hg + wg - 1), dtype=np.intp)
    d2 = np.empty((hg * wg, 1, hg + wg - 1))
    for i in range(hg):
        for j in range(wg):
            nb = axial_neighborhood(i, j, hg, wg)
            idx[i * wg + j] = [a * wg + b for a, b in nb.indices]
            d2[i * wg + j, 0] = np.square(nb.distances)
    idx.setflags(write=False)
    d2.setflags(write=False)
    return idx, d2


def gaussian_axial_attention(g: Tensor, params: LggSaParams) -> Tensor:
    """Axial attention over the coarse grid with additive ``w * D^2`` logit bias."""
    gb, squeeze = _as_batch(g)
    b, c, hg, wg = gb.shape
    idx, d2 = axial_tables(hg, wg)
    heads = params.heads
    tok = to_tokens(gb)  # (B, N, C)
    q, k, v = (_split_heads(T.matmul(tok, m), heads) for m in (params.gq, params.gk, params.gv))  # (B, h, N, dh)
    dh = c // heads
    n, L = idx.shape
    k_nb = T.take(k, idx, axis=2)  # (B, h, N, L, dh)
    v_nb = T.take(v, idx, axis=2)
    q4 = T.reshape(q, (b, heads, n, 1, dh))
    logits = T.mul(T.matmul(q4, T.transpose(k_nb, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dh))
    bias = T.mul(T.reshape(params.w, (heads, 1, 1, 1)), Tensor(d2.astype(gb.dtype)))
    att = T.softmax(T.add(logits, bias), -1)  # (B, h, N, 1, L)
    out = T.reshape(T.matmul(att, v_nb), (b, heads, n, dh))
    out = T.matmul(_merge_heads(out), params.go)
    return _unbatch(from_tokens(out, hg, wg), squeeze)


# ----------------------------------------------------------------------------
# composite


def lgg_sa(x: Tensor, params: LggSaParams) -> Tensor:
    """Local SA, window aggregation, global axial SA, upsample, concat, 2C -> C projection."""
    xb, squeeze = _as_batch(x)
    _, _, h, w = xb.shape
    z_local = local_self_attention(xb, params)
    z_global = gaussian_axial_attention(aggregate(z_local, params.agg, params.p), params)
    z = T.concat([z_local, T.upsample_nearest(z_global, params.p)], axis=1)
    out = from_tokens(T.matmul(to_tokens(z), params.fuse), h, w)
    return _unbatch(out, squeeze)


# ----------------------------------------------------------------------------
# external attention


def double_normalize(logits: Tensor) -> Tensor:
    """Softmax over tokens (axis -2), then L1-normalize each token's row over slots."""
    a = T.softmax(logits, -2)
    return T.div(a, T.tsum(a, axis=-1, keepdims=True))


def external_attention(x_tokens: Tensor, mem: ExternalMemory) -> Tensor:
    """(B?, N, C) tokens attend to the shared memories M_K, M_V -> (B?, N, C).

    The expanded query passes through GELU before meeting M_K; without it a
    shift shared by all tokens would cancel in the token-axis softmax.
    """
    if mem.slots < 1:
        raise ConfigError("external attention needs at least one memory slot")
    if x_tokens.shape[-2] < 1:
        raise DimensionError("external attention needs at least one token")
    q = T.gelu(T.matmul(x_tokens, mem.wq_expand))
    a = double_normalize(T.matmul(q, T.transpose(mem.mk, (1, 0))))
    return T.matmul(T.matmul(a, mem.mv), mem.wo)


# ----------------------------------------------------------------------------
# reference


def full_self_attention(x: Tensor, params: LggSaParams) -> Tensor:
    """Quadratic self-attention over every token of the map; the cost baseline for benchmarks."""
    xb, squeeze = _as_batch(x)
    _, _, h, w = xb.shape
    tok = to_tokens(xb)
    q, k, v = (T.matmul(tok, m) for m in (params.wq, params.wk, params.wv))
    out = T.matmul(_attend(q, k, v, params.heads), params.wo)
    return _unbatch(from_tokens(out, h, w), squeeze)
