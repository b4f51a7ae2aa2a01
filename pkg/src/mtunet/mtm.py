"""Mixed Transformer Module and the stride-2 transition layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    ExternalMemory,
    LggSaParams,
    _as_batch,
    _unbatch,
    external_attention,
    from_tokens,
    init_external_memory,
    init_lgg_sa,
    kaiming_uniform,
    lgg_sa,
    to_tokens,
)
from .errors import ConfigError
from .optim import ParameterStore
from .tensor import Tensor

TRANSITION_KERNEL = 4


@dataclass
class MtmParams:
    lgg: LggSaParams
    ea: ExternalMemory
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class TransitionParams:
    direction: str
    kernel: Tensor
    bias: Tensor
    c_in: int
    c_out: int


def init_mtm(store: ParameterStore, prefix: str, cfg: AttentionConfig, rng: np.random.Generator) -> MtmParams:
    c = cfg.channels
    lgg = init_lgg_sa(store, f"{prefix}.lgg", cfg, rng)
    ea = init_external_memory(store, f"{prefix}.ea", cfg, rng)
    return MtmParams(
        lgg=lgg, ea=ea,
        ln1_gamma=store.add(f"{prefix}.ln1.gamma", np.ones(c)),
        ln1_beta=store.add(f"{prefix}.ln1.beta", np.zeros(c)),
        ln2_gamma=store.add(f"{prefix}.ln2.gamma", np.ones(c)),
        ln2_beta=store.add(f"{prefix}.ln2.beta", np.zeros(c)),
    )


def zero_output_projections(params: MtmParams) -> None:
    """Zero the last linear map of both residual branches (in place)."""
    params.lgg.fuse.data[...] = 0
    params.ea.wo.data[...] = 0


def mtm_forward(x: Tensor, params: MtmParams) -> Tensor:
    """Pre-norm residual block: h = x + LGG-SA(LN(x)); out = h + EA(LN(h))."""
    xb, squeeze = _as_batch(x)
    _, _, h, w = xb.shape
    tok = to_tokens(xb)
    n1 = T.layer_norm(tok, params.ln1_gamma, params.ln1_beta)
    hidden = T.add(tok, to_tokens(lgg_sa(from_tokens(n1, h, w), params.lgg)))
    n2 = T.layer_norm(hidden, params.ln2_gamma, params.ln2_beta)
    out = T.add(hidden, external_attention(n2, params.ea))
    return _unbatch(from_tokens(out, h, w), squeeze)


def init_transition(store: ParameterStore, prefix: str, c_in: int, direction: str,
                    rng: np.random.Generator) -> TransitionParams:
    k = TRANSITION_KERNEL
    if direction == "down":
        c_out = 2 * c_in
        kernel = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
    elif direction == "up":
        if c_in % 2:
            raise ConfigError(f"up transition needs an even channel count, got {c_in}")
        c_out = c_in // 2
        # conv2d layout (C_in, C_out, k, k): the transpose maps C_in -> C_out
        kernel = kaiming_uniform(rng, (c_in, c_out, k, k), c_in * (k // 2) ** 2)
    else:
        raise ConfigError(f"transition direction must be 'down' or 'up', got {direction!r}")
    return TransitionParams(direction, store.add(f"{prefix}.kernel", kernel),
                            store.add(f"{prefix}.bias", np.zeros(c_out)), c_in, c_out)


def transition(x: Tensor, params: TransitionParams) -> Tensor:
    """Stride-2 conv (down: C -> 2C, half extent) or transposed conv (up: C -> C/2, double extent)."""
    channels = x.shape[-3]
    if channels != params.c_in:
        raise ConfigError(f"{params.direction} transition expects {params.c_in} channels, got {channels}")
    if params.direction == "down":
        return T.conv2d(x, params.kernel, params.bias, stride=2, pad=1)
    return T.conv_transpose2d(x, params.kernel, params.bias, stride=2, pad=1)
