"""MT-UNet: convolutional shallow stages, MTM deep stages, mirrored decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, kaiming_uniform
from .errors import ConfigError, DataError, DimensionError
from .mtm import MtmParams, TransitionParams, init_mtm, init_transition, mtm_forward, transition
from .optim import ParameterStore
from .tensor import Tensor

DICE_SMOOTH = 1.0


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    num_classes: int = 3
    stage_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    mtm_stages: list = field(default_factory=lambda: [2, 3])
    p: int = 4
    ea_slots: int = 64
    ea_expand: int = 2
    heads: int = 1
    agg_mode: str = "dynamic"

    def __post_init__(self):
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.mtm_stages = sorted(int(s) for s in self.mtm_stages)

    def stage_size(self, stage: int) -> int:
        return self.input_size >> stage

    def validate(self) -> None:
        n = self.input_size
        if n < 1 or n & (n - 1):
            raise ConfigError(f"input_size must be a power of two, got {n}")
        widths = self.stage_widths
        if not widths:
            raise ConfigError("stage_widths must not be empty")
        if any(b != 2 * a for a, b in zip(widths, widths[1:])) or widths[0] < 1:
            raise ConfigError(f"stage_widths must double at every stage, got {widths}")
        if self.stage_size(len(widths) - 1) < 1:
            raise ConfigError(f"input_size {n} too small for {len(widths)} stages")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        for s in self.mtm_stages:
            if not 0 <= s < len(widths):
                raise ConfigError(f"mtm_stages entry {s} outside 0..{len(widths) - 1}")
            if self.stage_size(s) % self.p:
                raise ConfigError(f"mtm_stages: stage {s} extent {self.stage_size(s)} not divisible by p={self.p}")
            if widths[s] % self.heads:
                raise ConfigError(f"heads: {self.heads} does not divide stage {s} width {widths[s]}")
        if self.ea_slots < 1:
            raise ConfigError(f"ea_slots must be positive, got {self.ea_slots}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ConvBlock:
    kernels: list
    biases: list
    gammas: list
    betas: list
    groups: int


@dataclass
class Conv1x1:
    kernel: Tensor
    bias: Tensor


@dataclass
class MTUNet:
    config: ModelConfig
    store: ParameterStore
    stem: ConvBlock
    encoder: list
    down: list
    up: list
    fuse: list
    decoder: list
    head: Conv1x1
    seed: int = 0

    def num_parameters(self) -> int:
        return self.store.num_parameters()


def _groups(c: int) -> int:
    return c // 8 if c >= 8 else 1


def _init_conv_block(store, prefix, c_in, c_out, n_convs, rng) -> ConvBlock:
    block = ConvBlock([], [], [], [], _groups(c_out))
    for i in range(n_convs):
        cin = c_in if i == 0 else c_out
        block.kernels.append(store.add(f"{prefix}.conv{i}.kernel", kaiming_uniform(rng, (c_out, cin, 3, 3), cin * 9)))
        block.biases.append(store.add(f"{prefix}.conv{i}.bias", np.zeros(c_out)))
        block.gammas.append(store.add(f"{prefix}.norm{i}.gamma", np.ones(c_out)))
        block.betas.append(store.add(f"{prefix}.norm{i}.beta", np.zeros(c_out)))
    return block


def _init_1x1(store, prefix, c_in, c_out, rng) -> Conv1x1:
    return Conv1x1(store.add(f"{prefix}.kernel", kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in)),
                   store.add(f"{prefix}.bias", np.zeros(c_out)))


def build_model(config: ModelConfig, seed: int = 0, dtype=None) -> MTUNet:
    """Deterministically initialise every parameter from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore(dtype)
    widths = config.stage_widths
    mtm = set(config.mtm_stages)

    def stage_block(prefix, s):
        if s in mtm:
            acfg = AttentionConfig(channels=widths[s], p=config.p, heads=config.heads, slots=config.ea_slots,
                                   expand=config.ea_expand, agg_mode=config.agg_mode)
            return init_mtm(store, prefix, acfg, rng)
        return _init_conv_block(store, prefix, widths[s], widths[s], 2, rng)

    stem = _init_conv_block(store, "stem", config.in_channels, widths[0], 1, rng)
    encoder, down = [], []
    for s in range(len(widths)):
        if s > 0:
            down.append(init_transition(store, f"down{s - 1}", widths[s - 1], "down", rng))
        encoder.append(stage_block(f"enc{s}", s))
    up, fuse, decoder = [], [], []
    for s in range(len(widths) - 2, -1, -1):
        up.append(init_transition(store, f"up{s}", widths[s + 1], "up", rng))
        fuse.append(_init_1x1(store, f"skip{s}", 2 * widths[s], widths[s], rng))
        decoder.append(stage_block(f"dec{s}", s))
    head = _init_1x1(store, "head", widths[0], config.num_classes, rng)
    return MTUNet(config, store, stem, encoder, down, up, fuse, decoder, head, seed)


def _activation(config: ModelConfig, stage: int):
    return T.gelu if stage in config.mtm_stages else T.relu


def _conv_block(x: Tensor, block: ConvBlock) -> Tensor:
    for k, b, g, be in zip(block.kernels, block.biases, block.gammas, block.betas):
        x = T.relu(T.group_norm(T.conv2d(x, k, b, stride=1, pad=1), block.groups, g, be))
    return x


def _stage(x: Tensor, block) -> Tensor:
    if isinstance(block, MtmParams):
        return mtm_forward(x, block)
    return _conv_block(x, block)


def forward(model: MTUNet, images) -> Tensor:
    """(B, in_channels, H, W) images -> (B, num_classes, H, W) logits."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.store.dtype))
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"[stage input] input {x.shape} does not match (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")
    trace = "stem"
    try:
        x = _conv_block(x, model.stem)
        skips = []
        for s, block in enumerate(model.encoder):
            if s > 0:
                trace = f"down{s - 1}"
                x = _activation(cfg, s)(transition(x, model.down[s - 1]))
            trace = f"enc{s}"
            x = _stage(x, block)
            skips.append(x)
        n = len(cfg.stage_widths)
        for i, s in enumerate(range(n - 2, -1, -1)):
            act = _activation(cfg, s)
            trace = f"up{s}"
            x = act(transition(x, model.up[i]))
            trace = f"skip{s}"
            x = T.concat([x, skips[s]], axis=1)
            x = act(T.conv2d(x, model.fuse[i].kernel, model.fuse[i].bias))
            trace = f"dec{s}"
            x = _stage(x, model.decoder[i])
        trace = "head"
        return T.conv2d(x, model.head.kernel, model.head.bias)
    except DimensionError as exc:
        raise DimensionError(f"[stage {trace}] {exc}") from exc


def one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """(B, H, W) integer labels -> (B, K, H, W) indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def loss_terms(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Cross-entropy and soft-Dice loss (1 - mean Dice over classes), batch averaged."""
    b, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b, h, w):
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = Tensor(one_hot(labels, k, logits.dtype))
    ce = T.mul(T.tsum(T.mul(T.log_softmax(logits, 1), onehot)), -1.0 / (b * h * w))
    probs = T.softmax(logits, 1)
    inter = T.tsum(T.mul(probs, onehot), axis=(2, 3))
    denom = T.add(T.tsum(probs, axis=(2, 3)), onehot.data.sum(axis=(2, 3)))
    dice = T.div(T.add(T.mul(inter, 2.0), DICE_SMOOTH), T.add(denom, DICE_SMOOTH))
    dice_loss = T.sub(1.0, T.mean(dice))
    return ce, dice_loss


def loss(logits: Tensor, labels) -> Tensor:
    """0.5 * cross-entropy + 0.5 * (1 - mean soft Dice)."""
    ce, dice_loss = loss_terms(logits, labels)
    return T.add(T.mul(ce, 0.5), T.mul(dice_loss, 0.5))


def predict(model: MTUNet, images, batch_size: int = 8) -> np.ndarray:
    """Argmax class map for a stack of images, without recording a graph."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(np.argmax(forward(model, images[i:i + batch_size]).data, axis=1))
    return np.concatenate(out).astype(np.int64)
