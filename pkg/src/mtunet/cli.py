"""``mtunet`` command line: train | eval | gradcheck | bench | synth."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, aggregate, full_self_attention, gaussian_axial_attention,
                        init_lgg_sa, lgg_sa, local_self_attention)
from .data import SampleBatch, SynthSpec, augment_batch, synth_generate
from .errors import ConfigError, CorruptionError, DataError, FormatError, MtunetError, NumericalError
from .fileio import load_array, load_checkpoint, restore_into, save_checkpoint, save_tensor
from .gradcheck import grad_check
from .metrics import evaluate
from .model import ModelConfig, build_model, forward, loss, predict
from .optim import ParameterStore, adam_step

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "checkpoint.mtc"
IMAGES_NAME = "images.mtt"
LABELS_NAME = "labels.mtt"


def _tiny_model() -> dict:
    return {"input_size": 16, "in_channels": 1, "num_classes": 3, "stage_widths": [4, 8, 16, 32],
            "mtm_stages": [1, 2], "p": 4, "ea_slots": 8, "ea_expand": 2, "heads": 1, "agg_mode": "dynamic"}


@dataclass
class RunConfig:
    """Every knob of every subcommand; each field has a default."""

    # model
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
    # data
    seed: int = 0
    data_seed: int = 0
    count: int = 200
    eval_count: int = 40
    noise: float = 0.1
    augment: bool = False
    # optimizer and loop
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 12
    steps: int = 300
    ckpt_every: int = 100
    # gradcheck
    gradcheck_model: dict = field(default_factory=_tiny_model)
    gradcheck_eps: float = 1e-4
    gradcheck_jitter: float = 0.1
    gradcheck_tol: float = 1e-3
    # bench
    bench_sizes: list = field(default_factory=lambda: [16, 32, 64])
    bench_channels: int = 32
    bench_repeats: int = 5
    # paths
    out: str = "runs/default"
    ckpt: str = ""
    data: str = ""
    pred: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.to_dict())

    def synth_spec(self, count: int | None = None) -> SynthSpec:
        return SynthSpec(seed=self.data_seed, count=self.count if count is None else count,
                         size=self.input_size, num_classes=self.num_classes, noise=self.noise,
                         augment=False)

    def validate(self) -> None:
        for name in ("batch", "bench_repeats", "bench_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "count", "eval_count", "ckpt_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.lr > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or not self.eps > 0:
            raise ConfigError("optimizer settings need lr > 0, 0 <= beta1, beta2 < 1 and eps > 0")


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config field {name!r} expects {type(default).__name__}, got {value!r}")
    return value


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON config file, then command-line overrides."""
    values = {}
    if path:
        try:
            with open(path) as f:
                values = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {path!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path!r} must hold a JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()})
    cfg.validate()
    return cfg


def _prepare_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, CONFIG_NAME), "w", newline="\n") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return cfg.out


def _write_csv(path: str, header: list, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ----------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    batch = synth_generate(cfg.synth_spec())
    save_tensor(batch.images, os.path.join(out, IMAGES_NAME))
    save_tensor(batch.labels, os.path.join(out, LABELS_NAME))
    _log(f"wrote {len(batch)} samples to {out}")
    return EXIT_OK


def load_dataset(directory: str) -> SampleBatch:
    try:
        images = load_array(os.path.join(directory, IMAGES_NAME))
        labels = load_array(os.path.join(directory, LABELS_NAME))
    except FileNotFoundError as exc:
        raise DataError(f"dataset file missing: {exc.filename}") from None
    return SampleBatch(images.astype(np.float32), labels.astype(np.int64))


# ----------------------------------------------------------------------------
# train


class BatchSampler:
    """Shuffled epochs of fixed-size batches, deterministic under the seed."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if n < 1:
            raise DataError("training set is empty")
        self.n, self.batch, self.rng = n, batch, rng
        self.queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self.queue) < self.batch:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        idx, self.queue = self.queue[:self.batch], self.queue[self.batch:]
        return idx


def train_model(cfg: RunConfig, train: SampleBatch, on_step=None, ckpt_path: str | None = None):
    """Run the training loop and return the model; ``on_step(step, loss)`` sees every step."""
    mcfg = cfg.model_config()
    model = build_model(mcfg, seed=cfg.seed)
    if cfg.ckpt:
        store, _, _ = load_checkpoint(cfg.ckpt, expected_config=mcfg.to_dict())
        restore_into(model.store, store)
    train.check_labels(mcfg.num_classes)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    sampler = BatchSampler(len(train), cfg.batch, rng)

    def checkpoint():
        if ckpt_path:
            save_checkpoint(model.store, mcfg, ckpt_path, seed=cfg.seed)

    checkpoint()
    for step in range(1, cfg.steps + 1):
        batch = train[sampler.next()]
        if cfg.augment:
            batch = augment_batch(batch, rng)
        try:
            value = loss(forward(model, batch.images), batch.labels)
            if not math.isfinite(value.item()):
                raise NumericalError("loss is not finite")
            value.backward()
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}; last good checkpoint kept at {ckpt_path}") from exc
        adam_step(model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if on_step is not None:
            on_step(step, value.item())
        if cfg.ckpt_every and step % cfg.ckpt_every == 0:
            checkpoint()
    checkpoint()
    return model


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    train = load_dataset(cfg.data) if cfg.data else synth_generate(cfg.synth_spec())
    losses: list = []
    with open(os.path.join(out, "loss.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])

        def on_step(step, value):
            w.writerow([step, repr(value)])
            f.flush()
            losses.append(value)

        train_model(cfg, train, on_step, os.path.join(out, CHECKPOINT_NAME))
    if losses:
        _log(f"step {len(losses)}: loss {losses[-1]:.6f} (initial {losses[0]:.6f})")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def write_reports(out: str, pred: np.ndarray, gt: np.ndarray, num_classes: int):
    samples, agg = evaluate(pred, gt, num_classes)
    rows = []
    for i, rep in enumerate(samples):
        for c in rep.per_class:
            rows.append([i, c.class_id, repr(c.dsc), "" if c.hd95 is None else repr(c.hd95)])
    _write_csv(os.path.join(out, "per_sample.csv"), ["sample", "class_id", "dsc", "hd95"], rows)
    with open(os.path.join(out, "aggregate.csv"), "w", newline="") as f:
        f.write(agg.to_csv())
    with open(os.path.join(out, "report.txt"), "w", newline="\n") as f:
        f.write(agg.to_text())
    return samples, agg


def cmd_eval(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    if cfg.data:
        data = load_dataset(cfg.data)
    else:
        data = synth_generate(cfg.synth_spec(cfg.eval_count), start=cfg.count)
    data.check_labels(cfg.num_classes)
    if cfg.pred:
        pred = load_array(cfg.pred).astype(np.int64)
    else:
        if not cfg.ckpt:
            raise ConfigError("eval needs --ckpt (or --pred with precomputed labels)")
        mcfg = cfg.model_config()
        store, _, _ = load_checkpoint(cfg.ckpt, expected_config=mcfg.to_dict())
        model = build_model(mcfg, seed=cfg.seed)
        restore_into(model.store, store)
        pred = predict(model, data.images)
    if pred.shape != data.labels.shape:
        raise DataError(f"predictions {pred.shape} do not match labels {data.labels.shape}")
    _, agg = write_reports(out, pred, data.labels, cfg.num_classes)
    sys.stdout.write(agg.to_text())
    return EXIT_OK


# ----------------------------------------------------------------------------
# gradcheck


def generic_point(store: ParameterStore, scale: float, rng: np.random.Generator) -> None:
    """Redraw all-zero parameters (biases, norm shifts) from U(-scale, scale).

    At the zero initialisation a dead ReLU input leaves a pre-activation at
    exactly 0, where the loss has a kink and central differences return the
    mean of the two one-sided slopes.
    """
    for p in store.params.values():
        if not p.data.any():
            p.data[...] = rng.uniform(-scale, scale, p.shape)


def cmd_gradcheck(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    mcfg = ModelConfig.from_dict({**_tiny_model(), **cfg.gradcheck_model})
    with T.default_dtype(np.float64):
        model = build_model(mcfg, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        generic_point(model.store, cfg.gradcheck_jitter, rng)
        images = rng.random((1, mcfg.in_channels, mcfg.input_size, mcfg.input_size))
        labels = rng.integers(0, mcfg.num_classes, (1, mcfg.input_size, mcfg.input_size))
        start = time.perf_counter()
        report = grad_check(lambda _: loss(forward(model, images), labels), model.store,
                            eps=cfg.gradcheck_eps, tol=cfg.gradcheck_tol)
        elapsed = time.perf_counter() - start
    table = report.table()
    with open(os.path.join(out, "gradcheck.txt"), "w", newline="\n") as f:
        f.write(table + "\n")
    print(table)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_error:.3e} over {model.num_parameters()} scalars "
          f"in {len(report.errors)} parameters ({elapsed:.1f} s)")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ----------------------------------------------------------------------------
# bench


MECHANISMS = ("full_sa", "lsa", "gsa", "lgg_sa")


def bench_rows(cfg: RunConfig, timing: bool = True) -> list[dict]:
    """MACs and median wall time per mechanism and map size, plus ratios to the previous size."""
    for s in cfg.bench_sizes:
        if s % cfg.p:
            raise ConfigError(f"bench_sizes entry {s} not divisible by p={cfg.p}")
    rows = []
    prev: dict = {}
    with T.no_grad():
        for s in cfg.bench_sizes:
            store = ParameterStore(np.float32)
            rng = np.random.default_rng(cfg.seed)
            params = init_lgg_sa(store, "bench", AttentionConfig(cfg.bench_channels, p=cfg.p, heads=cfg.heads,
                                                                 agg_mode=cfg.agg_mode), rng)
            x = T.Tensor(rng.standard_normal((1, cfg.bench_channels, s, s)).astype(np.float32))
            g = aggregate(x, params.agg, cfg.p)
            runs = {"full_sa": lambda: full_self_attention(x, params),
                    "lsa": lambda: local_self_attention(x, params),
                    "gsa": lambda: gaussian_axial_attention(g, params),
                    "lgg_sa": lambda: lgg_sa(x, params)}
            for mech in MECHANISMS:
                with T.count_flops() as counter:
                    runs[mech]()
                macs = counter.macs
                wall = math.nan
                if timing:
                    times = []
                    for _ in range(cfg.bench_repeats):
                        t0 = time.perf_counter()
                        runs[mech]()
                        times.append(time.perf_counter() - t0)
                    wall = statistics.median(times)
                ratio = macs / prev[mech] if mech in prev else math.nan
                prev[mech] = macs
                rows.append({"mechanism": mech, "side": s, "tokens": s * s, "macs": macs,
                             "wall_time_s": wall, "mac_ratio": ratio})
    return rows


def cmd_bench(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    rows = bench_rows(cfg)
    header = ["mechanism", "side", "tokens", "macs", "wall_time_s", "mac_ratio"]

    def fmt(v):
        if isinstance(v, float):
            return "" if math.isnan(v) else f"{v:.6g}"
        return v

    _write_csv(os.path.join(out, "bench.csv"), header, ([fmt(r[h]) for h in header] for r in rows))
    for r in rows:
        print(",".join(str(fmt(r[h])) for h in header))
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench, "synth": cmd_synth}


def _override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtunet", description="Mixed transformer U-Net toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--steps", type=int)
        p.add_argument("--ckpt", help="checkpoint to load")
        p.add_argument("--data", help="dataset directory written by 'synth'")
        p.add_argument("--pred", help="label tensor file used as predictions (eval)")
        p.add_argument("--set", action="append", type=_override, default=[], metavar="KEY=VALUE",
                       help="override any config field (value parsed as JSON)")
        p.add_argument("--corrupt-backward", action="append", default=[], help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = dict(args.set)
    overrides.update({k: getattr(args, k) for k in ("seed", "out", "steps", "ckpt", "data", "pred")})
    T.CORRUPT_BACKWARD.update(args.corrupt_backward)
    try:
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataError, FormatError, CorruptionError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except MtunetError as exc:
        _log(f"error: {exc}")
        return 1
    finally:
        T.CORRUPT_BACKWARD.difference_update(args.corrupt_backward)


if __name__ == "__main__":
    sys.exit(main())
