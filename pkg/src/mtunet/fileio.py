"""Bit-exact tensor files and checkpoints.

Tensor file: one JSON header line
``{"shape": [...], "dtype": "f32"|"f64", "byte_order": "little"}`` followed by
the raw row-major body.

Checkpoint: one JSON manifest line (tensor table with payload offsets, config
echo, seed, step counter) followed by the concatenated raw bodies.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigMismatchError, CorruptionError, FormatError
from .optim import ParameterStore
from .tensor import Tensor

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
CHECKPOINT_FORMAT = "mtunet-checkpoint"


def dtype_code(dtype) -> str:
    dtype = np.dtype(dtype)
    for code, dt in DTYPES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return code
    raise FormatError(f"dtype {dtype} cannot be stored")


def _header(shape, code) -> bytes:
    return (json.dumps({"shape": list(shape), "dtype": code, "byte_order": "little"}) + "\n").encode()


def _body(arr: np.ndarray, code: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def _parse_header(line: bytes) -> dict:
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise FormatError(f"field 'shape' invalid: {shape!r}")
    if header.get("dtype") not in DTYPES:
        raise FormatError(f"field 'dtype' invalid: {header.get('dtype')!r}")
    if header.get("byte_order") != "little":
        raise FormatError(f"field 'byte_order' invalid: {header.get('byte_order')!r}")
    return header


def save_tensor(t, path) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = dtype_code(arr.dtype)
    with open(path, "wb") as f:
        f.write(_header(arr.shape, code))
        f.write(_body(arr, code))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator")
    header = _parse_header(raw[:nl])
    dt = DTYPES[header["dtype"]]
    expected = int(np.prod(header["shape"], dtype=np.int64)) * dt.itemsize
    body = raw[nl + 1:]
    if len(body) != expected:
        raise CorruptionError(f"body length mismatch: expected {expected} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(header["shape"]).astype(dt.newbyteorder("="))


def load_tensor(path) -> Tensor:
    arr = load_array(path)
    if arr.dtype.kind != "f":
        raise FormatError(f"field 'dtype': {arr.dtype} is not a float tensor")
    return Tensor(arr)


# ----------------------------------------------------------------------------
# checkpoints


def _entries(store: ParameterStore):
    for name, p in store.items():
        yield name, p.data
        yield f"adam.m/{name}", store.m[name]
        yield f"adam.v/{name}", store.v[name]


def save_checkpoint(store: ParameterStore, config: dict, path, seed: int = 0) -> None:
    """Write parameters, Adam moments and the step counter atomically."""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    code = dtype_code(store.dtype)
    table, chunks, offset = [], [], 0
    for name, arr in _entries(store):
        body = _body(arr, code)
        table.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(body)})
        chunks.append(body)
        offset += len(body)
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "config": config, "seed": int(seed),
                "step": int(store.t), "tensors": table}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def check_config(saved: dict, expected: dict) -> None:
    """Raise naming the first field whose value differs."""
    for key in expected:
        if key not in saved or saved[key] != expected[key]:
            raise ConfigMismatchError(f"config field {key!r} mismatch: checkpoint has {saved.get(key)!r}, expected {expected[key]!r}")


def load_checkpoint(path, expected_config=None):
    """Return ``(store, config_dict, seed)``."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint manifest terminator missing")
    try:
        manifest = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    for key in ("format", "config", "seed", "step", "tensors"):
        if key not in manifest:
            raise FormatError(f"manifest field {key!r} missing")
    if manifest["format"] != CHECKPOINT_FORMAT:
        raise FormatError(f"manifest field 'format' invalid: {manifest['format']!r}")
    if expected_config is not None:
        if hasattr(expected_config, "to_dict"):
            expected_config = expected_config.to_dict()
        check_config(manifest["config"], expected_config)
    payload = raw[nl + 1:]
    table = manifest["tensors"]
    total = sum(e["nbytes"] for e in table)
    if total != len(payload):
        raise CorruptionError(f"payload length mismatch: manifest declares {total} bytes, found {len(payload)}")
    codes = {e["dtype"] for e in table}
    if len(codes) > 1 or not codes <= {"f32", "f64"}:
        raise CorruptionError(f"inconsistent tensor dtypes {sorted(codes)}")
    store = ParameterStore(DTYPES[codes.pop()] if codes else None)
    arrays = {}
    for e in table:
        dt = DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(payload):
            raise CorruptionError(f"tensor {e['name']!r}: manifest and payload disagree")
        arrays[e["name"]] = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
    for name in (e["name"] for e in table):
        if name.startswith("adam."):
            continue
        try:
            store.add(name, arrays[name])
            store.m[name] = arrays[f"adam.m/{name}"].copy()
            store.v[name] = arrays[f"adam.v/{name}"].copy()
        except KeyError as exc:
            raise CorruptionError(f"optimizer state for {name!r} missing: {exc}") from None
    store.t = int(manifest["step"])
    return store, manifest["config"], int(manifest["seed"])


def restore_into(target: ParameterStore, source: ParameterStore) -> None:
    """Copy parameters, moments and step counter between stores with identical layouts."""
    if target.names() != source.names():
        missing = sorted(set(target.names()) ^ set(source.names()))
        raise ConfigMismatchError(f"parameter sets differ, e.g. {missing[:3]}")
    for name, p in target.items():
        src = source[name].data
        if src.shape != p.shape:
            raise ConfigMismatchError(f"parameter {name!r}: shape {src.shape} vs {p.shape}")
        p.data = src.astype(target.dtype, copy=True)
        target.m[name] = source.m[name].astype(target.dtype, copy=True)
        target.v[name] = source.v[name].astype(target.dtype, copy=True)
    target.t = source.t
