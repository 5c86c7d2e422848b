"""Checkpoint directories.

Layout::

    <dir>/config.json      network + training config snapshot
    <dir>/manifest.json    ordered parameter names with dtype, shape and sha256
    <dir>/arrays/<i>.arr   one array per name, in manifest order

Array file format (all little-endian)::

    8 bytes   magic b"DMARR\\x00\\x01\\x00"
    1 byte    dtype code (see DTYPES)
    1 byte    ndim
    8*ndim    dims, uint64
    ...       raw element data, C order
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IntegrityError
from .nets import Decomposer, Merger, NetworkConfig

MAGIC = b"DMARR\x00\x01\x00"
DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "|u1"}
CODES = {np.dtype(v): k for k, v in DTYPES.items()}
FORMAT_VERSION = 1


def write_array(path, array):
    arr = np.asarray(array)
    arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
    code = CODES.get(arr.dtype)
    if code is None:
        raise ConfigError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return hashlib.sha256(header + payload).hexdigest()


def read_array(path):
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: bad array header")
    code, ndim = struct.unpack_from("<BB", raw, 8)
    if code not in DTYPES:
        raise IntegrityError(f"{path}: unknown dtype code {code}")
    offset = 10 + 8 * ndim
    if len(raw) < offset:
        raise IntegrityError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 10)
    dtype = np.dtype(DTYPES[code])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise IntegrityError(
            f"{path}: expected {expected} data bytes, found {len(raw) - offset}")
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()
    return arr, hashlib.sha256(raw).hexdigest()


def _state_arrays(dec, mer, extra=None):
    named = {}
    for prefix, module in (("decomposer", dec), ("merger", mer)):
        for name, tensor in module.state_dict().items():
            named[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    for name, arr in (extra or {}).items():
        named[name] = np.asarray(arr)
    return named


def save_checkpoint(path, dec, mer, config=None, extra=None):
    """Write a checkpoint directory.  ``extra`` holds additional named arrays."""
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    arrays = _state_arrays(dec, mer, extra)
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        fname = f"arrays/{i:05d}.arr"
        digest = write_array(path / fname, arr)
        entries.append({"name": name, "file": fname, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "sha256": digest})
    snapshot = {"format_version": FORMAT_VERSION, "network": dec.config.to_dict()}
    if config is not None:
        snapshot["train"] = config
    _write_json(path / "config.json", snapshot)
    _write_json(path / "manifest.json", {"arrays": entries})
    return path


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise IntegrityError(f"missing {path.name} in checkpoint {path.parent}") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt {path}: {exc}") from exc


def load_checkpoint(path, expect=None):
    """Load ``(decomposer, merger, snapshot, extra_arrays)`` from a checkpoint.

    Every array is read and verified before any module is touched, so a
    failure never leaves a partially loaded network.  ``expect`` optionally
    constrains network fields, e.g. ``{"heads": 2}``.
    """
    path = Path(path)
    snapshot = _read_json(path / "config.json")
    manifest = _read_json(path / "manifest.json")
    try:
        net_cfg = NetworkConfig.from_dict(snapshot["network"])
    except (KeyError, TypeError) as exc:
        raise IntegrityError(f"config snapshot lacks a valid network section: {exc}") from exc
    for key, value in (expect or {}).items():
        if getattr(net_cfg, key) != value:
            raise ConfigError(
                f"checkpoint has {key}={getattr(net_cfg, key)}, expected {value}")

    arrays, missing, corrupt = {}, [], []
    for entry in manifest.get("arrays", []):
        file = path / entry["file"]
        if not file.exists():
            missing.append(entry["name"])
            continue
        try:
            arr, digest = read_array(file)
        except IntegrityError:
            corrupt.append(entry["name"])
            continue
        if digest != entry["sha256"] or list(arr.shape) != entry["shape"]:
            corrupt.append(entry["name"])
            continue
        arrays[entry["name"]] = arr
    if missing or corrupt:
        raise IntegrityError(
            f"checkpoint {path}: missing arrays {missing}, corrupt arrays {corrupt}")

    dec, mer = Decomposer(net_cfg), Merger(net_cfg)
    states = {}
    for prefix, module in (("decomposer", dec), ("merger", mer)):
        expected = module.state_dict()
        state = {}
        absent = []
        for name, ref in expected.items():
            key = f"{prefix}.{name}"
            if key not in arrays:
                absent.append(key)
                continue
            arr = arrays[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ConfigError(
                    f"{key}: shape {arr.shape} does not fit network {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr)
        if absent:
            raise IntegrityError(f"checkpoint {path}: missing arrays {absent}")
        states[prefix] = state
    dec.load_state_dict(states["decomposer"])
    mer.load_state_dict(states["merger"])
    extra = {k: v for k, v in arrays.items() if not k.startswith(("decomposer.", "merger."))}
    return dec, mer, snapshot, extra
