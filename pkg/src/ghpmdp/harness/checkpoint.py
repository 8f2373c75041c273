"""Single-file, versioned checkpoints.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header
    | raw little-endian float64 payload | sha256 of everything before it

The header carries the config text and its hash, store step counters and an
index of every array. Output depends only on the saved state, so saving the
same state twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gradcore import ParamStore
from .builders import build_models, build_posteriors
from .config import ExperimentConfig, parse_config_text

MAGIC = b"GHPMDPCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(RuntimeError):
    """Unreadable, truncated or corrupted checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class CheckpointState:
    config: ExperimentConfig
    models: dict
    posteriors: dict
    meta: dict = field(default_factory=dict)


def _store_arrays(prefix: str, store: ParamStore, arrays: dict, stores: dict) -> None:
    for key in store:
        arrays[f"{prefix}/values/{key}"] = store.values[key]
        arrays[f"{prefix}/m/{key}"] = store.m[key]
        arrays[f"{prefix}/v/{key}"] = store.v[key]
    stores[prefix] = {"step": store.step, "t": {k: int(store.t[k]) for k in store}}


def _collect(models: dict, posteriors: dict) -> tuple[dict, dict]:
    arrays, stores = {}, {}
    for key, model in models.items():
        for role, ens in (("dynamics", model.dynamics), ("reward", model.reward)):
            prefix = f"model/{key}/{role}"
            _store_arrays(prefix, ens.params, arrays, stores)
            for name, val in ens.normalizer.state().items():
                arrays[f"{prefix}/norm/{name}"] = val
    for task, post in posteriors.items():
        _store_arrays(f"posterior/{task}", post.params, arrays, stores)
    return arrays, stores


def save_checkpoint(path, config: ExperimentConfig, models: dict, posteriors: dict, meta: dict | None = None) -> None:
    """Write atomically (temp file then rename)."""
    arrays, stores = _collect(models, posteriors)
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": config.to_text(),
        "config_hash": config.hash(),
        "models": list(models),
        "posteriors": list(posteriors),
        "stores": stores,
        "arrays": index,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _read_header(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes); file is truncated")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a ghpmdp checkpoint (bad magic bytes)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch; file is truncated or corrupted")
    start = _PREFIX.size
    header = json.loads(body[start : start + head_len].decode())
    return header, body[start + head_len :]


def _load_store(prefix: str, store: ParamStore, arrays: dict, stores: dict) -> None:
    for key in store:
        store.set(key, arrays[f"{prefix}/values/{key}"])
        store.m[key][...] = arrays[f"{prefix}/m/{key}"]
        store.v[key][...] = arrays[f"{prefix}/v/{key}"]
        store.t[key] = int(stores[prefix]["t"][key])
    store.step = int(stores[prefix]["step"])


def load_checkpoint(path) -> CheckpointState:
    """Rebuild models and posteriors; raises :class:`CheckpointError` on any defect."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    header, payload = _read_header(path.read_bytes())
    try:
        config = parse_config_text(header["config"])
        if config.hash() != header["config_hash"]:
            raise CheckpointError("embedded config does not match its hash")
        arrays = {}
        for name, shape, offset in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        tasks = [k for k in header["models"]] if config.mode == "specialist" else []
        models = build_models(config, tasks, np.random.default_rng(0))
        if list(models) != header["models"]:
            raise CheckpointError(f"model keys {header['models']} do not match config mode {config.mode}")
        stores = header["stores"]
        for key, model in models.items():
            for role, ens in (("dynamics", model.dynamics), ("reward", model.reward)):
                prefix = f"model/{key}/{role}"
                _load_store(prefix, ens.params, arrays, stores)
                ens.normalizer.load_state({n: arrays[f"{prefix}/norm/{n}"] for n in ("mean", "std", "m2", "count")})
        posteriors = build_posteriors(config, header["posteriors"])
        for task, post in posteriors.items():
            _load_store(f"posterior/{task}", post.params, arrays, stores)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return CheckpointState(config, models, posteriors, header["meta"])
