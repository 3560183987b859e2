"""Binary checkpoint files.

Layout::

    b"MOEABSA1"
    uint64 LE   metadata length
    metadata    UTF-8 JSON: format_version, stage, config, provider,
                manifest [{name, shape, dtype}], rng_state, metrics
    payload     little-endian tensors in manifest order
    8 bytes     blake2b-64 digest of the payload
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import ABSAModel, LinearModel, Model, StageConfig
from .text import make_provider

MAGIC = b"MOEABSA1"
FORMAT_VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointFormatError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    provider: dict
    tensors: dict[str, np.ndarray]
    rng_state: dict | None = None
    metrics: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def dumps(ckpt: Checkpoint, dtype: str = "f8") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    manifest, chunks = [], []
    for name, arr in ckpt.tensors.items():
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    meta = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "config": ckpt.config,
        "provider": ckpt.provider,
        "manifest": manifest,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + payload + _digest(payload)


def loads(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    if len(blob) < 16:
        raise CheckpointIntegrityError("truncated header")
    (n_meta,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + n_meta + 8:
        raise CheckpointIntegrityError("truncated metadata")
    try:
        meta = json.loads(blob[16 : 16 + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {meta.get('format_version')!r}")
    payload, digest = blob[16 + n_meta : -8], blob[-8:]
    expected = sum(int(np.prod(m["shape"])) * np.dtype(_DTYPES[m["dtype"]]).itemsize for m in meta["manifest"])
    if len(payload) != expected:
        raise CheckpointIntegrityError(f"payload is {len(payload)} bytes, manifest needs {expected}")
    if _digest(payload) != digest:
        raise CheckpointIntegrityError("payload checksum mismatch")
    tensors, off = {}, 0
    for m in meta["manifest"]:
        dt = np.dtype(_DTYPES[m["dtype"]])
        n = int(np.prod(m["shape"]))
        tensors[m["name"]] = np.frombuffer(payload, dtype=dt, count=n, offset=off).astype(np.float64).reshape(m["shape"])
        off += n * dt.itemsize
    return Checkpoint(meta["stage"], meta["config"], meta["provider"], tensors, meta["rng_state"], meta["metrics"], meta["format_version"])


def save_checkpoint(model: Model, path: str | Path, rng: np.random.Generator | None = None, metrics: dict | None = None, dtype: str = "f8") -> Checkpoint:
    ckpt = Checkpoint(
        model.stage,
        model.config.to_dict(),
        model.provider_info,
        {k: p.values.copy() for k, p in model.parameters().items()},
        rng.bit_generator.state if rng is not None else None,
        metrics or {},
    )
    Path(path).write_bytes(dumps(ckpt, dtype))
    return ckpt


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    if ckpt.rng_state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng


def model_from_checkpoint(ckpt: Checkpoint, expect_stage: str | None = None) -> Model:
    if expect_stage is not None and ckpt.stage != expect_stage:
        raise CheckpointFormatError(f"checkpoint is for stage {ckpt.stage!r}, expected {expect_stage!r}")
    config = StageConfig.from_dict(ckpt.config)
    dim = int(ckpt.provider["dim"])
    rng = np.random.default_rng(0)
    if ckpt.stage == "absa":
        model: Model = ABSAModel(dim, config, rng, ckpt.provider)
    else:
        model = LinearModel(ckpt.stage, dim, config, rng, ckpt.provider)
    params = model.parameters()
    if set(params) != set(ckpt.tensors):
        raise CheckpointFormatError("tensor manifest does not match the model layout")
    for name, p in params.items():
        if p.values.shape != ckpt.tensors[name].shape:
            raise CheckpointFormatError(f"{name}: shape {ckpt.tensors[name].shape} vs model {p.values.shape}")
        p.values[...] = ckpt.tensors[name]
    return model


def provider_from_checkpoint(ckpt: Checkpoint):
    info = ckpt.provider
    return make_provider(info["kind"], int(info["dim"]), int(info.get("seed", 42)), info.get("path"))
