"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SMOECKPT"
    8       4     format version (uint32, currently 1)
    12      1     failure flag (uint8, 1 when written after a non-finite loss)
    13      8     header length H in bytes (uint64)
    21      H     UTF-8 JSON header
    21+H    ...   float64 little-endian payload

The header holds ``config`` (the run config text), ``step``, ``extra`` (free
JSON, e.g. the batch-stream position) and ``params``: a list of
``{"name", "shape", "value", "m", "v"}`` where the last three are element
offsets into the payload for the weights and the two Adam moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ParameterStore

MAGIC = b"SMOECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIBQ")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    arrays: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]  # name -> (value, m, v)
    failed: bool = False
    extra: dict = field(default_factory=dict)


def save(path: Path, config_text: str, store: ParameterStore, *, failed: bool = False,
         extra: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in store:
        st = store.state[name]
        entry = {"name": name, "shape": list(t.data.shape)}
        for key, arr in (("value", t.data), ("m", st.m), ("v", st.v)):
            entry[key] = offset
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
            offset += arr.size
        entries.append(entry)
    header = json.dumps({"config": config_text, "step": store.step, "extra": extra or {},
                         "params": entries}, sort_keys=True).encode("utf-8")
    payload = np.concatenate(chunks).tobytes() if chunks else b""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, int(failed), len(header)))
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def load(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, failed, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=start)
    arrays = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        got = [data[e[k]:e[k] + n] for k in ("value", "m", "v")]
        if any(g.size != n for g in got):
            raise CheckpointError(f"{path}: payload too short for {e['name']}")
        arrays[e["name"]] = tuple(g.reshape(shape).astype(np.float64) for g in got)
    return Checkpoint(header["config"], int(header["step"]), arrays, bool(failed), header.get("extra", {}))


def restore(store: ParameterStore, ckpt: Checkpoint) -> None:
    """Copy weights and Adam moments into ``store``; names and shapes must match."""
    if set(ckpt.arrays) != set(store.params):
        missing = sorted(set(store.params) - set(ckpt.arrays))
        unexpected = sorted(set(ckpt.arrays) - set(store.params))
        raise CheckpointError(f"parameter mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, (value, m, v) in ckpt.arrays.items():
        t = store.params[name]
        if t.data.shape != value.shape:
            raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {t.data.shape}")
        t.data[...] = value
        store.state[name].m[...] = m
        store.state[name].v[...] = v
    store.step = ckpt.step
