"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PPTv1" | u32 format version | u64 header length | header JSON | tensor blob | sha256(previous bytes)

The header carries the config digest, step, rng state, free-form metadata and
a table of tensors (name, dtype, shape, offset, nbytes) into the blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PPTv1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config_digest: str
    tensors: dict
    step: int = 0
    opt_state: dict = field(default_factory=dict)
    opt_t: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _table(arrays: dict, section: str, entries: list, chunks: list, offset: int) -> int:
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"section": section, "name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return offset


def dumps(ckpt: Checkpoint) -> bytes:
    entries, chunks = [], []
    offset = _table(ckpt.tensors, "model", entries, chunks, 0)
    _table(ckpt.opt_state, "opt", entries, chunks, offset)
    header = {
        "kind": ckpt.kind, "config_digest": ckpt.config_digest, "step": ckpt.step,
        "opt_t": ckpt.opt_t, "rng_state": ckpt.rng_state, "meta": ckpt.meta, "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes, expected_digest: str | None = None) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic or truncated header")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupt checkpoint: checksum mismatch (truncated or modified)")
    version, hlen = struct.unpack("<IQ", body[len(MAGIC):len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    blob_start = start + hlen
    model, opt = {}, {}
    for e in header["tensors"]:
        raw = body[blob_start + e["offset"]: blob_start + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        arr = arr.astype(np.dtype(e["dtype"]), copy=True)
        (model if e["section"] == "model" else opt)[e["name"]] = arr
    ckpt = Checkpoint(header["kind"], header["config_digest"], model, header["step"], opt,
                      header["opt_t"], header["rng_state"], header["meta"])
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {ckpt.config_digest}, expected {expected_digest}")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint {path}")
    with open(path, "rb") as f:
        return loads(f.read(), expected_digest)
