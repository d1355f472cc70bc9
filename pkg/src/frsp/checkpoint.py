"""Versioned binary checkpoints.

Layout::

    b"FRSP" | u32 version | u32 header length | JSON header | f64 blocks

All integers and floats are little-endian.  The header lists every block
(name and shape) in file order and carries a SHA-256 of the block payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ModelState, NetworkConfig
from .optim import AdamState
from .tensor import parameter

MAGIC = b"FRSP"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    state: ModelState
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _blocks(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v.data) for k, v in ckpt.state.params.items()]
    for group, opt in ckpt.optimizers.items():
        for k in opt.m:
            out.append((f"adam/{group}/m/{k}", opt.m[k]))
            out.append((f"adam/{group}/v/{k}", opt.v[k]))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    blocks = _blocks(ckpt)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks)
    header = {
        "format_version": VERSION,
        "config": ckpt.state.config.to_dict(),
        "step": ckpt.state.step,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "adam_t": {g: o.t for g, o in ckpt.optimizers.items()},
        "rng": ckpt.rng_state,
        "meta": ckpt.meta,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not an FRSP checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable header ({e})") from e
    payload = raw[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified)")

    arrays: dict[str, np.ndarray] = {}
    off = 0
    for b in header["blocks"]:
        n = int(np.prod(b["shape"], dtype=np.int64))
        arrays[b["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(b["shape"]).astype(np.float64)
        off += 8 * n

    config = NetworkConfig.from_dict(header["config"])
    params = {k[len("param/"):]: parameter(v) for k, v in arrays.items() if k.startswith("param/")}
    state = ModelState(config, params, int(header["step"]))
    optimizers: dict[str, AdamState] = {}
    for group, t in header.get("adam_t", {}).items():
        pre = f"adam/{group}/"
        m = {k[len(pre) + 2:]: v for k, v in arrays.items() if k.startswith(pre + "m/")}
        v = {k[len(pre) + 2:]: a for k, a in arrays.items() if k.startswith(pre + "v/")}
        optimizers[group] = AdamState(m, v, int(t))
    return Checkpoint(state, optimizers, header.get("rng"), header.get("meta", {}))
