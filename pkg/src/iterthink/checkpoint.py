"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"ITHKCKPT"
    version u32
    count   u32      number of sections
    section*:
        name_len u32, name utf-8
        kind     u8   0 = JSON text, 1 = float64 array
        size     u64  payload bytes
        payload       JSON: utf-8 text
                      array: ndim u32, dims u64 * ndim, data <f8 row-major

Arrays are stored as float64 whatever the model precision; float32 values
widen exactly, so a round trip is lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import Model
from .training import AdamState

__all__ = ["Checkpoint", "CheckpointError", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint",
           "encode", "decode", "checkpoint_from_model", "model_from_checkpoint"]

MAGIC = b"ITHKCKPT"
FORMAT_VERSION = 1
_JSON, _ARRAY = 0, 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    topology: dict
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _array_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    sections: list[tuple[str, int, bytes]] = [
        ("config", _JSON, _json_bytes(ckpt.config)),
        ("topology", _JSON, _json_bytes(ckpt.topology)),
        ("meta", _JSON, _json_bytes(ckpt.meta)),
    ]
    for name in sorted(ckpt.arrays):
        sections.append((name, _ARRAY, _array_bytes(ckpt.arrays[name])))
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(sections))]
    for name, kind, payload in sections:
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<BQ", kind, len(payload)) + payload)
    return b"".join(out)


def decode(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        pos = 16
        json_parts: dict[str, dict] = {}
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode()
            pos += n
            kind, size = struct.unpack_from("<BQ", buf, pos)
            pos += 9
            payload = buf[pos:pos + size]
            if len(payload) != size:
                raise CheckpointError(f"section {name!r} truncated")
            pos += size
            if kind == _JSON:
                json_parts[name] = json.loads(payload.decode())
            elif kind == _ARRAY:
                (ndim,) = struct.unpack_from("<I", payload, 0)
                shape = struct.unpack_from(f"<{ndim}Q", payload, 4)
                data = np.frombuffer(payload, dtype="<f8", offset=4 + 8 * ndim)
                arrays[name] = data.reshape(shape).astype(np.float64)
            else:
                raise CheckpointError(f"section {name!r} has unknown kind {kind}")
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    missing = {"config", "topology", "meta"} - set(json_parts)
    if missing:
        raise CheckpointError(f"checkpoint lacks section(s) {sorted(missing)}")
    return Checkpoint(json_parts["config"], json_parts["topology"], json_parts["meta"], arrays)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode(p.read_bytes())


def checkpoint_from_model(model: Model, config: RunConfig, optimizer: AdamState | None = None,
                          best_epoch: int = -1, **meta) -> Checkpoint:
    arrays = dict(model.state_arrays())
    opt = optimizer or AdamState()
    for name, a in opt.m.items():
        arrays[f"opt/m/{name}"] = a
    for name, a in opt.v.items():
        arrays[f"opt/v/{name}"] = a
    info = {
        "format_version": FORMAT_VERSION,
        "best_epoch": best_epoch,
        "optimizer_step": opt.step,
        "parameter_versions": {c.name: c.version for c in model.conv_layers()},
        "model_seed": model.seed,
    }
    info.update(meta)
    return Checkpoint(config.to_dict(), model.topology(), info, arrays)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, AdamState, RunConfig]:
    cfg = RunConfig.from_dict(ckpt.config)
    model = Model(cfg.model_spec(), ckpt.meta.get("model_seed", cfg.seed))
    if model.topology() != ckpt.topology:
        raise CheckpointError("checkpoint topology does not match this build of the model")
    dt = model.spec.dtype
    state = {k: v.astype(dt) if k.startswith("param/") else v for k, v in ckpt.arrays.items()
             if k.startswith(("param/", "buffer/"))}
    model.load_state_arrays(state)
    for c in model.conv_layers():
        c.version = ckpt.meta["parameter_versions"][c.name]
    opt = AdamState(step=ckpt.meta.get("optimizer_step", 0))
    for k, v in ckpt.arrays.items():
        if k.startswith("opt/m/"):
            opt.m[k[6:]] = v.astype(dt)
        elif k.startswith("opt/v/"):
            opt.v[k[6:]] = v.astype(dt)
    model.eval()
    return model, opt, cfg
