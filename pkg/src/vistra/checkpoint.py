"""Versioned little-endian checkpoint files.

Layout::

    b"VISTRACK"                      8-byte magic
    u32 version
    u64 n, n bytes                   UTF-8 JSON metadata (sorted keys, compact)
    u32 array count
    per array, sorted by name:
        u16 n, n bytes               UTF-8 name
        u8 ndim, ndim x u32 dims
        prod(dims) x f32             row-major data

Array names carry a slot prefix: ``param:``, ``buffer:``, ``adam_m:``,
``adam_v:``. Nothing in the file depends on wall-clock time, so saving the
same checkpoint twice gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import GeneratorConfig, ModelGraph, RecognitionConfig, build_encoder, build_generator, build_recognition_net
from .nets.graph import config_digest
from .tensor import AdamState

MAGIC = b"VISTRACK"
VERSION = 1
_SLOTS = ("param", "buffer", "adam_m", "adam_v")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    iteration: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: AdamState | None = None
    rng_state: dict | None = None

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    @classmethod
    def from_model(cls, model: ModelGraph, iteration: int, optimizer: AdamState | None = None, rng_state=None) -> "Checkpoint":
        opt = None
        if optimizer is not None:
            opt = AdamState(
                optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.step,
                {k: v.copy() for k, v in optimizer.m.items()},
                {k: v.copy() for k, v in optimizer.v.items()},
            )
        return cls(
            model.kind,
            json.loads(json.dumps(model.config)),
            int(iteration),
            {k: v.copy() for k, v in model.params.items()},
            {k: v.copy() for k, v in model.buffers.items()},
            opt,
            rng_state,
        )

    def model(self) -> ModelGraph:
        """Rebuild the graph described by ``config`` and load the weights."""
        if self.kind == "recognition":
            graph = build_recognition_net(RecognitionConfig.from_dict(self.config))
        elif self.kind == "generator":
            graph = build_generator(GeneratorConfig.from_dict(self.config))
        elif self.kind == "encoder":
            cfg = {k: v for k, v in self.config.items() if k != "role"}
            graph = build_encoder(GeneratorConfig.from_dict(cfg))
        else:
            raise CheckpointError(f"unknown model kind {self.kind!r}")
        if graph.digest != self.digest:
            raise CheckpointDigestError(f"rebuilt {self.kind} digest {graph.digest[:12]} != checkpoint {self.digest[:12]}")
        _load_into(graph.params, self.params, "parameter")
        _load_into(graph.buffers, self.buffers, "buffer")
        return graph


def _load_into(dest: dict, src: dict, what: str) -> None:
    if set(dest) != set(src):
        missing, extra = sorted(set(dest) - set(src)), sorted(set(src) - set(dest))
        raise CheckpointDigestError(f"{what} names differ from the architecture: missing {missing}, unexpected {extra}")
    for k, v in src.items():
        if dest[k].shape != v.shape:
            raise CheckpointDigestError(f"{what} {k!r} has shape {v.shape}, architecture expects {dest[k].shape}")
        dest[k] = v.astype(np.float32, copy=True)


# ---------------------------------------------------------------- encoding

def _arrays(ck: Checkpoint) -> dict[str, np.ndarray]:
    out = {f"param:{k}": v for k, v in ck.params.items()}
    out.update({f"buffer:{k}": v for k, v in ck.buffers.items()})
    if ck.optimizer is not None:
        out.update({f"adam_m:{k}": v for k, v in ck.optimizer.m.items()})
        out.update({f"adam_v:{k}": v for k, v in ck.optimizer.v.items()})
    return out


def encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = {
        "kind": ck.kind,
        "config": ck.config,
        "digest": ck.digest,
        "iteration": ck.iteration,
        "rng_state": ck.rng_state,
        "optimizer": None
        if ck.optimizer is None
        else {k: getattr(ck.optimizer, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    arrays = _arrays(ck)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, expected_digest: str | None = None) -> Checkpoint:
    r = _Reader(data)
    if len(data) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(f"checkpoint truncated: only {len(data)} bytes")
    magic = r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if magic != MAGIC or version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint header (magic {magic!r}, version {version}); expected version {VERSION}")
    (n,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(n))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointVersionError(f"unreadable checkpoint metadata: {e}") from None
    if config_digest(meta["config"]) != meta["digest"]:
        raise CheckpointDigestError("checkpoint metadata digest does not match its config")
    if expected_digest is not None and meta["digest"] != expected_digest:
        raise CheckpointDigestError(
            f"checkpoint digest {meta['digest'][:12]} does not match model digest {expected_digest[:12]}"
        )
    (count,) = r.unpack("<I")
    slots: dict[str, dict[str, np.ndarray]] = {s: {} for s in _SLOTS}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        slot, _, key = name.partition(":")
        if slot not in slots:
            raise CheckpointVersionError(f"unknown array slot in {name!r}")
        slots[slot][key] = arr
    if r.pos != len(data):
        raise CheckpointVersionError(f"{len(data) - r.pos} unexpected trailing bytes")
    opt = None
    if meta["optimizer"] is not None:
        opt = AdamState(**meta["optimizer"], m=slots["adam_m"], v=slots["adam_v"])
    return Checkpoint(meta["kind"], meta["config"], meta["iteration"], slots["param"], slots["buffer"], opt, meta["rng_state"])


def save_checkpoint(ck: Checkpoint, path) -> Path:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_digest)
