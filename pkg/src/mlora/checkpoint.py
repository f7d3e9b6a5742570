"""Binary checkpoints of named float64 tensors.

Layout (all integers little-endian)::

    b"MLRA" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float64 data
    checksum u64 = sum of all preceding bytes mod 2**64

Model structure, phase tag, freeze flags and the training-config echo travel
in a rank-1 tensor named ``__meta__`` whose entries are the bytes of a
canonical JSON document.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .fileio import atomic_write_bytes
from .layers import LoRAPair
from .model import CTRModel, FeatureSchema

MAGIC = b"MLRA"
VERSION = 1
META = "__meta__"
PHASES = ("pretrained", "finetuned")
MAX_RANK = 8


def _checksum(buf: bytes) -> int:
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64))


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


class _Reader:
    def __init__(self, buf, end):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n, what):
        if self.pos + n > self.end:
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not an MLRA checkpoint", 0)
    if len(buf) < 12 + 8:
        raise FormatError("truncated header", len(buf))
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    end = len(buf) - 8
    (stored,) = struct.unpack("<Q", buf[end:])
    if stored != _checksum(buf[:end]):
        raise FormatError("checksum mismatch (file corrupt or truncated)", end)
    r = _Reader(buf, end)
    r.pos = 8
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", at + 2) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", at)
        (rank,) = r.unpack("<B", "rank")
        if rank > MAX_RANK:
            raise FormatError(f"tensor {name!r} has rank {rank} > {MAX_RANK}", r.pos - 1)
        dims = r.unpack(f"<{rank}I", "dims")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(8 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != end:
        raise FormatError("trailing bytes after last tensor", r.pos)
    return tensors


@dataclass
class Checkpoint:
    phase: str
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def config(self):
        return self.meta.get("config", {})

    def model(self) -> CTRModel:
        try:
            return self._build()
        except FormatError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError, IndexError, OverflowError) as exc:
            raise FormatError(f"metadata does not describe a model: {exc!r}", 0) from None

    def _build(self) -> CTRModel:
        m = self.meta
        schema = FeatureSchema.from_dict(m["schema"])
        model = CTRModel(schema, m["hidden"], m["embed_dim"], m["backbone"], m["alpha"],
                         m["rank_cap"]).allocate()
        for t in m["domains"]:
            for layer in model.layers:
                a, b = layer.adaptor_names(t)
                if a not in self.tensors or b not in self.tensors:
                    raise FormatError(f"missing adaptor tensors for domain {t}", 0)
                layer.adaptors[int(t)] = LoRAPair(np.zeros_like(self.tensors[a]),
                                                  np.zeros_like(self.tensors[b]))
        frozen = set(m["frozen"])
        for part in model.backbone_parts():
            part.frozen = any(n in frozen for n in part.tensors())
        registry = model.registry()
        names = set(self.tensors) - {META}
        if names != set(registry):
            raise FormatError(f"tensor set mismatch: {sorted(names ^ set(registry))[:5]}", 0)
        for name, entry in registry.items():
            src = self.tensors[name]
            if src.shape != entry.tensor.shape:
                raise FormatError(f"{name}: shape {src.shape} != expected {entry.tensor.shape}", 0)
            entry.tensor[...] = src
        return model


def model_meta(model: CTRModel, phase: str, config=None) -> dict:
    return {
        "phase": phase,
        "schema": model.schema.to_dict(),
        "hidden": model.hidden,
        "embed_dim": model.embed_dim,
        "backbone": model.backbone_kind,
        "alpha": model.alpha,
        "rank_cap": model.rank_cap,
        "domains": model.domains,
        "frozen": [n for n, e in model.registry().items() if e.frozen],
        "config": config or {},
    }


def checkpoint_bytes(model: CTRModel, phase: str, config=None) -> bytes:
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    meta = json.dumps(model_meta(model, phase, config), sort_keys=True, separators=(",", ":"))
    tensors = {META: np.frombuffer(meta.encode("utf-8"), dtype=np.uint8).astype(np.float64)}
    tensors.update({n: e.tensor for n, e in model.registry().items()})
    return encode(tensors)


def save_checkpoint(model: CTRModel, phase: str, path, config=None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model, phase, config))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    tensors = decode(buf)
    if META not in tensors:
        raise FormatError("checkpoint has no metadata tensor", 12)
    raw = tensors[META]
    if raw.ndim != 1 or np.any((raw < 0) | (raw > 255) | (raw != np.round(raw))):
        raise FormatError("metadata tensor is not a byte string", 12)
    try:
        meta = json.loads(raw.astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", 12) from None
    phase = meta.get("phase")
    if phase not in PHASES:
        raise FormatError(f"unknown phase tag {phase!r}", 12)
    return Checkpoint(phase, meta, tensors)


def load_checkpoint(path) -> CTRModel:
    return read_checkpoint(path).model()


def tensor_digest(model: CTRModel, names=None) -> str:
    """SHA-256 over the named tensors' raw bytes (all registry tensors by default)."""
    h = hashlib.sha256()
    reg = model.registry()
    for n in (sorted(reg) if names is None else names):
        h.update(n.encode("utf-8"))
        h.update(np.ascontiguousarray(reg[n].tensor).tobytes())
    return h.hexdigest()
