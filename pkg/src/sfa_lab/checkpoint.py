"""SFAC binary checkpoints.

Layout (all integers little-endian)::

    "SFAC"                      4 bytes
    format_version              u32
    layer_count                 u32   number of entries in layer_sizes
    layer_sizes                 u32 * layer_count
    activation tag              u8    0 = relu, 1 = tanh
    provenance length           u32
    provenance                  UTF-8 JSON
    parameters                  f32 * num_params, flat order
    digest                      u64   FNV-1a over every preceding byte

A Fisher diagonal may follow as a second block of the same style::

    "SFAF" | format_version u32 | count u32 | f32 * count | u64 FNV-1a of the block
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nnet import ACTIVATIONS, MlpSpec, ModelParams

MAGIC = b"SFAC"
FISHER_MAGIC = b"SFAF"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


@dataclass(frozen=True)
class Provenance:
    strategy: str = ""
    tasks: tuple[str, ...] = ()
    seed: int = 0
    parents: tuple[str, ...] = ()     # hex digests of parent checkpoints

    def to_json(self) -> str:
        return json.dumps({"strategy": self.strategy, "tasks": list(self.tasks), "seed": self.seed,
                           "parents": list(self.parents)}, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Provenance":
        d = json.loads(text)
        return cls(d.get("strategy", ""), tuple(d.get("tasks", ())), int(d.get("seed", 0)),
                   tuple(d.get("parents", ())))


@dataclass(frozen=True)
class Checkpoint:
    spec: MlpSpec
    flat: np.ndarray
    provenance: Provenance = field(default_factory=Provenance)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        # validates the parameter count against the spec
        object.__setattr__(self, "flat", ModelParams(self.spec, self.flat).flat)

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.spec, self.flat)

    def to_bytes(self) -> bytes:
        sizes = self.spec.layer_sizes
        prov = self.provenance.to_json().encode("utf-8")
        body = b"".join([
            MAGIC,
            struct.pack("<I", self.format_version),
            struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes),
            struct.pack("<B", ACTIVATIONS.index(self.spec.activation)),
            struct.pack("<I", len(prov)), prov,
            self.flat.astype("<f4").tobytes(),
        ])
        return body + struct.pack("<Q", fnv1a64(body))

    @property
    def digest(self) -> str:
        return f"{fnv1a64(self.to_bytes()[:-8]):016x}"


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _check_digest(r: _Reader, start: int) -> None:
    at = r.pos
    (stored,) = struct.unpack("<Q", r.take(8, "digest"))
    actual = fnv1a64(r.buf[start:at])
    if stored != actual:
        raise FormatError(f"digest mismatch: stored {stored:016x}, computed {actual:016x}", at)


def checkpoint_from_bytes(buf: bytes) -> tuple[Checkpoint, int]:
    """Parse one SFAC block; returns the checkpoint and the offset just past it."""
    r = _Reader(buf)
    if len(buf) == 0:
        raise FormatError("empty checkpoint", 0)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    count = r.u32("layer count")
    if count < 2 or count > 1024:
        raise FormatError(f"implausible layer count {count}", r.pos - 4)
    sizes = struct.unpack(f"<{count}I", r.take(4 * count, "layer sizes"))
    tag_at = r.pos
    (tag,) = r.take(1, "activation tag")
    if tag >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation tag {tag}", tag_at)
    plen = r.u32("provenance length")
    prov_at = r.pos
    try:
        prov = Provenance.from_json(r.take(plen, "provenance").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"unreadable provenance: {e}", prov_at) from None
    spec = MlpSpec(tuple(sizes), ACTIVATIONS[tag])
    payload = r.take(4 * spec.num_params, "parameter payload")
    _check_digest(r, 0)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Checkpoint(spec, flat, prov, version), r.pos


def fisher_block(fisher: np.ndarray) -> bytes:
    fisher = np.asarray(fisher, dtype=np.float64)
    body = FISHER_MAGIC + struct.pack("<II", FORMAT_VERSION, len(fisher)) + fisher.astype("<f4").tobytes()
    return body + struct.pack("<Q", fnv1a64(body))


def _fisher_from(buf: bytes, start: int, expected: int) -> np.ndarray:
    r = _Reader(buf, start)
    magic = r.take(4, "Fisher magic")
    if magic != FISHER_MAGIC:
        raise FormatError(f"unexpected trailing data {magic!r}", start)
    version = r.u32("Fisher format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported Fisher block version {version}", start + 4)
    count = r.u32("Fisher count")
    if count != expected:
        raise FormatError(f"Fisher block has {count} entries, checkpoint has {expected}", start + 8)
    payload = r.take(4 * count, "Fisher payload")
    _check_digest(r, start)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after Fisher block", r.pos)
    return np.frombuffer(payload, dtype="<f4").astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path, fisher: np.ndarray | None = None) -> Path:
    path = Path(path)
    data = ckpt.to_bytes()
    if fisher is not None:
        data += fisher_block(fisher)
    path.write_bytes(data)
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    ckpt, end = checkpoint_from_bytes(buf)
    if end != len(buf):
        _fisher_from(buf, end, len(ckpt.flat))
    return ckpt


def load_fisher(path) -> np.ndarray | None:
    """The Fisher diagonal appended to a checkpoint file, or None."""
    buf = Path(path).read_bytes()
    ckpt, end = checkpoint_from_bytes(buf)
    if end == len(buf):
        return None
    return _fisher_from(buf, end, len(ckpt.flat))


def append_fisher(path, fisher: np.ndarray) -> None:
    """Attach (or replace) the Fisher block of an existing checkpoint file."""
    ckpt = load_checkpoint(path)
    if len(fisher) != len(ckpt.flat):
        raise FormatError(f"Fisher has {len(fisher)} entries, checkpoint has {len(ckpt.flat)}", 0)
    save_checkpoint(ckpt, path, fisher)
