"""Binary checkpoint format.

Layout (little endian)::

    b"SURTCKPT"  u32 version
    u32 config_len, config text (UTF-8)
    three sections (params, optimizer, counters), each:
        u32 n_records
        per record: u32 name_len, name (UTF-8), u32 rank, u64 extents[rank],
                    f64 payload (C order)

Writes go to a temporary file in the target directory followed by an atomic
rename, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SURTCKPT"
VERSION = 1
SECTIONS = ("params", "optimizer", "counters")
_MAX_RANK = 8


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    counters: dict[str, float] = field(default_factory=dict)
    config_text: str = ""


def _pack_section(records: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    counters = {k: np.asarray(float(v)) for k, v in ckpt.counters.items()}
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", VERSION),
            struct.pack("<I", len(cfg)),
            cfg,
            _pack_section(ckpt.params),
            _pack_section(ckpt.optimizer),
            _pack_section(counters),
        ]
    )


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _read_section(r: _Reader, section: str) -> dict[str, np.ndarray]:
    n = r.u32(f"{section} record count")
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        name_len = r.u32(f"{section} name length")
        try:
            name = r.take(name_len, f"{section} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{section}: record name is not UTF-8") from exc
        rank = r.u32(f"{name} rank")
        if rank > _MAX_RANK:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} extents"))
        count = int(np.prod(shape, dtype=np.uint64)) if rank else 1
        payload = r.take(8 * count, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a SURT checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg_len = r.u32("config length")
    try:
        cfg = r.take(cfg_len, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("config text is not UTF-8") from exc
    params = _read_section(r, "params")
    optimizer = _read_section(r, "optimizer")
    counters = {k: float(v) for k, v in _read_section(r, "counters").items()}
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(params, optimizer, counters, cfg)


def atomic_write(path: Path | str, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: Path | str, ckpt: Checkpoint) -> None:
    atomic_write(path, to_bytes(ckpt))


def load(path: Path | str) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return from_bytes(buf)
