"""Binary tensor container shared by checkpoints (.xsfc) and tensor files (.xst).

Layout, all integers little-endian::

    b"XSFC" | version u32 | header length u32 | header UTF-8 (key=value lines)
    | record count u32 | per record:
        name length u32 | name UTF-8 | tag u8 | ndim u32 | dims u64 * ndim | f32 data
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"XSFC"
VERSION = 1
TAG_FROZEN = 2


@dataclass
class Record:
    name: str
    tag: int
    array: np.ndarray


def encode(header: str, records: list[Record]) -> bytes:
    head = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(records))]
    for rec in records:
        name = rec.name.encode("utf-8")
        arr = np.ascontiguousarray(rec.array, dtype="<f4")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BI", rec.tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[str, list[Record]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported format version {version}", 4)
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = r.take(hlen, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError("header is not valid UTF-8", at) from exc
    (count,) = r.unpack("<I", "record count")
    records = []
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        at = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("record name is not valid UTF-8", at) from exc
        at = r.pos
        tag, ndim = r.unpack("<BI", "tag/ndim")
        if tag > 2:
            raise CorruptCheckpointError(f"invalid partition tag {tag} for '{name}'", at)
        dims = r.unpack(f"<{ndim}Q", "dims") if ndim else ()
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = r.take(4 * size, f"data of '{name}'")
        arr = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
        records.append(Record(name, tag, arr))
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return header, records


def write(path, header: str, records: list[Record]) -> None:
    path = Path(path)
    blob = encode(header, records)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read(path) -> tuple[str, list[Record]]:
    return decode(Path(path).read_bytes())


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def format_header(items: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def save_tensor(path, array: np.ndarray, name: str = "tensor") -> None:
    """Write a single-tensor .xst file."""
    write(path, "kind=tensor\n", [Record(name, TAG_FROZEN, np.asarray(array, dtype=np.float32))])


def load_tensor(path) -> np.ndarray:
    _, records = read(path)
    if len(records) != 1:
        raise CorruptCheckpointError(f"expected exactly one tensor, found {len(records)}", 0)
    return records[0].array
