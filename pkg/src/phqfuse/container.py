"""Named-tensor container file format.

Layout, little-endian throughout:

    magic "PHQF" | version u32 | tensor_count u32 | config_len u32 |
    config JSON (UTF-8) | tensor*

    tensor := name_len u32 | name UTF-8 | dtype u8 (1 = float32) |
              rank u32 | dims u32*rank | payload (row-major float32)

Tensors are written in sorted-name order and the config JSON uses sorted
keys, so equal state always produces identical bytes. Parse errors name
the byte offset at which the file stopped making sense.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"PHQF"
VERSION = 1
_DTYPE_F32 = 1


def save_tensors(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    names = sorted(tensors)
    if len(names) != len(set(names)):
        raise FormatError("duplicate tensor names")
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, len(names), len(blob)), blob]
    for name in names:
        # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.path}: truncated reading {what} at byte offset {self.pos} "
                f"(needed {n} bytes, file has {len(self.raw)})"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    count = r.u32("tensor count")
    config_len = r.u32("config length")
    try:
        config = json.loads(r.take(config_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unparseable config blob at byte offset 16: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = r.pos
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r} at byte offset {name_at}")
        dtype = r.take(1, "dtype tag")[0]
        if dtype != _DTYPE_F32:
            raise FormatError(
                f"{path}: unsupported dtype tag {dtype} for {name!r} at byte offset {r.pos - 1}"
            )
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = r.take(4 * n_elem, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if r.pos != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - r.pos} trailing bytes at byte offset {r.pos} "
            f"after the {count} tensors declared in the header"
        )
    return tensors, config
