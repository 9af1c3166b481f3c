"""Binary model checkpoints.

Layout, all integers unsigned 32-bit little-endian::

    b"AGRP"  version  tensor_count
    tensor_count x (name_len, name utf-8, rank, dims..., float64 LE values)
    json_len  json utf-8 (config, step, class_count, image_shape)

Tensors are written in sorted name order and the JSON with sorted keys, so
saving the same state always produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError
from .trainer import ModelState, TrainConfig

MAGIC = b"AGRP"
VERSION = 1


def encode(model: ModelState) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(model.params))]
    for name in sorted(model.params):
        arr = np.asarray(model.params[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    meta = {
        "config": model.config.to_dict(),
        "step": int(model.step),
        "class_count": int(model.class_count),
        "image_shape": [int(v) for v in model.image_shape],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.source}: checkpoint ends early at byte {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def u32(self) -> int:
        return self.u32s(1)[0]


def decode(data: bytes, source="<bytes>") -> ModelState:
    r = _Reader(data, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = r.u32s(rank)
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes after checkpoint")
    return ModelState(
        params=params,
        config=TrainConfig.from_dict(meta["config"]),
        class_count=int(meta["class_count"]),
        image_shape=tuple(meta["image_shape"]),
        step=int(meta["step"]),
    )


def save(model: ModelState, path) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> ModelState:
    return decode(Path(path).read_bytes(), source=path)
