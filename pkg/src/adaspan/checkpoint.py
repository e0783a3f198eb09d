"""Binary checkpoints.

Layout (all integers little-endian)::

    b"ADSP"  u32 version
    u32 n    n bytes of UTF-8 "key=value" lines   (model config + metadata)
    u32 count
    count x { u32 len, name, u32 rank, rank x u64 dim, raw data }

Tensor data are stored in the dtype named by the ``dtype`` key, so a saved
model reloads bit-exactly.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerLM

MAGIC = b"ADSP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_kv(values: dict[str, str]) -> bytes:
    lines = []
    for key, val in values.items():
        val = str(val)
        if "\n" in val or "=" in key:
            raise CheckpointError(f"cannot store key {key!r} in a checkpoint header")
        lines.append(f"{key}={val}")
    return ("\n".join(lines)).encode("utf-8")


def _decode_kv(blob: bytes) -> dict[str, str]:
    out = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            key, _, val = line.partition("=")
            out[key] = val
    return out


def encode_symbols(symbols) -> str:
    return ",".join(f"{ord(c):x}" for c in symbols)


def decode_symbols(text: str) -> list[str]:
    return [chr(int(h, 16)) for h in text.split(",")] if text else []


def save(path, model: TransformerLM, meta: dict | None = None,
         extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``model`` (and optional ``extra`` arrays such as optimizer state)."""
    dtype = model.config.np_dtype.newbyteorder("<")
    header = {f"config.{k}": v for k, v in model.config.to_dict().items()}
    for k, v in (meta or {}).items():
        header[f"meta.{k}"] = v
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    for name, arr in (extra or {}).items():
        tensors[f"extra.{name}"] = arr

    chunks = [MAGIC, struct.pack("<I", VERSION)]
    kv = _encode_kv(header)
    chunks += [struct.pack("<I", len(kv)), kv, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw header and named arrays of a checkpoint."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not an adaptive-span checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = _decode_kv(r.take(r.u32()))
    dtype = np.dtype(header.get("config.dtype", "float32")).newbyteorder("<")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    return header, arrays


def load(path) -> tuple[TransformerLM, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild the model; returns ``(model, meta, extra_arrays)``."""
    header, arrays = read(path)
    cfg = ModelConfig.from_dict({k[7:]: v for k, v in header.items() if k.startswith("config.")})
    model = TransformerLM.init(cfg, np.random.default_rng(0))
    params = model.named_parameters()
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arrays[name].shape}, "
                                  f"config implies {p.shape}")
        p.data[...] = arrays[name]
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra.")}
    return model, meta, extra
