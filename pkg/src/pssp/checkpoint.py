"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"OCF1"                 magic
    u32                     format version (1)
    u32 + bytes             JSON metadata (architecture, norm stats, iteration, val Q8)
    u32                     tensor count
    per tensor:
      u16 + bytes           UTF-8 name
      u8                    dtype code (0 = float32)
      u8                    rank
      u64 * rank            dims
      raw values            row-major float32
"""
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingFileError
from .netgraph import ArchitectureConfig, build_model

MAGIC = b"OCF1"
VERSION = 1
DTYPE_F32 = 0


def dumps(arrays, metadata):
    buf = io.BytesIO()
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob):
    """Parse a checkpoint into ``(arrays, metadata)``."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    try:
        version, meta_len = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 12
        metadata = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise FormatError(f"tensor {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(view):
                raise FormatError(f"tensor {name!r} runs past the end of the file")
            arrays[name] = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return arrays, metadata


def save_checkpoint(path, model, **metadata):
    meta = {"architecture": model.cfg.to_dict()}
    meta.update(metadata)
    Path(path).write_bytes(dumps(model.state_arrays(), meta))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such checkpoint: {path}")
    arrays, meta = loads(path.read_bytes())
    model = build_model(ArchitectureConfig.from_dict(meta["architecture"]))
    model.load_state_arrays(arrays)
    return model, meta
