"""Binary checkpoints.

Layout (all integers little-endian)::

    b"BSPRUNE1"
    u64 topology length, topology as UTF-8 JSON
    u32 tensor count, then per tensor:
        u16 id length, id (UTF-8, "node/param")
        u8 dtype code (1 = float32), u8 rank, rank x u32 extents
        raw little-endian payload
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError, ShapeError
from .graph import FORMAT_VERSION, NetGraph

MAGIC = b"BSPRUNE1"
_DTYPES = {1: np.dtype("<f4")}
_CODES = {np.dtype("float32"): 1}


def save_checkpoint(g, path):
    """Write ``g`` (topology and every tensor) to ``path`` atomically."""
    topo = json.dumps(g.to_dict(), sort_keys=True).encode()
    tensors = [(f"{n.id}/{name}", arr) for n in g for name, arr in sorted(n.params.items())]
    chunks = [MAGIC, struct.pack("<Q", len(topo)), topo, struct.pack("<I", len(tensors))]
    for tid, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {tid!r} has unsupported dtype {arr.dtype}")
        raw_id = tid.encode()
        chunks.append(struct.pack("<H", len(raw_id)) + raw_id)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint (need {n} bytes at offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint; any corruption raises before a graph is returned."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (topo_len,) = r.unpack("<Q")
    try:
        topo = json.loads(r.take(topo_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable topology section: {exc}") from exc
    try:
        g = NetGraph.from_dict(topo)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}; written by a newer version? "
                              f"this reader supports graph format {FORMAT_VERSION}") from exc
    (count,) = r.unpack("<I")
    for _ in range(count):
        (id_len,) = r.unpack("<H")
        tid = r.take(id_len).decode()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {tid!r} has unknown dtype code {code}")
        extents = r.unpack(f"<{rank}I")
        dtype = _DTYPES[code]
        size = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(extents).astype(np.float32)
        nid, _, name = tid.rpartition("/")
        if nid not in g.nodes:
            raise CheckpointError(f"{path}: tensor {tid!r} belongs to no node")
        g[nid].params[name] = arr
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if g.materialized:
        g.infer_shapes()
    return g
