"""``HSEGWGT1`` weight checkpoints.

Layout (little-endian):

    8 bytes  magic ``HSEGWGT1``
    u8 + ascii   network kind tag ("liver", "dual", "single6", "single9")
    u64          trained step count (batch-norm stats valid iff > 0)
    u32          record count
    records:     u32 layer index; u8 + ascii tag ("conv.w", "bn.running_mean", ...);
                 u8 ndim; u32 dims[ndim]; raw float32 payload
    u8           adam-present flag
    adam:        f64 lr, beta1, beta2, eps; u64 t; u32 tensor count;
                 per tensor: first-moment then second-moment payloads,
                 shaped like the trainable parameters in record order
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import BadMagicError, HeaderMismatchError, TruncatedPayloadError
from .optim import Adam

MAGIC = b"HSEGWGT1"


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def tag(self, s: str):
        b = s.encode("ascii")
        self.pack("B", len(b))
        self.raw(b)

    def array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        self.pack("B", arr.ndim)
        for d in arr.shape:
            self.pack("I", d)
        self.raw(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedPayloadError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        vals = struct.unpack(fmt, self.raw(size))
        return vals if len(vals) > 1 else vals[0]

    def tag(self) -> str:
        n = self.unpack("B")
        return self.raw(n).decode("ascii")

    def array(self) -> np.ndarray:
        ndim = self.unpack("B")
        shape = tuple(self.unpack("I") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = self.raw(count * 4)
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, name: str, layers, trained_steps: int,
                    adam: Adam | None = None) -> None:
    """Serialize the flat layer list (parameters + running stats) and optimizer."""
    w = _Writer()
    w.raw(MAGIC)
    w.tag(name)
    w.pack("Q", trained_steps)
    records = []
    for idx, layer in enumerate(layers):
        for tag, arr in layer.state_arrays():
            records.append((idx, f"{layer.kind}.{tag}", arr))
    w.pack("I", len(records))
    for idx, tag, arr in records:
        w.pack("I", idx)
        w.tag(tag)
        w.array(arr)
    if adam is not None and adam.m:
        w.pack("B", 1)
        w.pack("dddd", adam.lr, adam.beta1, adam.beta2, adam.eps)
        w.pack("Q", adam.t)
        w.pack("I", len(adam.m))
        for m, v in zip(adam.m, adam.v):
            w.array(m)
            w.array(v)
    else:
        w.pack("B", 0)
    blob = b"".join(w.parts)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint: (name, trained_steps, {(layer_idx, tag): array}, adam|None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic")
    r = _Reader(blob, str(path))
    r.off = len(MAGIC)
    name = r.tag()
    trained_steps = r.unpack("Q")
    n_records = r.unpack("I")
    records = {}
    for _ in range(n_records):
        idx = r.unpack("I")
        tag = r.tag()
        records[(idx, tag)] = r.array()
    adam = None
    if r.unpack("B"):
        adam = Adam(lr=0.0)
        adam.lr, adam.beta1, adam.beta2, adam.eps = r.unpack("dddd")
        adam.t = r.unpack("Q")
        n_tensors = r.unpack("I")
        for _ in range(n_tensors):
            adam.m.append(r.array())
            adam.v.append(r.array())
    return name, trained_steps, records, adam


def restore_layers(layers, records, path="checkpoint") -> None:
    """Copy checkpoint records into an already-built layer list, shape-checked."""
    expected = set()
    for idx, layer in enumerate(layers):
        for tag, arr in layer.state_arrays():
            key = (idx, f"{layer.kind}.{tag}")
            expected.add(key)
            if key not in records:
                raise HeaderMismatchError(f"{path}: missing record {key}")
            rec = records[key]
            if rec.shape != arr.shape:
                raise HeaderMismatchError(
                    f"{path}: record {key} has shape {rec.shape}, expected {arr.shape}")
            arr[...] = rec
    extra = set(records) - expected
    if extra:
        raise HeaderMismatchError(f"{path}: unexpected records {sorted(extra)[:4]}")
