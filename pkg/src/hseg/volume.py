"""Volume/mask data model and the ``HSEGVOL1`` binary container.

Axis convention, fixed once for the whole package: voxel (x, y, z, c) is
stored x-fastest, then y, then z, then channel. In numpy terms every payload
is a C-contiguous array of shape (channels, nz, ny, nx) for images and
(nz, ny, nx) for masks, so ``arr.tobytes()`` is exactly the file payload.

File layout (little-endian):

    8 bytes  magic ``HSEGVOL1``
    u32     nx, ny, nz, channels
    f32     sx, sy, sz           (mm per voxel)
    u8      dtype: 0 = float32 image, 1 = uint8 mask
    raw payload, nx*ny*nz*channels elements

Masks always carry channels == 1 and dtype 1.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    GeometryError,
    HeaderMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"HSEGVOL1"
_HEADER = struct.Struct("<4I3fB")

DTYPE_F32 = 0
DTYPE_U8 = 1


def _check_geometry(dims, spacing):
    nx, ny, nz = dims
    if min(nx, ny, nz) < 1:
        raise HeaderMismatchError(f"dims must be >= 1, got {dims}")
    if min(spacing) <= 0:
        raise HeaderMismatchError(f"spacing must be positive, got {spacing}")


@dataclass(frozen=True)
class Volume:
    """Multi-channel 3D float image with physical voxel spacing.

    ``data`` has shape (channels, nz, ny, nx), float32, read-only.
    """

    dims: tuple[int, int, int]  # (nx, ny, nz)
    channels: int
    spacing: tuple[float, float, float]  # (sx, sy, sz) mm
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        _check_geometry(self.dims, self.spacing)
        nx, ny, nz = self.dims
        expected = (self.channels, nz, ny, nx)
        if self.data.shape != expected:
            raise HeaderMismatchError(
                f"data shape {self.data.shape} != expected {expected}"
            )
        if self.data.dtype != np.float32:
            raise HeaderMismatchError(f"volume dtype must be float32, got {self.data.dtype}")
        arr = np.ascontiguousarray(self.data)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        """Build from an array shaped (channels, nz, ny, nx) or (nz, ny, nx)."""
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise HeaderMismatchError(f"expected 3D or 4D array, got ndim={arr.ndim}")
        c, nz, ny, nx = arr.shape
        return cls(dims=(nx, ny, nz), channels=c, spacing=tuple(float(s) for s in spacing), data=arr)

    def at(self, x: int, y: int, z: int, c: int = 0) -> float:
        return float(self.data[c, z, y, x])

    def same_grid(self, other) -> bool:
        return self.dims == other.dims and tuple(self.spacing) == tuple(other.spacing)


@dataclass(frozen=True)
class BinaryMask:
    """3D {0,1} mask sharing the Volume geometry. ``data``: (nz, ny, nx) uint8."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        _check_geometry(self.dims, self.spacing)
        nx, ny, nz = self.dims
        if self.data.shape != (nz, ny, nx):
            raise HeaderMismatchError(
                f"mask shape {self.data.shape} != expected {(nz, ny, nx)}"
            )
        if self.data.dtype != np.uint8:
            raise HeaderMismatchError(f"mask dtype must be uint8, got {self.data.dtype}")
        bad = (self.data > 1).any()
        if bad:
            raise HeaderMismatchError("mask values must be 0 or 1")
        arr = np.ascontiguousarray(self.data)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0)) -> "BinaryMask":
        arr = np.asarray(arr)
        arr = (arr != 0).astype(np.uint8)
        nz, ny, nx = arr.shape
        return cls(dims=(nx, ny, nz), spacing=tuple(float(s) for s in spacing), data=arr)

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def same_grid(self, other) -> bool:
        return self.dims == other.dims and tuple(self.spacing) == tuple(other.spacing)


@dataclass(frozen=True)
class MultiChannelSlice:
    """One axial slice: ``data`` shaped (ny, nx, channels) float32, plus its z index."""

    data: np.ndarray
    z_index: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HeaderMismatchError(f"slice must be (ny, nx, C), got shape {self.data.shape}")
        if self.data.shape[2] < 1:
            raise HeaderMismatchError("slice needs at least one channel")

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


def _write_atomic(path, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_volume(path, v: Volume) -> None:
    header = MAGIC + _HEADER.pack(*v.dims, v.channels, *v.spacing, DTYPE_F32)
    _write_atomic(path, header + v.data.tobytes())


def write_mask(path, m: BinaryMask) -> None:
    header = MAGIC + _HEADER.pack(*m.dims, 1, *m.spacing, DTYPE_U8)
    _write_atomic(path, header + m.data.tobytes())


def _read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    nx, ny, nz, channels, sx, sy, sz, dtype = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if dtype not in (DTYPE_F32, DTYPE_U8):
        raise HeaderMismatchError(f"{path}: unknown dtype tag {dtype}")
    count = nx * ny * nz * channels
    itemsize = 4 if dtype == DTYPE_F32 else 1
    payload = blob[off:]
    if len(payload) != count * itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {count * itemsize}"
        )
    np_dtype = np.float32 if dtype == DTYPE_F32 else np.uint8
    arr = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder("<")).astype(np_dtype)
    return (nx, ny, nz), channels, (sx, sy, sz), dtype, arr


def read_volume(path) -> Volume:
    dims, channels, spacing, dtype, arr = _read_container(path)
    if dtype != DTYPE_F32:
        raise HeaderMismatchError(f"{path}: expected a float32 image, found a mask payload")
    nx, ny, nz = dims
    return Volume(dims=dims, channels=channels, spacing=spacing,
                  data=arr.reshape(channels, nz, ny, nx))


def read_mask(path) -> BinaryMask:
    dims, channels, spacing, dtype, arr = _read_container(path)
    if dtype != DTYPE_U8:
        raise HeaderMismatchError(f"{path}: expected a mask, found a float32 image payload")
    if channels != 1:
        raise HeaderMismatchError(f"{path}: masks must have 1 channel, got {channels}")
    nx, ny, nz = dims
    return BinaryMask(dims=dims, spacing=spacing, data=arr.reshape(nz, ny, nx))


def extract_slice(v: Volume, z: int) -> MultiChannelSlice:
    """Axial slice at z as an (ny, nx, C) array with slice(y,x,c) == v(x,y,z,c)."""
    nx, ny, nz = v.dims
    if not 0 <= z < nz:
        raise IndexError(f"z={z} out of range [0, {nz})")
    sl = np.ascontiguousarray(np.moveaxis(v.data[:, z, :, :], 0, -1))
    return MultiChannelSlice(data=sl, z_index=z)


def stack_probability_slices(slices, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Reassemble per-slice 2-class softmax maps into one volume.

    Expects one slice per z index (any order), each (ny, nx, 2); output channel 1
    holds the foreground map. Inverse of extract_slice over a 2-channel volume.
    """
    if not slices:
        raise GeometryError("no slices to stack")
    by_z = {s.z_index: s for s in slices}
    nz = len(slices)
    if sorted(by_z) != list(range(nz)):
        raise GeometryError(f"slice z indices {sorted(by_z)} do not cover 0..{nz - 1}")
    ny, nx, c = by_z[0].data.shape
    if c != 2:
        raise GeometryError(f"expected 2-channel softmax slices, got {c}")
    out = np.empty((c, nz, ny, nx), dtype=np.float32)
    for z in range(nz):
        d = by_z[z].data
        if d.shape != (ny, nx, c):
            raise GeometryError(f"slice {z} shape {d.shape} != {(ny, nx, c)}")
        out[:, z, :, :] = np.moveaxis(d, -1, 0)
    return Volume(dims=(nx, ny, nz), channels=c, spacing=tuple(spacing), data=out)
