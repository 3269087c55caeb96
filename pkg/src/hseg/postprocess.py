"""Binary post-processing for probability maps.

Liver pipeline: threshold 0.5 (strict >), 3D hole filling, then keep the
largest 26-connected component. Detection pipeline: mask the probability map
by the liver segmentation dilated with a 5x5 in-plane element, threshold,
3x3x3 closing, plus-shaped 3x3 in-plane opening, then split the result into
objects by 26-connectivity.

Masks live on (nz, ny, nx) uint8 grids. 2D structuring elements act
independently on each axial slice. Hole filling uses 6-connected background
(the complement of 26-connected foreground). Closing is dilate-then-erode,
opening erode-then-dilate, both with zero padding outside the grid.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, GeometryError
from .volume import BinaryMask, Volume

STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
STRUCT_6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class StructuringElement:
    """Offset-set structuring element; offsets are (dz, dy, dx) rows."""

    kind: str
    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 3)
        if not (off == 0).all(axis=1).any():
            raise DataError(f"structuring element {self.kind} must contain the origin")
        off.flags.writeable = False
        object.__setattr__(self, "offsets", off)

    @classmethod
    def box2d(cls, size: int = 5) -> "StructuringElement":
        r_lo, r_hi = -(size // 2), (size - 1) // 2
        off = [(0, dy, dx) for dy in range(r_lo, r_hi + 1) for dx in range(r_lo, r_hi + 1)]
        return cls(kind=f"box2d{size}", offsets=np.array(off))

    @classmethod
    def box3d(cls, size: int = 3) -> "StructuringElement":
        r_lo, r_hi = -(size // 2), (size - 1) // 2
        off = [(dz, dy, dx)
               for dz in range(r_lo, r_hi + 1)
               for dy in range(r_lo, r_hi + 1)
               for dx in range(r_lo, r_hi + 1)]
        return cls(kind=f"box3d{size}", offsets=np.array(off))

    @classmethod
    def plus2d(cls) -> "StructuringElement":
        off = [(0, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
        return cls(kind="plus2d3", offsets=np.array(off))


LIVER_DILATION_SE = StructuringElement.box2d(5)
CLOSING_SE = StructuringElement.box3d(3)
OPENING_SE = StructuringElement.plus2d()


@dataclass(frozen=True)
class DetectionObject:
    """One 26-connected component of a detection mask."""

    label: int
    indices: np.ndarray  # linear voxel indices into the (nz, ny, nx) grid
    dims: tuple[int, int, int]  # (nx, ny, nz)
    spacing: tuple[float, float, float]

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        return int(self.indices.size)

    @property
    def volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return self.voxel_count * sx * sy * sz / 1000.0

    def coords(self) -> np.ndarray:
        """(K, 3) array of (z, y, x) voxel coordinates."""
        nx, ny, nz = self.dims
        return np.stack(np.unravel_index(self.indices, (nz, ny, nx)), axis=1)

    def centroid_mm(self) -> tuple[float, float, float]:
        zyx = self.coords().mean(axis=0)
        sx, sy, sz = self.spacing
        return (float(zyx[2] * sx), float(zyx[1] * sy), float(zyx[0] * sz))

    def to_mask(self) -> BinaryMask:
        nx, ny, nz = self.dims
        arr = np.zeros(nz * ny * nx, dtype=np.uint8)
        arr[self.indices] = 1
        return BinaryMask(dims=self.dims, spacing=self.spacing,
                          data=arr.reshape(nz, ny, nx))


def threshold_prob(p: Volume, t: float) -> BinaryMask:
    """Binary mask of voxels with probability strictly greater than t."""
    if not 0.0 <= t <= 1.0:
        raise DataError(f"threshold {t} outside [0, 1]")
    if p.channels != 1:
        raise DataError(f"expected a 1-channel probability volume, got {p.channels}")
    return BinaryMask(dims=p.dims, spacing=p.spacing,
                      data=(p.data[0] > t).astype(np.uint8))


def _apply_offsets(arr: np.ndarray, se: StructuringElement, reduce_all: bool) -> np.ndarray:
    """min/max sweep over SE offsets with zero padding outside the grid."""
    pz = int(np.abs(se.offsets[:, 0]).max())
    py = int(np.abs(se.offsets[:, 1]).max())
    px = int(np.abs(se.offsets[:, 2]).max())
    padded = np.pad(arr.astype(bool), ((pz, pz), (py, py), (px, px)))
    nz, ny, nx = arr.shape
    out = np.ones(arr.shape, dtype=bool) if reduce_all else np.zeros(arr.shape, dtype=bool)
    for dz, dy, dx in se.offsets:
        view = padded[pz + dz:pz + dz + nz, py + dy:py + dy + ny, px + dx:px + dx + nx]
        if reduce_all:
            out &= view
        else:
            out |= view
    return out


def dilate(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    return BinaryMask(dims=m.dims, spacing=m.spacing,
                      data=_apply_offsets(m.data, se, reduce_all=False).astype(np.uint8))


def erode(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    return BinaryMask(dims=m.dims, spacing=m.spacing,
                      data=_apply_offsets(m.data, se, reduce_all=True).astype(np.uint8))


def close(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Dilation followed by erosion.

    The intermediate dilation runs on a grid padded by the element extent so
    border structures close exactly as on an unbounded grid; without this the
    clipped dilation would let the erosion eat foreground at the border,
    breaking extensivity and idempotence.
    """
    pads = tuple(int(np.abs(se.offsets[:, ax]).max()) for ax in range(3))
    padded = np.pad(m.data.astype(bool), tuple((p, p) for p in pads))
    closed = _apply_offsets(_apply_offsets(padded, se, reduce_all=False),
                            se, reduce_all=True)
    pz, py, px = pads
    nz, ny, nx = m.data.shape
    out = closed[pz:pz + nz, py:py + ny, px:px + nx]
    return BinaryMask(dims=m.dims, spacing=m.spacing, data=out.astype(np.uint8))


def open_(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Erosion followed by dilation; removes structures the element cannot cover.

    Erosion shrinks the set away from the border, so no padding is needed for
    unbounded-grid semantics here.
    """
    return dilate(erode(m, se), se)


def fill_holes_3d(m: BinaryMask) -> BinaryMask:
    """Set background regions not 6-connected to the volume border to foreground."""
    bg = m.data == 0
    labels, n = ndimage.label(bg, structure=STRUCT_6)
    if n == 0:
        return m
    border = np.zeros(m.data.shape, dtype=bool)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    outside = np.unique(labels[border & bg])
    hole = bg & ~np.isin(labels, outside[outside > 0])
    return BinaryMask(dims=m.dims, spacing=m.spacing,
                      data=(m.data.astype(bool) | hole).astype(np.uint8))


def largest_cc(m: BinaryMask, warn_empty: bool = True) -> BinaryMask:
    """Keep only the largest 26-connected component.

    Ties break deterministically toward the component containing the lowest
    linear voxel index. An empty mask is returned unchanged with a warning.
    """
    labels, n = ndimage.label(m.data, structure=STRUCT_26)
    if n == 0:
        if warn_empty:
            warnings.warn("largest_cc: empty mask", stacklevel=2)
        return m
    flat = labels.ravel()
    counts = np.bincount(flat)[1:]  # drop background
    best = counts.max()
    # among max-size components, the winner is the one seen first in raster
    # order, i.e. whose minimum linear index is lowest
    tied = np.flatnonzero(counts == best) + 1
    if tied.size == 1:
        winner = tied[0]
    else:
        first_seen = {}
        for pos in np.flatnonzero(np.isin(flat, tied)):
            lab = flat[pos]
            if lab not in first_seen:
                first_seen[lab] = pos
                if len(first_seen) == tied.size:
                    break
        winner = min(tied, key=lambda lab: first_seen[lab])
    return BinaryMask(dims=m.dims, spacing=m.spacing,
                      data=(labels == winner).astype(np.uint8))


def label_objects_26(m: BinaryMask) -> list[DetectionObject]:
    """Partition the foreground into 26-connected objects, raster-ordered."""
    labels, n = ndimage.label(m.data, structure=STRUCT_26)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    out = []
    start = np.searchsorted(sorted_labels, 1)
    for lab in range(1, n + 1):
        stop = np.searchsorted(sorted_labels, lab + 1)
        out.append(DetectionObject(label=lab, indices=np.sort(order[start:stop]),
                                   dims=m.dims, spacing=m.spacing))
        start = stop
    return out


def postprocess_liver(prob: Volume, t: float = 0.5) -> BinaryMask:
    """Threshold, fill 3D holes, keep the largest component, in that order."""
    return largest_cc(fill_holes_3d(threshold_prob(prob, t)))


def postprocess_detect(prob: Volume, liver: BinaryMask, t: float = 0.5,
                       dilate_liver: bool = True) -> list[DetectionObject]:
    """Mask by the (dilated) liver, threshold, close 3x3x3, open with the
    in-plane plus, then split into 26-connected objects."""
    if prob.dims != liver.dims:
        raise GeometryError(f"probability grid {prob.dims} != liver grid {liver.dims}")
    region = dilate(liver, LIVER_DILATION_SE) if dilate_liver else liver
    masked = Volume(dims=prob.dims, channels=1, spacing=prob.spacing,
                    data=(prob.data * region.data[None]).astype(np.float32))
    binary = threshold_prob(masked, t)
    binary = close(binary, CLOSING_SE)
    binary = open_(binary, OPENING_SE)
    return label_objects_26(binary)


def write_objects_csv(path, objects: list[DetectionObject]) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "voxels", "ml", "centroid_x_mm", "centroid_y_mm", "centroid_z_mm"])
        for obj in objects:
            cx, cy, cz = obj.centroid_mm()
            writer.writerow([obj.label, obj.voxel_count, f"{obj.volume_ml:.6f}",
                             f"{cx:.3f}", f"{cy:.3f}", f"{cz:.3f}"])
    os.replace(tmp, path)
