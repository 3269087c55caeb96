"""Intensity normalization and contrast-phase averaging.

Normalization statistics are computed over the voxels whose value lies inside
a percentile window (default 0th..99.8th, pooled over all channels of the
series) and the resulting affine map is applied to every voxel; nothing is
clipped. Percentiles use the nearest-rank convention throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import DataError, NumericalError
from .volume import Volume

DEFAULT_PHASE_NAMES = (
    "pre_contrast",
    "early_arterial",
    "late_arterial",
    "portal_venous",
    "late_portal_equilibrium",
    "late_equilibrium",
)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: k-th smallest value with k = ceil(p/100 * N), k >= 1."""
    arr = np.asarray(values).ravel()
    if arr.size == 0:
        raise DataError("percentile of empty value set")
    if not 0.0 <= p <= 100.0:
        raise DataError(f"percentile p={p} outside [0, 100]")
    k = max(1, ceil(p / 100.0 * arr.size))
    return float(np.partition(arr, k - 1)[k - 1])


def normalize_zmuv(v: Volume, p_low: float = 0.0, p_high: float = 99.8) -> Volume:
    """Zero-mean unit-variance rescaling with window statistics.

    Mean and population standard deviation come from voxels with value in
    [P(p_low), P(p_high)] pooled over all channels; the map (x - mu) / sigma
    is then applied to every voxel of every channel.
    """
    flat = v.data.ravel()
    lo = percentile(flat, p_low)
    hi = percentile(flat, p_high)
    window = flat[(flat >= lo) & (flat <= hi)]
    mu = float(np.mean(window, dtype=np.float64))
    var = float(np.var(window, dtype=np.float64))
    sigma = var ** 0.5
    if not np.isfinite(sigma) or sigma <= 1e-12 * max(1.0, abs(mu)):
        raise NumericalError(
            f"zero variance inside percentile window [{lo}, {hi}]; cannot normalize"
        )
    out = ((v.data.astype(np.float64) - mu) / sigma).astype(np.float32)
    return Volume(dims=v.dims, channels=v.channels, spacing=v.spacing, data=out)


@dataclass(frozen=True)
class PhaseGrouping:
    """Ordered partition of acquired time points into named contrast phases."""

    names: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        if len(self.names) != len(self.groups):
            raise DataError("one name per group required")
        if any(len(g) == 0 for g in self.groups):
            raise DataError("phase groups must be nonempty")
        flat = [i for g in self.groups for i in g]
        if len(set(flat)) != len(flat):
            raise DataError("phase groups must be disjoint")

    @property
    def n_timepoints(self) -> int:
        return sum(len(g) for g in self.groups)

    def validate_partition(self, channels: int) -> None:
        flat = sorted(i for g in self.groups for i in g)
        if flat != list(range(channels)):
            raise DataError(
                f"grouping covers indices {flat}, series has channels 0..{channels - 1}"
            )

    @classmethod
    def identity(cls, n: int = 6, names=DEFAULT_PHASE_NAMES) -> "PhaseGrouping":
        return cls(names=tuple(names)[:n], groups=tuple((i,) for i in range(n)))


def average_phases(series: Volume, grouping: PhaseGrouping) -> Volume:
    """Collapse a time series volume to one channel per phase by voxelwise mean."""
    grouping.validate_partition(series.channels)
    nx, ny, nz = series.dims
    out = np.empty((len(grouping.groups), nz, ny, nx), dtype=np.float32)
    for ci, group in enumerate(grouping.groups):
        out[ci] = np.mean(series.data[list(group)], axis=0, dtype=np.float64).astype(np.float32)
    return Volume(dims=series.dims, channels=len(grouping.groups),
                  spacing=series.spacing, data=out)


def write_grouping(path, grouping: PhaseGrouping) -> None:
    lines = [
        f"{name}: {','.join(str(i) for i in group)}"
        for name, group in zip(grouping.names, grouping.groups)
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_grouping(path) -> PhaseGrouping:
    """Parse the sidecar grouping file: one ``phaseName: i,j,k`` line per phase."""
    names, groups = [], []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise DataError(f"{path}: malformed grouping line {line!r}")
            name, _, idx = line.partition(":")
            try:
                group = tuple(int(tok) for tok in idx.split(",") if tok.strip() != "")
            except ValueError as exc:
                raise DataError(f"{path}: bad index list in {line!r}") from exc
            names.append(name.strip())
            groups.append(group)
    if not names:
        raise DataError(f"{path}: empty grouping file")
    return PhaseGrouping(names=tuple(names), groups=tuple(groups))
