"""Segmentation and detection evaluation.

Segmentation metrics compare a predicted mask X against a reference mask Y:
overlap 2|X∩Y|/(|X|+|Y|), signed volume difference (|X|-|Y|)/|Y|*100, and the
95th-percentile Hausdorff distance over boundary voxels in millimetres.
Detection metrics treat a reference lesion as found when any predicted object
shares at least one voxel with it; false positives are predicted objects that
overlap no reference lesion. The FROC protocol sweeps thresholds 0.90 down to
0.00 in steps of 0.10 with the full post-processing chain at every step.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, GeometryError
from .postprocess import DetectionObject, label_objects_26, postprocess_detect
from .volume import BinaryMask, Volume

FROC_THRESHOLDS = tuple(round(0.9 - 0.1 * i, 2) for i in range(10))
DEFAULT_SIZE_BINS_ML = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class SegMetricReport:
    case_id: str
    dsc: float
    rvd_percent: float
    hd95_mm: float


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    mean_tpr: float
    median_fpc: float
    total_fp: int


@dataclass(frozen=True)
class FrocCurve:
    points: tuple[FrocPoint, ...]

    def __post_init__(self):
        ts = tuple(p.threshold for p in self.points)
        if ts != FROC_THRESHOLDS:
            raise DataError(f"FROC thresholds must be {FROC_THRESHOLDS}, got {ts}")


def _check_same_grid(x: BinaryMask, y: BinaryMask):
    if not x.same_grid(y):
        raise GeometryError(f"grids differ: {x.dims}/{x.spacing} vs {y.dims}/{y.spacing}")


def dsc(x: BinaryMask, y: BinaryMask) -> float:
    _check_same_grid(x, y)
    nx_ = x.count()
    ny_ = y.count()
    if nx_ + ny_ == 0:
        raise DataError("overlap coefficient undefined for two empty masks")
    inter = int(np.sum((x.data & y.data), dtype=np.int64))
    return 2.0 * inter / (nx_ + ny_)


def rvd(x: BinaryMask, y: BinaryMask) -> float:
    """Signed relative volume difference of X versus reference Y, in percent."""
    _check_same_grid(x, y)
    ny_ = y.count()
    if ny_ == 0:
        raise DataError("relative volume difference undefined for empty reference")
    return (x.count() - ny_) / ny_ * 100.0


def boundary_points(m: BinaryMask) -> np.ndarray:
    """Foreground voxels with a 6-neighbor background (or out-of-bounds) face,
    as (K, 3) physical coordinates (x, y, z) in mm."""
    fg = m.data.astype(bool)
    if not fg.any():
        raise DataError("boundary of an empty mask")
    interior = np.ones_like(fg)
    interior[1:, :, :] &= fg[:-1, :, :]
    interior[:-1, :, :] &= fg[1:, :, :]
    interior[:, 1:, :] &= fg[:, :-1, :]
    interior[:, :-1, :] &= fg[:, 1:, :]
    interior[:, :, 1:] &= fg[:, :, :-1]
    interior[:, :, :-1] &= fg[:, :, 1:]
    # voxels at the grid border always touch out-of-bounds background
    interior[0, :, :] = interior[-1, :, :] = False
    interior[:, 0, :] = interior[:, -1, :] = False
    interior[:, :, 0] = interior[:, :, -1] = False
    boundary = fg & ~interior
    zz, yy, xx = np.nonzero(boundary)
    sx, sy, sz = m.spacing
    return np.stack([xx * sx, yy * sy, zz * sz], axis=1).astype(np.float64)


def _nearest_rank(sorted_vals: np.ndarray, p: float) -> float:
    k = max(1, ceil(p / 100.0 * sorted_vals.size))
    return float(sorted_vals[k - 1])


def hd95(x: BinaryMask, y: BinaryMask) -> float:
    """Symmetric 95th-percentile Hausdorff distance between boundary sets, mm."""
    _check_same_grid(x, y)
    px = boundary_points(x)
    py = boundary_points(y)
    d_xy = cKDTree(py).query(px)[0]
    d_yx = cKDTree(px).query(py)[0]
    return max(_nearest_rank(np.sort(d_xy), 95.0), _nearest_rank(np.sort(d_yx), 95.0))


def evaluate_segmentation(case_id: str, pred: BinaryMask, ref: BinaryMask) -> SegMetricReport:
    return SegMetricReport(case_id=case_id, dsc=dsc(pred, ref),
                           rvd_percent=rvd(pred, ref), hd95_mm=hd95(pred, ref))


def detection_match(pred: list[DetectionObject], truth: list[DetectionObject]):
    """Object-level matching by any-voxel overlap.

    Returns (tpr, fp_count, detected_flags) where detected_flags aligns with
    ``truth``. Raises on an empty truth list (the rate is undefined there).
    """
    if not truth:
        raise DataError("true positive rate undefined without reference lesions")
    dims = truth[0].dims
    nx, ny, nz = dims
    for obj in pred + truth:
        if obj.dims != dims:
            raise GeometryError("objects live on different grids")
    truth_labels = np.zeros(nz * ny * nx, dtype=np.int32)
    for k, obj in enumerate(truth, start=1):
        truth_labels[obj.indices] = k
    detected = np.zeros(len(truth), dtype=bool)
    fp = 0
    for obj in pred:
        hit = np.unique(truth_labels[obj.indices])
        hit = hit[hit > 0]
        if hit.size:
            detected[hit - 1] = True
        else:
            fp += 1
    tpr = float(detected.sum()) / len(truth)
    return tpr, fp, detected.tolist()


@dataclass(frozen=True)
class CaseDetectionResult:
    case_id: str
    threshold: float
    tpr: float
    fp_count: int
    n_truth: int


def froc(probs, truths, livers, dilate_liver: bool = True, jobs: int = 1) -> FrocCurve:
    """Sweep the detection threshold over the fixed grid and aggregate.

    ``probs``: per-case foreground probability volumes; ``truths``: lesion
    masks; ``livers``: liver masks used for the masking step. ``jobs`` > 1
    post-processes cases in parallel; results are assembled by case index and
    do not depend on scheduling.
    """
    truth_objects = [label_objects_26(t) for t in truths]

    def one_case(args):
        prob, truth_obj, liver, t = args
        pred = postprocess_detect(prob, liver, t=t, dilate_liver=dilate_liver)
        tpr, fp, _ = detection_match(pred, truth_obj)
        return tpr, fp

    points = []
    for t in FROC_THRESHOLDS:
        tasks = [(p, to, lv, t) for p, to, lv in zip(probs, truth_objects, livers)]
        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one_case, tasks))
        else:
            results = [one_case(task) for task in tasks]
        tprs = [r[0] for r in results]
        fpcs = [r[1] for r in results]
        points.append(FrocPoint(threshold=t, mean_tpr=float(np.mean(tprs)),
                                median_fpc=float(np.median(fpcs)),
                                total_fp=int(sum(fpcs))))
    return FrocCurve(points=tuple(points))


def size_histogram(objects: list[DetectionObject], detected_flags,
                   bin_edges_ml=DEFAULT_SIZE_BINS_ML):
    """Per-size-bin lesion counts: (totals, detected) arrays.

    ``bin_edges_ml`` must be sorted ascending; bins are [e0,e1), ..., plus one
    overflow bin for sizes >= the last edge.
    """
    edges = list(bin_edges_ml)
    if edges != sorted(edges) or len(set(edges)) != len(edges):
        raise DataError(f"bin edges must be strictly increasing, got {edges}")
    if len(objects) != len(detected_flags):
        raise DataError("one detected flag per object required")
    n_bins = len(edges)  # len-1 interior bins + overflow
    totals = np.zeros(n_bins, dtype=np.int64)
    detected = np.zeros(n_bins, dtype=np.int64)
    for obj, flag in zip(objects, detected_flags):
        b = int(np.searchsorted(edges, obj.volume_ml, side="right")) - 1
        if b < 0:
            raise DataError(f"object volume {obj.volume_ml} below first bin edge")
        b = min(b, n_bins - 1)
        totals[b] += 1
        if flag:
            detected[b] += 1
    return totals, detected


def _atomic_writer(path):
    return f"{path}.tmp.{os.getpid()}"


def write_seg_reports_csv(path, reports: list[SegMetricReport]) -> None:
    tmp = _atomic_writer(path)
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "dsc", "rvd_percent", "hd95_mm"])
        for r in reports:
            writer.writerow([r.case_id, f"{r.dsc:.6f}", f"{r.rvd_percent:.6f}",
                             f"{r.hd95_mm:.6f}"])
    os.replace(tmp, path)


def write_detection_csv(path, results: list[CaseDetectionResult]) -> None:
    tmp = _atomic_writer(path)
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "threshold", "tpr", "fp_count", "n_truth"])
        for r in results:
            writer.writerow([r.case_id, f"{r.threshold:.2f}", f"{r.tpr:.6f}",
                             r.fp_count, r.n_truth])
    os.replace(tmp, path)


def write_froc_csv(path, curve: FrocCurve) -> None:
    tmp = _atomic_writer(path)
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "mean_tpr", "median_fpc", "total_fp"])
        for p in curve.points:
            writer.writerow([f"{p.threshold:.2f}", f"{p.mean_tpr:.6f}",
                             f"{p.median_fpc:.6f}", p.total_fp])
    os.replace(tmp, path)


def write_froc_svg(path, curves: dict[str, FrocCurve]) -> None:
    """Plot mean TPR against median FPC per threshold for one or more curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, curve in curves.items():
        fpc = [p.median_fpc for p in curve.points]
        tpr = [p.mean_tpr for p in curve.points]
        line, = ax.plot(fpc, tpr, marker=".", label=name)
        mid = next(p for p in curve.points if abs(p.threshold - 0.5) < 1e-9)
        ax.plot([mid.median_fpc], [mid.mean_tpr], marker="o", mfc="none",
                color=line.get_color())
    ax.set_xlabel("median false positives per case")
    ax.set_ylabel("mean true positive rate")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    tmp = _atomic_writer(path)
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    os.replace(tmp, path)
