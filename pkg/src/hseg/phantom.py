"""Synthetic liver phantoms with ground truth, for desk-scale benchmarks.

Each case is a smooth ellipsoid-union "liver" in a darker abdomen, carrying a
bright vessel tube (a false-positive decoy: strong contrast enhancement but no
diffusion restriction) and a configurable number of spherical lesions. Lesion
cores wash out in the portal-venous phases and are hyperintense on the high
b-value diffusion channel; a 2-voxel rim enhances in the arterial phases. A
configurable fraction of lesions is nearly isointense on the contrast series
and visible mainly on diffusion, which is what makes the dual-input detector
outperform a contrast-only one on these phantoms.

All outputs are deterministic functions of the config seed. Corpus generation
derives one child seed per case from (seed, case index).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .postprocess import label_objects_26
from .preprocess import DEFAULT_PHASE_NAMES, PhaseGrouping, write_grouping
from .volume import BinaryMask, Volume, read_mask, read_volume, write_mask, write_volume

TISSUES = ("background", "parenchyma", "vessel", "lesion_core", "lesion_rim",
           "faint_core", "faint_rim")


def _default_dce_curves():
    return {
        "background": (0.30, 0.30, 0.31, 0.32, 0.32, 0.31),
        "parenchyma": (0.50, 0.56, 0.66, 0.80, 0.76, 0.70),
        "vessel": (0.48, 1.00, 1.10, 1.02, 0.92, 0.82),
        "lesion_core": (0.44, 0.50, 0.54, 0.46, 0.42, 0.40),
        "lesion_rim": (0.50, 0.92, 0.96, 0.72, 0.62, 0.55),
        "faint_core": (0.50, 0.57, 0.67, 0.79, 0.75, 0.71),
        "faint_rim": (0.50, 0.57, 0.67, 0.79, 0.75, 0.71),
    }


def _default_dw_curves():
    return {
        "background": (0.30, 0.26, 0.10),
        "parenchyma": (0.50, 0.44, 0.18),
        "vessel": (0.42, 0.34, 0.14),
        "lesion_core": (0.56, 0.52, 0.66),
        "lesion_rim": (0.56, 0.52, 0.66),
        "faint_core": (0.56, 0.52, 0.66),
        "faint_rim": (0.56, 0.52, 0.66),
    }


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (96, 96, 24)  # (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.543, 1.543, 2.0)
    lesion_count: tuple[int, int] = (2, 5)
    lesion_radius_mm: tuple[float, float] = (3.0, 7.0)
    rim_thickness_vox: float = 2.0
    faint_dce_fraction: float = 0.35
    vessel_radius_vox: float = 1.7
    noise_sigma: float = 0.03
    dce_curves: dict = field(default_factory=_default_dce_curves)
    dw_curves: dict = field(default_factory=_default_dw_curves)
    max_placement_attempts: int = 200

    def __post_init__(self):
        nx, ny, nz = self.dims
        if nx < 24 or ny < 24 or nz < 6:
            raise DataError(f"phantom grid {self.dims} too small")
        if self.lesion_radius_mm[0] < max(self.spacing):
            raise DataError("minimum lesion radius must span at least one voxel")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise DataError(f"bad lesion count range {self.lesion_count}")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be >= 0")
        for table, width in ((self.dce_curves, 6), (self.dw_curves, 3)):
            for tissue in TISSUES:
                if tissue not in table or len(table[tissue]) != width:
                    raise DataError(f"curve table needs {width} values for {tissue!r}")


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    dce: Volume
    dw: Volume
    liver: BinaryMask
    lesions: BinaryMask
    n_lesions: int


def _voxel_grids(dims):
    nx, ny, nz = dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return zz.astype(np.float64), yy.astype(np.float64), xx.astype(np.float64)


def _ellipsoid(zz, yy, xx, center, semi_axes):
    cz, cy, cx = center
    az, ay, ax = semi_axes
    return (((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2) <= 1.0


def _liver_region(cfg: PhantomConfig, rng, zz, yy, xx):
    nx, ny, nz = cfg.dims
    cz = nz / 2 + rng.uniform(-1.5, 1.5)
    cy = ny / 2 + rng.uniform(-3, 3)
    cx = nx / 2 + rng.uniform(-3, 3)
    ax = min(rng.uniform(0.30, 0.36) * nx, cx - 3, nx - 4 - cx)
    ay = min(rng.uniform(0.28, 0.34) * ny, cy - 3, ny - 4 - cy)
    az = min(rng.uniform(0.32, 0.42) * nz, cz - 1.5, nz - 2.5 - cz)
    region = _ellipsoid(zz, yy, xx, (cz, cy, cx), (az, ay, ax))
    for _ in range(2):
        oz = cz + rng.uniform(-0.2, 0.2) * az
        oy = cy + rng.uniform(-0.5, 0.5) * ay
        ox = cx + rng.uniform(-0.5, 0.5) * ax
        lobe_axes = (max(az * rng.uniform(0.5, 0.7), 1.5),
                     ay * rng.uniform(0.45, 0.65), ax * rng.uniform(0.45, 0.65))
        lobe = _ellipsoid(zz, yy, xx, (oz, oy, ox), lobe_axes)
        # clip lobes to the grid margin so the liver never touches the border
        region |= lobe
    region[:1, :, :] = region[-1:, :, :] = False
    region[:, :2, :] = region[:, -2:, :] = False
    region[:, :, :2] = region[:, :, -2:] = False
    return region, (cz, cy, cx)


def _vessel_region(cfg: PhantomConfig, rng, zz, yy, xx, liver, center):
    theta = rng.uniform(0, 2 * np.pi)
    direction = np.array([rng.uniform(-0.3, 0.3), np.sin(theta), np.cos(theta)])
    direction /= np.linalg.norm(direction)
    p0 = np.array(center) + rng.uniform(-2, 2, size=3)
    rel = np.stack([zz - p0[0], yy - p0[1], xx - p0[2]], axis=-1)
    along = rel @ direction
    perp = rel - along[..., None] * direction
    dist = np.linalg.norm(perp, axis=-1)
    return (dist <= cfg.vessel_radius_vox) & liver


def _place_lesions(cfg: PhantomConfig, rng, zz, yy, xx, liver, vessel):
    """Sample non-overlapping spheres fully inside the liver, away from the vessel."""
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    n_target = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    gap_mm = 2.0 * max(cfg.spacing)
    liver_idx = np.argwhere(liver)
    placed = []  # (center_zyx, radius_mm, faint)
    spheres = []
    for _ in range(n_target):
        ok = False
        for _attempt in range(cfg.max_placement_attempts):
            r_mm = float(rng.uniform(*cfg.lesion_radius_mm))
            cz, cy, cx = liver_idx[rng.integers(len(liver_idx))]
            dist_mm = np.sqrt(((zz - cz) * sz) ** 2 + ((yy - cy) * sy) ** 2
                              + ((xx - cx) * sx) ** 2)
            sphere = dist_mm <= r_mm
            if not sphere.any() or not (sphere <= liver).all():
                continue
            if (sphere & vessel).any():
                continue
            conflict = False
            for (pz, py, px), pr, _f in placed:
                d = np.sqrt(((cz - pz) * sz) ** 2 + ((cy - py) * sy) ** 2
                            + ((cx - px) * sx) ** 2)
                if d < r_mm + pr + gap_mm:
                    conflict = True
                    break
            if conflict:
                continue
            faint = bool(rng.random() < cfg.faint_dce_fraction)
            placed.append(((cz, cy, cx), r_mm, faint))
            spheres.append((sphere, dist_mm, r_mm, faint))
            ok = True
            break
        if not ok:
            raise DataError(
                f"could not place lesion {len(placed) + 1}/{n_target} after "
                f"{cfg.max_placement_attempts} attempts")
    return spheres


def generate_phantom(cfg: PhantomConfig):
    """Build one case: (dce 6ch, dw 3ch, liver mask, lesion mask)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    nx, ny, nz = cfg.dims
    zz, yy, xx = _voxel_grids(cfg.dims)

    liver, center = _liver_region(cfg, rng, zz, yy, xx)
    vessel = _vessel_region(cfg, rng, zz, yy, xx, liver, center)
    spheres = _place_lesions(cfg, rng, zz, yy, xx, liver, vessel)

    tissue = np.zeros((nz, ny, nx), dtype=np.int8)
    tissue[liver] = TISSUES.index("parenchyma")
    tissue[vessel] = TISSUES.index("vessel")
    lesion_mask = np.zeros((nz, ny, nx), dtype=bool)
    rim_mm = cfg.rim_thickness_vox * cfg.spacing[0]
    for sphere, dist_mm, r_mm, faint in spheres:
        core = dist_mm <= max(r_mm - rim_mm, 0.0)
        rim = sphere & ~core
        tissue[core] = TISSUES.index("faint_core" if faint else "lesion_core")
        tissue[rim] = TISSUES.index("faint_rim" if faint else "lesion_rim")
        lesion_mask |= sphere

    dce_table = np.array([cfg.dce_curves[t] for t in TISSUES], dtype=np.float32)
    dw_table = np.array([cfg.dw_curves[t] for t in TISSUES], dtype=np.float32)
    dce = np.moveaxis(dce_table[tissue], -1, 0)  # (6, nz, ny, nx)
    dw = np.moveaxis(dw_table[tissue], -1, 0)
    if cfg.noise_sigma > 0:
        dce = dce + cfg.noise_sigma * rng.standard_normal(dce.shape, dtype=np.float32)
        dw = dw + cfg.noise_sigma * rng.standard_normal(dw.shape, dtype=np.float32)

    dce_v = Volume(dims=cfg.dims, channels=6, spacing=cfg.spacing,
                   data=np.ascontiguousarray(dce, dtype=np.float32))
    dw_v = Volume(dims=cfg.dims, channels=3, spacing=cfg.spacing,
                  data=np.ascontiguousarray(dw, dtype=np.float32))
    liver_m = BinaryMask(dims=cfg.dims, spacing=cfg.spacing,
                         data=liver.astype(np.uint8))
    lesions_m = BinaryMask(dims=cfg.dims, spacing=cfg.spacing,
                           data=lesion_mask.astype(np.uint8))
    return dce_v, dw_v, liver_m, lesions_m


def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(index,)).generate_state(1)[0])


def generate_corpus(out_dir, n_cases: int, cfg: PhantomConfig, seed: int,
                    split_counts: dict[str, int] | None = None) -> list[dict]:
    """Write ``n_cases`` phantom cases plus a manifest under ``out_dir``.

    ``split_counts`` maps split name to case count in manifest order; the
    default is a 70/10/20 train/val/test split.
    """
    if split_counts is None:
        n_test = max(1, round(0.2 * n_cases))
        n_val = max(1, round(0.1 * n_cases)) if n_cases >= 5 else 0
        split_counts = {"train": n_cases - n_val - n_test, "val": n_val, "test": n_test}
    if sum(split_counts.values()) != n_cases:
        raise DataError(f"splits {split_counts} do not sum to {n_cases}")
    splits = [name for name, k in split_counts.items() for _ in range(k)]

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(n_cases):
        case_cfg = replace(cfg, seed=case_seed(seed, i))
        dce, dw, liver, lesions = generate_phantom(case_cfg)
        case_id = f"case_{i:03d}"
        case_dir = os.path.join(out_dir, case_id)
        os.makedirs(case_dir, exist_ok=True)
        write_volume(os.path.join(case_dir, "dce.hvol"), dce)
        write_volume(os.path.join(case_dir, "dw.hvol"), dw)
        write_mask(os.path.join(case_dir, "liver.hvol"), liver)
        write_mask(os.path.join(case_dir, "lesions.hvol"), lesions)
        write_grouping(os.path.join(case_dir, "grouping.txt"),
                       PhaseGrouping.identity(6, DEFAULT_PHASE_NAMES))
        n_lesions = len(label_objects_26(lesions))
        rows.append({"case_id": case_id, "split": splits[i], "n_lesions": n_lesions})

    manifest = os.path.join(out_dir, "manifest.tsv")
    tmp = f"{manifest}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["case_id", "split", "n_lesions"],
                                delimiter="\t")
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, manifest)
    return rows


def read_manifest(corpus_dir) -> list[dict]:
    manifest = os.path.join(corpus_dir, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.tsv under {corpus_dir}")
    with open(manifest, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def load_case(corpus_dir, case_id: str) -> PhantomCase:
    case_dir = os.path.join(corpus_dir, case_id)
    dce = read_volume(os.path.join(case_dir, "dce.hvol"))
    dw = read_volume(os.path.join(case_dir, "dw.hvol"))
    liver = read_mask(os.path.join(case_dir, "liver.hvol"))
    lesions = read_mask(os.path.join(case_dir, "lesions.hvol"))
    return PhantomCase(case_id=case_id, dce=dce, dw=dw, liver=liver,
                       lesions=lesions, n_lesions=len(label_objects_26(lesions)))


def load_split(corpus_dir, split: str) -> list[PhantomCase]:
    rows = [r for r in read_manifest(corpus_dir) if r["split"] == split]
    return [load_case(corpus_dir, r["case_id"]) for r in rows]
