"""Training harnesses for the liver segmenter and the lesion detector.

Liver training: whole slices (all z positions of every training case, liver
present or not), overlap loss on the softmax foreground, Glorot init, Adam
lr 0.001, no augmentation. Detection training: slices restricted to those
containing lesions, one patch per batch item centered on a uniformly drawn
liver pixel, rotation augmentation within +/-45 degrees, frequency-derived
class weights, He init, Adam lr 0.0001.

Both loops sample iteration-wise (no epochs), consume a single seeded rng
stream in a fixed order, and are bit-reproducible in single-worker mode.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DataError, EmptyLiverSliceError, TrainingDivergedError, UsageError
from .nets import Network, build_network
from .nn import functional as F
from .nn.optim import Adam
from .phantom import PhantomCase
from .preprocess import normalize_zmuv
from .volume import Volume

DETECT_VARIANTS = ("dual", "single6", "single9")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 4
    lr: float = 0.0001
    seed: int = 0
    loss: str = "wce"  # "dice" | "wce"
    patch_size: int = 128
    patches_per_slice: int = 25
    rotation_deg: float = 45.0
    lesion_slices_only: bool = True
    val_every: int = 500

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise UsageError("iterations, batch size, and patch size must be >= 1")
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise UsageError(f"rotation range {self.rotation_deg} outside [0, 180]")
        if self.loss not in ("dice", "wce"):
            raise UsageError(f"unknown loss {self.loss!r}")


def liver_defaults() -> TrainConfig:
    return TrainConfig(iterations=100000, batch_size=6, lr=0.001, loss="dice",
                       lesion_slices_only=False, rotation_deg=0.0)


def detect_defaults() -> TrainConfig:
    return TrainConfig(iterations=10000, batch_size=4, lr=0.0001, loss="wce",
                       patch_size=128, lesion_slices_only=True, rotation_deg=45.0)


def parse_config_file(path) -> dict:
    """key=value lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: malformed config line {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def apply_config(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    coerced = {}
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, value in overrides.items():
        if key not in by_name:
            raise UsageError(f"unknown config key {key!r}")
        kind = by_name[key].type
        if kind == "int":
            coerced[key] = int(value)
        elif kind == "float":
            coerced[key] = float(value)
        elif kind == "bool":
            coerced[key] = str(value).lower() in ("1", "true", "yes")
        else:
            coerced[key] = value
    return replace(cfg, **coerced)


# -- patch sampling and augmentation -----------------------------------------


def extract_patches(image, label, liver, n: int = 25, size: int = 128, rng=None):
    """Sample ``n`` aligned (image, label) patches from one slice.

    Each patch is centered on a uniformly drawn liver pixel, with the window
    clamped inside the (zero-padded, if the slice is smaller than ``size``)
    slice bounds. Raises EmptyLiverSliceError when the slice has no liver.
    """
    if rng is None:
        raise UsageError("extract_patches needs an rng")
    h, w = label.shape
    if image.shape[:2] != (h, w) or liver.shape != (h, w):
        raise DataError("image, label, and liver slice shapes must agree")
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        label = np.pad(label, ((0, ph), (0, pw)))
        liver = np.pad(liver, ((0, ph), (0, pw)))
        h, w = label.shape
    centers = np.argwhere(liver != 0)
    if centers.size == 0:
        raise EmptyLiverSliceError("no liver pixels on slice")
    half = size // 2
    out = []
    for _ in range(n):
        cy, cx = centers[rng.integers(len(centers))]
        top = int(np.clip(cy - half, 0, h - size))
        left = int(np.clip(cx - half, 0, w - size))
        out.append((image[top:top + size, left:left + size],
                    label[top:top + size, left:left + size]))
    return out


def rotate_pair(image, label, angle_deg: float):
    """Rotate a patch pair about its center: bilinear for image channels,
    nearest-neighbor for the label, zeros outside the source."""
    h, w = label.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx

    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = (src_y - y0).astype(np.float32)
    fx = (src_x - x0).astype(np.float32)

    def gather(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid[..., None], vals, 0.0).astype(np.float32)

    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    img_out = (gather(y0, x0) * w00 + gather(y0, x0 + 1) * w01
               + gather(y0 + 1, x0) * w10 + gather(y0 + 1, x0 + 1) * w11)

    ry = np.rint(src_y).astype(np.int64)
    rx = np.rint(src_x).astype(np.int64)
    lab_valid = (ry >= 0) & (ry < h) & (rx >= 0) & (rx < w)
    lab_out = np.where(lab_valid, label[np.clip(ry, 0, h - 1), np.clip(rx, 0, w - 1)], 0)
    return img_out, lab_out.astype(label.dtype)


def augment_rotate(image, label, rng, max_deg: float = 45.0):
    angle = float(rng.uniform(-max_deg, max_deg))
    return rotate_pair(image, label, angle)


def class_weights(label_arrays) -> tuple[float, float]:
    """Inverse-frequency weights N_total / (2 * N_class) over all label pixels."""
    n_fg = 0
    n_total = 0
    for arr in label_arrays:
        n_fg += int(np.count_nonzero(arr))
        n_total += arr.size
    n_bg = n_total - n_fg
    if n_bg == 0 or n_fg == 0:
        raise DataError("both classes must appear in the training labels")
    return n_total / (2.0 * n_bg), n_total / (2.0 * n_fg)


# -- case preparation ---------------------------------------------------------


@dataclass
class SliceStack:
    """One case ready for training: x (nz, ny, nx, C), labels/liver (nz, ny, nx)."""

    case_id: str
    x: np.ndarray
    labels: np.ndarray
    liver: np.ndarray
    eligible_z: list[int] = field(default_factory=list)


def liver_input_volume(dce: Volume) -> Volume:
    return normalize_zmuv(dce)


def detect_input_volume(dce: Volume, dw: Volume, variant: str) -> Volume:
    """Normalized network input for a detection variant.

    The contrast series and the diffusion series are normalized independently;
    ``dual``/``single9`` stack them into nine channels, ``single6`` uses the
    contrast series alone.
    """
    if variant not in DETECT_VARIANTS:
        raise UsageError(f"unknown detection variant {variant!r}")
    ndce = normalize_zmuv(dce)
    if variant == "single6":
        return ndce
    if dce.dims != dw.dims:
        raise DataError(f"contrast grid {dce.dims} != diffusion grid {dw.dims}")
    ndw = normalize_zmuv(dw)
    data = np.concatenate([ndce.data, ndw.data], axis=0)
    return Volume(dims=dce.dims, channels=9, spacing=dce.spacing, data=data)


def _to_slice_stack(case_id, vol: Volume, labels, liver, lesion_slices_only: bool) -> SliceStack:
    x = np.ascontiguousarray(np.moveaxis(vol.data, 0, -1))
    nz = x.shape[0]
    if lesion_slices_only:
        eligible = [z for z in range(nz) if labels[z].any() and liver[z].any()]
    else:
        eligible = list(range(nz))
    return SliceStack(case_id=case_id, x=x, labels=labels, liver=liver,
                      eligible_z=eligible)


def prepare_liver_cases(cases: list[PhantomCase]) -> list[SliceStack]:
    return [_to_slice_stack(c.case_id, liver_input_volume(c.dce),
                            c.liver.data, c.liver.data, lesion_slices_only=False)
            for c in cases]


def prepare_detect_cases(cases: list[PhantomCase], variant: str) -> list[SliceStack]:
    return [_to_slice_stack(c.case_id, detect_input_volume(c.dce, c.dw, variant),
                            c.lesions.data, c.liver.data, lesion_slices_only=True)
            for c in cases]


# -- training loops -----------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[tuple[int, float]] = field(default_factory=list)
    batch_shapes: list[tuple[int, ...]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        val = dict(self.val_loss)
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "val_loss"])
            for i, loss in enumerate(self.train_loss, start=1):
                writer.writerow([i, f"{loss:.6f}",
                                 f"{val[i]:.6f}" if i in val else ""])
        os.replace(tmp, path)


def _diagnose(net: Network) -> str:
    norms = []
    for i, layer in enumerate(net.layers_flat()):
        for name, arr in layer.parameters():
            norms.append(f"layer{i}.{name}|{float(np.linalg.norm(arr)):.3e}")
    return " ".join(norms[:12])


def _check_finite(loss: float, it: int, net: Network):
    if not np.isfinite(loss):
        raise TrainingDivergedError(it, _diagnose(net))


def _dice_batch_loss(net: Network, x, labels, training, rng):
    probs = net.forward(x, training=training, rng=rng)
    loss, dfg = F.dice_loss(probs[..., 1], labels.astype(np.float32))
    dprobs = np.zeros_like(probs)
    dprobs[..., 1] = dfg
    return probs, loss, dprobs


def _wce_batch_loss(net: Network, x, labels, weights, training, rng):
    probs = net.forward(x, training=training, rng=rng)
    loss, dprobs = F.weighted_cross_entropy(probs, labels, weights)
    return probs, loss, dprobs


def train_liver(train_cases: list[SliceStack], cfg: TrainConfig,
                val_cases: list[SliceStack] | None = None):
    """Train the liver net on whole slices. Returns (net, adam, history)."""
    if not train_cases:
        raise DataError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    net = build_network("liver")
    net.initialize(rng, "glorot")
    adam = Adam(cfg.lr)
    params = net.parameters()
    history = TrainHistory()

    pool = [(ci, z) for ci, c in enumerate(train_cases) for z in range(c.x.shape[0])]
    for it in range(1, cfg.iterations + 1):
        picks = rng.integers(len(pool), size=cfg.batch_size)
        x = np.stack([train_cases[pool[k][0]].x[pool[k][1]] for k in picks])
        labels = np.stack([train_cases[pool[k][0]].labels[pool[k][1]] for k in picks])
        _, loss, dprobs = _dice_batch_loss(net, x, labels, True, rng)
        _check_finite(loss, it, net)
        net.backward(dprobs)
        adam.step(params, net.gradients())
        history.train_loss.append(loss)
        if it == 1:
            history.batch_shapes.append(x.shape)
        if val_cases and cfg.val_every and it % cfg.val_every == 0:
            history.val_loss.append((it, _liver_val_loss(net, val_cases, cfg.batch_size)))
    return net, adam, history


def _liver_val_loss(net: Network, cases: list[SliceStack], batch: int) -> float:
    losses = []
    for c in cases:
        for z0 in range(0, c.x.shape[0], batch):
            x = c.x[z0:z0 + batch]
            labels = c.labels[z0:z0 + batch]
            probs = net.forward(x, training=False)
            loss, _ = F.dice_loss(probs[..., 1], labels.astype(np.float32))
            losses.append(loss)
    return float(np.mean(losses))


def train_detect(train_cases: list[SliceStack], cfg: TrainConfig, variant: str,
                 val_cases: list[SliceStack] | None = None):
    """Train a detection variant on rotated liver-centered patches.

    Returns (net, adam, history, class weights).
    """
    if variant not in DETECT_VARIANTS:
        raise UsageError(f"unknown detection variant {variant!r}")
    if not train_cases:
        raise DataError("empty training set")
    pool = [(ci, z) for ci, c in enumerate(train_cases) for z in c.eligible_z]
    if not pool:
        raise DataError("no lesion-containing slices in the training set")
    weights = class_weights([train_cases[ci].labels[z] for ci, z in pool])

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    net = build_network(variant)
    net.initialize(rng, "he")
    adam = Adam(cfg.lr)
    params = net.parameters()
    history = TrainHistory()

    for it in range(1, cfg.iterations + 1):
        xs, ls = [], []
        while len(xs) < cfg.batch_size:
            ci, z = pool[int(rng.integers(len(pool)))]
            case = train_cases[ci]
            try:
                (img, lab), = extract_patches(case.x[z], case.labels[z], case.liver[z],
                                              n=1, size=cfg.patch_size, rng=rng)
            except EmptyLiverSliceError:
                continue
            if cfg.rotation_deg > 0:
                img, lab = augment_rotate(img, lab, rng, max_deg=cfg.rotation_deg)
            xs.append(img)
            ls.append(lab)
        x = np.stack(xs)
        labels = np.stack(ls).astype(np.int64)
        _, loss, dprobs = _wce_batch_loss(net, x, labels, weights, True, rng)
        _check_finite(loss, it, net)
        net.backward(dprobs)
        adam.step(params, net.gradients())
        history.train_loss.append(loss)
        if it == 1:
            history.batch_shapes.append(x.shape)
        if val_cases and cfg.val_every and it % cfg.val_every == 0:
            history.val_loss.append((it, _detect_val_loss(net, val_cases, weights,
                                                          cfg.batch_size)))
    return net, adam, history, weights


def _detect_val_loss(net: Network, cases: list[SliceStack], weights, batch: int) -> float:
    losses = []
    for c in cases:
        zs = c.eligible_z
        for k0 in range(0, len(zs), batch):
            zblock = zs[k0:k0 + batch]
            x = np.stack([c.x[z] for z in zblock])
            labels = np.stack([c.labels[z] for z in zblock]).astype(np.int64)
            probs = net.forward(x, training=False)
            loss, _ = F.weighted_cross_entropy(probs, labels, weights)
            losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")
