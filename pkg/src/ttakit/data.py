"""Dataset ingestion, synthetic data generation, and the split protocol.

The binary dataset layout is CIFAR-style: 3073-byte records of one label
byte followed by 3072 pixel bytes (channel-planar R, G, B, each a row-major
32x32 plane), normalized to [0, 1] on load.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, SplitError
from .images import quantize_u8
from .seeds import mix

RECORD_BYTES = 3073
SIDE = 32


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    ids: np.ndarray  # (N,) int64, unique and stable

    def __post_init__(self) -> None:
        n = len(self.images)
        if not (len(self.labels) == len(self.ids) == n):
            raise ParameterError("images, labels and ids must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError("label outside [0, class_count)")
        if len(np.unique(self.ids)) != n:
            raise ParameterError("ids must be unique")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            self.images[indices], self.labels[indices], self.class_count, self.ids[indices]
        )

    def replace_images(self, new_images: np.ndarray) -> "LabeledDataset":
        return replace(self, images=new_images)


@dataclass(frozen=True)
class SplitSpec:
    loss_train_fraction: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.loss_train_fraction < 1.0:
            raise ParameterError(
                f"loss_train_fraction {self.loss_train_fraction} outside (0, 1)"
            )


def load_cifar_binary(path, class_count: int = 10) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}"
        )
    n = len(raw) // RECORD_BYTES
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if n and labels.max() >= class_count:
        raise FormatError(f"{path}: label {labels.max()} >= class_count {class_count}")
    planes = rec[:, 1:].reshape(n, 3, SIDE, SIDE)
    imgs = (planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
    return LabeledDataset(imgs, labels, class_count, np.arange(n, dtype=np.int64))


def save_cifar_binary(data: LabeledDataset, path) -> None:
    if data.images.shape[1:] != (SIDE, SIDE, 3):
        raise FormatError(
            f"binary layout is fixed at {SIDE}x{SIDE}x3, got {data.images.shape[1:]}"
        )
    q = quantize_u8(data.images)  # (N, H, W, C)
    planes = q.transpose(0, 3, 1, 2).reshape(len(data), 3 * SIDE * SIDE)
    rec = np.concatenate(
        [data.labels.astype(np.uint8)[:, None], planes], axis=1
    )
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _shape_mask(shape_idx: int, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = side / 2.0 + rng.uniform(-side / 8.0, side / 8.0)
    cx = side / 2.0 + rng.uniform(-side / 8.0, side / 8.0)
    r = rng.uniform(0.36, 0.47) * side
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    s = shape_idx % 10
    if s == 0:  # disk
        return dist <= r
    if s == 1:  # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r
    if s == 2:  # triangle, apex up
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.55 * (dy + r))
    if s == 3:  # plus
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
        )
    if s == 4:  # ring
        return (dist <= r) & (dist >= 0.55 * r)
    if s == 5:  # diamond
        return np.abs(dx) + np.abs(dy) <= r
    if s == 6:  # X cross
        return (dist <= r) & (
            (np.abs(dx - dy) <= 0.45 * r) | (np.abs(dx + dy) <= 0.45 * r)
        )
    if s == 7:  # horizontal bar
        return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
    if s == 8:  # vertical bar
        return (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)
    # four dots
    m = np.zeros((side, side), dtype=bool)
    for oy in (-0.55 * r, 0.55 * r):
        for ox in (-0.55 * r, 0.55 * r):
            m |= np.hypot(dy - oy, dx - ox) <= 0.38 * r
    return m


def _family_color(family: int, rng: np.random.Generator) -> np.ndarray:
    # Colors sit at the gamut edge so saturation-boosting transforms mostly
    # clip instead of adding class evidence.
    g = rng.uniform(0.0, 0.2)
    hot = rng.uniform(0.92, 1.0)
    cold = rng.uniform(0.0, 0.08)
    return np.array([hot, g, cold]) if family == 0 else np.array([cold, g, hot])


def gen_synthetic(n: int, class_count: int, side: int, seed: int) -> LabeledDataset:
    """Colored geometric shapes on textured backgrounds.

    Class = shape type x color family (warm/cool).  Deterministic given the
    seed; labels are class-balanced by construction (counts differ by at
    most one when ``n % class_count != 0``).
    """
    if n <= 0 or class_count <= 0 or side <= 0:
        raise ParameterError("n, class_count and side must be positive")
    families = 2 if class_count % 2 == 0 else 1
    imgs = np.empty((n, side, side, 3), dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % class_count
    for i in range(n):
        rng = np.random.default_rng(np.uint64(mix(seed, i)))
        cls = int(labels[i])
        shape_idx, family = cls // families, cls % families
        base = rng.uniform(0.30, 0.50, size=3)
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / max(side - 1, 1)
        gdir = rng.uniform(0.0, 2.0 * np.pi)
        ramp = (np.cos(gdir) * xx + np.sin(gdir) * yy) * rng.uniform(0.0, 0.2)
        img = base[None, None, :] + ramp[..., None]
        img += rng.normal(0.0, 0.02, size=img.shape)
        mask = _shape_mask(shape_idx, side, rng)
        color = _family_color(family, rng)
        img[mask] = color[None, :] + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3))
        # Speckle a few near-black and near-white texels: they pin the dynamic
        # range (so clean images already span [0, 1]) and give sharpening
        # something to amplify.
        n_dots = max(6, side * side // 64)
        for lo, hi in ((0.0, 0.08), (0.92, 1.0)):
            ys = rng.integers(0, side, size=n_dots)
            xs = rng.integers(0, side, size=n_dots)
            img[ys, xs, :] = rng.uniform(lo, hi, size=(n_dots, 1))
        imgs[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(imgs, labels, class_count, np.arange(n, dtype=np.int64))


# ---------------------------------------------------------------------------
# Split protocol
# ---------------------------------------------------------------------------

def split(data: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded, class-stratified partition into (loss_train, loss_valid)."""
    spec.validate()
    train_idx: list[np.ndarray] = []
    valid_idx: list[np.ndarray] = []
    for cls in range(data.class_count):
        members = np.flatnonzero(data.labels == cls)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise SplitError(f"class {cls} has {len(members)} sample(s); need >= 2")
        rng = np.random.default_rng(np.uint64(mix(spec.seed, cls)))
        perm = rng.permutation(len(members))
        k = int(round(spec.loss_train_fraction * len(members)))
        k = min(max(k, 1), len(members) - 1)
        train_idx.append(members[perm[:k]])
        valid_idx.append(members[perm[k:]])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(valid_idx))
    return data.subset(tr), data.subset(va)
