"""Severity-graded image corruptions for building corrupted evaluation sets.

Each kind has a 5-entry parameter table, monotone in distortion strength.
``apply_corruption`` is a pure function of ``(img, spec)``: all randomness
comes from the spec's seed, so datasets are reproducible across runs,
machines and worker counts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images
from .errors import ParameterError, StorageError
from .images import Image, Transform, TransformKind
from .seeds import mix


class CorruptionKind(enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    ZOOM_BLUR = "zoom_blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    PIXELATE = "pixelate"
    SPECKLE_NOISE = "speckle_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    SATURATE = "saturate"


# Stable integer tag per kind, used in seed derivation; never reorder.
KIND_IDS = {kind: i for i, kind in enumerate(CorruptionKind)}

SEVERITIES = (1, 2, 3, 4, 5)

# Parameter per severity 1..5; strictly increasing distortion strength.
SEVERITY_TABLE: dict[CorruptionKind, tuple[float, ...]] = {
    CorruptionKind.GAUSSIAN_NOISE: (0.04, 0.06, 0.08, 0.10, 0.14),   # additive std
    CorruptionKind.SHOT_NOISE: (60.0, 25.0, 12.0, 5.0, 3.0),         # photon rate
    CorruptionKind.IMPULSE_NOISE: (0.01, 0.02, 0.05, 0.08, 0.12),    # replaced fraction
    CorruptionKind.DEFOCUS_BLUR: (1.0, 1.5, 2.0, 2.5, 3.0),          # disk radius
    CorruptionKind.MOTION_BLUR: (3.0, 5.0, 7.0, 9.0, 11.0),          # line length
    CorruptionKind.ZOOM_BLUR: (1.06, 1.11, 1.16, 1.21, 1.26),        # max zoom
    CorruptionKind.CONTRAST: (0.75, 0.60, 0.45, 0.30, 0.20),         # scale about mean
    CorruptionKind.BRIGHTNESS: (0.05, 0.10, 0.15, 0.20, 0.30),       # additive shift
    CorruptionKind.PIXELATE: (2.0, 3.0, 4.0, 5.0, 6.0),              # block factor
    CorruptionKind.SPECKLE_NOISE: (0.06, 0.10, 0.15, 0.20, 0.30),    # multiplicative std
    CorruptionKind.GAUSSIAN_BLUR: (0.4, 0.6, 0.8, 1.0, 1.5),         # gaussian std
    CorruptionKind.SATURATE: (1.3, 1.7, 2.1, 2.6, 3.2),              # color blend factor
}


def corruption_sets() -> tuple[list[CorruptionKind], list[CorruptionKind]]:
    """Predictor-training corruption kinds and held-out validation kinds."""
    training = [
        CorruptionKind.GAUSSIAN_NOISE,
        CorruptionKind.SHOT_NOISE,
        CorruptionKind.IMPULSE_NOISE,
        CorruptionKind.DEFOCUS_BLUR,
        CorruptionKind.MOTION_BLUR,
        CorruptionKind.ZOOM_BLUR,
        CorruptionKind.CONTRAST,
        CorruptionKind.BRIGHTNESS,
        CorruptionKind.PIXELATE,
    ]
    held_out = [
        CorruptionKind.SPECKLE_NOISE,
        CorruptionKind.GAUSSIAN_BLUR,
        CorruptionKind.SATURATE,
    ]
    return training, held_out


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int
    seed: int = 0

    def validate(self) -> None:
        if self.severity not in SEVERITIES:
            raise ParameterError(f"severity {self.severity} outside 1..5")

    def param(self) -> float:
        self.validate()
        return SEVERITY_TABLE[self.kind][self.severity - 1]


# ---------------------------------------------------------------------------
# Kernels (explicit-parameter forms; apply_corruption dispatches via table)
# ---------------------------------------------------------------------------

def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(np.float32, copy=False)


def gaussian_noise(img: Image, sigma: float, rng: np.random.Generator) -> Image:
    if sigma == 0.0:
        return img.copy()
    return _clamp(img + rng.normal(0.0, sigma, img.shape))


def shot_noise(img: Image, rate: float, rng: np.random.Generator) -> Image:
    return _clamp(rng.poisson(img.astype(np.float64) * rate) / rate)


def impulse_noise(img: Image, fraction: float, rng: np.random.Generator) -> Image:
    if fraction == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    hit = rng.random((h, w)) < fraction
    salt = rng.random((h, w)) < 0.5
    out = img.copy()
    out[hit] = np.where(salt[hit, None], np.float32(1.0), np.float32(0.0))
    return out


def _convolve2d_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(img, ((py, py), (px, px), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    return np.einsum("hwcij,ij->hwc", win, kernel)


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    mask = (yy * yy + xx * xx) <= radius * radius
    return mask.astype(np.float64) / mask.sum()


def defocus_blur(img: Image, radius: float) -> Image:
    return _clamp(_convolve2d_reflect(img, _disk_kernel(radius)))


def _line_kernel(length: float, angle: float) -> np.ndarray:
    # Bilinear splat of `length` unit-spaced points along the angle.
    n = max(int(round(length)), 1)
    half = (n - 1) / 2.0
    size = 2 * int(np.ceil(half)) + 1
    kernel = np.zeros((size, size), dtype=np.float64)
    c = size // 2
    for t in np.arange(n, dtype=np.float64) - half:
        y = c + t * np.sin(angle)
        x = c + t * np.cos(angle)
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    kernel[yy, xx] += wy * wx
    return kernel / kernel.sum()


def motion_blur(img: Image, length: float, rng: np.random.Generator) -> Image:
    angle = rng.uniform(0.0, np.pi)
    return _clamp(_convolve2d_reflect(img, _line_kernel(length, angle)))


def zoom_blur(img: Image, max_zoom: float) -> Image:
    steps = int(round((max_zoom - 1.0) / 0.01)) + 1
    scales = 1.0 + 0.01 * np.arange(steps)
    acc = np.zeros(img.shape, dtype=np.float64)
    for s in scales:
        if s == 1.0:
            acc += img
        else:
            acc += images.batch_apply_transform(img[None], Transform(TransformKind.ZOOM, float(s)))[0]
    return _clamp(acc / len(scales))


def contrast(img: Image, factor: float) -> Image:
    mean = float(img.mean())
    return _clamp(mean + factor * (img.astype(np.float64) - mean))


def brightness(img: Image, shift: float) -> Image:
    return _clamp(img.astype(np.float64) + shift)


def pixelate(img: Image, block: int) -> Image:
    if block == 1:
        return img.copy()
    h, w = img.shape[:2]
    ih = np.minimum(np.arange(h) // block * block + block // 2, h - 1)
    iw = np.minimum(np.arange(w) // block * block + block // 2, w - 1)
    return img[ih][:, iw].copy()


def speckle_noise(img: Image, sigma: float, rng: np.random.Generator) -> Image:
    if sigma == 0.0:
        return img.copy()
    return _clamp(img + img * rng.normal(0.0, sigma, img.shape))


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = max(int(np.ceil(3.0 * sigma)), 1)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    k = _gaussian_kernel1d(sigma)
    out = _convolve2d_reflect(img, k[:, None])
    out = _convolve2d_reflect(out.astype(np.float32), k[None, :])
    return _clamp(out)


def saturate(img: Image, factor: float) -> Image:
    return images.apply_transform(img, Transform(TransformKind.COLOR, factor))


def apply_corruption(img: Image, spec: CorruptionSpec) -> Image:
    """Deterministic severity-graded corruption; same shape, clamped output."""
    images.validate_image(img)
    p = spec.param()
    rng = np.random.default_rng(np.uint64(spec.seed & (2**64 - 1)))
    k = spec.kind
    if k is CorruptionKind.GAUSSIAN_NOISE:
        return gaussian_noise(img, p, rng)
    if k is CorruptionKind.SHOT_NOISE:
        return shot_noise(img, p, rng)
    if k is CorruptionKind.IMPULSE_NOISE:
        return impulse_noise(img, p, rng)
    if k is CorruptionKind.DEFOCUS_BLUR:
        return defocus_blur(img, p)
    if k is CorruptionKind.MOTION_BLUR:
        return motion_blur(img, p, rng)
    if k is CorruptionKind.ZOOM_BLUR:
        return zoom_blur(img, p)
    if k is CorruptionKind.CONTRAST:
        return contrast(img, p)
    if k is CorruptionKind.BRIGHTNESS:
        return brightness(img, p)
    if k is CorruptionKind.PIXELATE:
        return pixelate(img, int(p))
    if k is CorruptionKind.SPECKLE_NOISE:
        return speckle_noise(img, p, rng)
    if k is CorruptionKind.GAUSSIAN_BLUR:
        return gaussian_blur(img, p)
    if k is CorruptionKind.SATURATE:
        return saturate(img, p)
    raise ParameterError(f"unknown corruption kind {k}")


def image_seed(dataset_seed: int, image_id: int, kind: CorruptionKind, severity: int) -> int:
    """Documented per-image seed: mix(dataset seed, image id, kind tag, severity)."""
    return mix(dataset_seed, image_id, KIND_IDS[kind], severity)


def state_image(img: Image, kind_value: str | None, severity: int, seed: int) -> Image:
    """Rebuild a perturbed state from its descriptor; clean passes through."""
    if kind_value is None:
        return img
    return apply_corruption(img, CorruptionSpec(CorruptionKind(kind_value), severity, seed))


# ---------------------------------------------------------------------------
# Dataset materialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: CorruptionKind
    severity: int
    image_id: int


MANIFEST_NAME = "manifest.tsv"


def corrupt_dataset(data, specs: list[CorruptionSpec], out_dir) -> list[ManifestEntry]:
    """Materialize one corrupted dataset file per (kind, severity) spec.

    Per-image seeds derive from (spec seed, image id, kind, severity), so
    outputs are byte-identical across reruns.  Returns the manifest entries,
    which are also written to ``out_dir/manifest.tsv`` as
    ``path<TAB>kind<TAB>severity<TAB>image_index`` lines.
    """
    from .data import save_cifar_binary  # local import to avoid a cycle

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        entries: list[ManifestEntry] = []
        for spec in specs:
            spec.validate()
            name = f"{spec.kind.value}_s{spec.severity}.bin"
            corrupted = data.replace_images(
                np.stack(
                    [
                        apply_corruption(
                            data.images[i],
                            CorruptionSpec(
                                spec.kind,
                                spec.severity,
                                image_seed(spec.seed, int(data.ids[i]), spec.kind, spec.severity),
                            ),
                        )
                        for i in range(len(data.ids))
                    ]
                )
                if len(data.ids)
                else data.images
            )
            save_cifar_binary(corrupted, out_dir / name)
            entries.extend(
                ManifestEntry(name, spec.kind, spec.severity, int(i)) for i in data.ids
            )
        with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
            for e in entries:
                f.write(f"{e.path}\t{e.kind.value}\t{e.severity}\t{e.image_id}\n")
        return entries
    except OSError as exc:
        raise StorageError(f"failed to materialize corrupted dataset: {exc}") from exc


def load_manifest(out_dir) -> list[ManifestEntry]:
    path = Path(out_dir) / MANIFEST_NAME
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        name, kind, severity, image_id = line.split("\t")
        entries.append(ManifestEntry(name, CorruptionKind(kind), int(severity), int(image_id)))
    return entries
