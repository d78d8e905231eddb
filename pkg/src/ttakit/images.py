"""Float images and the discretized test-time transform space.

An image is a ``(H, W, C)`` float32 numpy array with values in ``[0, 1]`` and
``C`` in ``{1, 3}``.  Every operation here is a pure function: it validates
its parameters, never mutates its input, and clamps its output back into
``[0, 1]``.

Geometric operations (rotate, zoom, resize) resample with the Catmull-Rom
bicubic kernel (a = -0.5) and fill out-of-frame taps by mirror reflection
without repeating the border pixel, i.e. they sample the infinitely
reflect-padded image.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

Image = np.ndarray  # (H, W, C) float32 in [0, 1]

# Fraction of the short side kept by the Crop transform and by small-image
# crop ensembles (side 32 -> crop 28).
CROP_RATIO = 0.875

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_SHARPNESS_KERNEL = np.array(
    [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]], dtype=np.float64
) / 13.0


def validate_image(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise DimensionError(f"image must be a (H, W, C) array, got {getattr(img, 'shape', None)}")
    if img.shape[2] not in (1, 3):
        raise DimensionError(f"channel count must be 1 or 3, got {img.shape[2]}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"empty image {img.shape}")


def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom kernel (bicubic with a = -0.5); weights sum to 1."""
    at = np.abs(t)
    near = 1.5 * at ** 3 - 2.5 * at ** 2 + 1.0
    far = -0.5 * (at ** 3 - 5.0 * at ** 2 + 8.0 * at - 4.0)
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror index into [0, n-1] without repeating the border pixel."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _sample_bicubic_batch(imgs: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample (N, H, W, C) images at fractional coords; returns (N, P, C).

    ``sy``/``sx`` are flat float64 arrays of length P shared by every image
    in the batch.
    """
    n_img, h, w, _ = imgs.shape
    by = np.floor(sy).astype(np.int64)
    bx = np.floor(sx).astype(np.int64)
    fy = sy - by
    fx = sx - bx
    out = None
    for dy in (-1, 0, 1, 2):
        wy = _catmull_rom(fy - dy)
        iy = _reflect_index(by + dy, h)
        for dx in (-1, 0, 1, 2):
            wx = _catmull_rom(fx - dx)
            ix = _reflect_index(bx + dx, w)
            wgt = (wy * wx)[None, :, None]
            tap = imgs[:, iy, ix, :]
            out = tap * wgt if out is None else out + tap * wgt
    return out


def _warp_batch(imgs: np.ndarray, sy: np.ndarray, sx: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    sampled = _sample_bicubic_batch(imgs, sy.ravel(), sx.ravel())
    n_img, _, c = sampled.shape
    return _clamp(sampled.reshape(n_img, out_h, out_w, c))


def _rotate_grid(h: int, w: int, degrees: float) -> tuple[np.ndarray, np.ndarray]:
    rad = np.deg2rad(degrees)
    cos, sin = np.cos(rad), np.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sy = cy + cos * dy + sin * dx
    sx = cx - sin * dy + cos * dx
    return sy, sx


def _zoom_grid(h: int, w: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = cy + (yy - cy) / scale
    sx = cx + (xx - cx) / scale
    return sy, sx


def _resize_grid(h: int, w: int, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    # Center-aligned: output pixel centers map to (i + 0.5) * scale - 0.5.
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    return np.repeat(sy, out_w), np.tile(sx, out_h)


def resize_bicubic(img: Image, out_h: int, out_w: int) -> Image:
    """Bicubic (Catmull-Rom) resize to ``(out_h, out_w)``."""
    return resize_bicubic_batch(img[None], out_h, out_w)[0]


def resize_bicubic_batch(imgs: np.ndarray, out_h: int | None = None, out_w: int | None = None) -> np.ndarray:
    h, w = imgs.shape[1:3]
    out_h = h if out_h is None else out_h
    out_w = w if out_w is None else out_w
    if (out_h, out_w) == (h, w):
        return imgs.astype(np.float32, copy=True)
    sy, sx = _resize_grid(h, w, out_h, out_w)
    return _warp_batch(imgs, sy, sx, out_h, out_w)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

class TransformKind(enum.Enum):
    IDENTITY = "identity"
    ROTATE = "rotate"
    ZOOM = "zoom"
    COLOR = "color"
    AUTOCONTRAST = "autocontrast"
    SHARPNESS = "sharpness"
    HFLIP = "hflip"
    CROP = "crop"


@dataclass(frozen=True)
class Transform:
    """One candidate test-time operation.

    ``param`` is degrees for ROTATE, a scale factor for ZOOM, a blend factor
    for COLOR/SHARPNESS, a corner index 0-4 for CROP (0 center, 1 top-left,
    2 top-right, 3 bottom-left, 4 bottom-right), and unused otherwise.
    """

    kind: TransformKind
    param: float = 0.0

    def validate(self) -> None:
        k, p = self.kind, self.param
        if k is TransformKind.ROTATE and not -180.0 <= p <= 180.0:
            raise ParameterError(f"rotation degrees {p} outside [-180, 180]")
        if k is TransformKind.ZOOM and not p > 0.0:
            raise ParameterError(f"zoom factor {p} must be > 0")
        if k in (TransformKind.COLOR, TransformKind.SHARPNESS) and not p >= 0.0:
            raise ParameterError(f"{k.value} factor {p} must be >= 0")
        if k is TransformKind.CROP and (p != int(p) or not 0 <= int(p) <= 4):
            raise ParameterError(f"crop corner index {p} must be an integer in 0..4")

    def label(self) -> str:
        if self.kind in (TransformKind.IDENTITY, TransformKind.AUTOCONTRAST, TransformKind.HFLIP):
            return self.kind.value
        return f"{self.kind.value}{self.param:g}"


@dataclass(frozen=True)
class TransformSpace:
    """Ordered candidate set; index order is part of the contract."""

    transforms: tuple[Transform, ...]

    def __post_init__(self) -> None:
        ids = [t for t in self.transforms if t.kind is TransformKind.IDENTITY]
        if len(ids) != 1:
            raise ParameterError(f"space must contain exactly one identity, found {len(ids)}")
        seen = set()
        for t in self.transforms:
            t.validate()
            key = (t.kind, t.param)
            if key in seen:
                raise ParameterError(f"duplicate transform {t.label()}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, i: int) -> Transform:
        return self.transforms[i]

    def labels(self) -> list[str]:
        return [t.label() for t in self.transforms]

    def identity_index(self) -> int:
        return next(i for i, t in enumerate(self.transforms) if t.kind is TransformKind.IDENTITY)

    def fingerprint(self) -> str:
        text = ";".join(f"{t.kind.value}:{t.param!r}" for t in self.transforms)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_space() -> TransformSpace:
    """The 12-operation default space; identity is last (index 11)."""
    return TransformSpace(
        (
            Transform(TransformKind.ROTATE, -20.0),
            Transform(TransformKind.ROTATE, 20.0),
            Transform(TransformKind.ZOOM, 0.8),
            Transform(TransformKind.ZOOM, 1.2),
            Transform(TransformKind.COLOR, 0.5),
            Transform(TransformKind.COLOR, 1.5),
            Transform(TransformKind.AUTOCONTRAST),
            Transform(TransformKind.SHARPNESS, 0.2),
            Transform(TransformKind.SHARPNESS, 0.5),
            Transform(TransformKind.SHARPNESS, 3.0),
            Transform(TransformKind.SHARPNESS, 4.0),
            Transform(TransformKind.IDENTITY),
        )
    )


def _luminance(imgs: np.ndarray) -> np.ndarray:
    if imgs.shape[3] == 1:
        return imgs.astype(np.float64, copy=True)
    return (imgs.astype(np.float64) @ _LUMA)[..., None]


def _smooth_batch(imgs: np.ndarray) -> np.ndarray:
    """3x3 weighted-average smoothing; edge pixels copied unsmoothed."""
    out = imgs.astype(np.float64, copy=True)
    h, w = imgs.shape[1:3]
    if h >= 3 and w >= 3:
        win = np.lib.stride_tricks.sliding_window_view(imgs, (3, 3), axis=(1, 2))
        out[:, 1:-1, 1:-1, :] = np.einsum("nhwcij,ij->nhwc", win, _SHARPNESS_KERNEL)
    return out


def _autocontrast_batch(imgs: np.ndarray) -> np.ndarray:
    x = imgs.astype(np.float64)
    mn = x.min(axis=(1, 2), keepdims=True)
    mx = x.max(axis=(1, 2), keepdims=True)
    span = mx - mn
    flat = span <= 0.0
    safe = np.where(flat, 1.0, span)
    return np.where(flat, x, (x - mn) / safe)


def _crop_box(h: int, w: int, side: int, corner: int) -> tuple[int, int]:
    if corner == 0:
        return (h - side) // 2, (w - side) // 2
    if corner == 1:
        return 0, 0
    if corner == 2:
        return 0, w - side
    if corner == 3:
        return h - side, 0
    return h - side, w - side


def batch_apply_transform(imgs: np.ndarray, t: Transform) -> np.ndarray:
    """Apply one transform to a stack of same-shape images ``(N, H, W, C)``."""
    t.validate()
    if imgs.ndim != 4:
        raise DimensionError(f"expected (N, H, W, C) stack, got {imgs.shape}")
    h, w = imgs.shape[1:3]
    k = t.kind
    if k is TransformKind.IDENTITY:
        return imgs.copy()
    if k is TransformKind.HFLIP:
        return imgs[:, :, ::-1, :].copy()
    if k is TransformKind.ROTATE:
        sy, sx = _rotate_grid(h, w, t.param)
        return _warp_batch(imgs, sy, sx, h, w)
    if k is TransformKind.ZOOM:
        sy, sx = _zoom_grid(h, w, t.param)
        return _warp_batch(imgs, sy, sx, h, w)
    if k is TransformKind.COLOR:
        gray = _luminance(imgs)
        return _clamp(gray + t.param * (imgs - gray))
    if k is TransformKind.AUTOCONTRAST:
        return _clamp(_autocontrast_batch(imgs))
    if k is TransformKind.SHARPNESS:
        smooth = _smooth_batch(imgs)
        return _clamp(smooth + t.param * (imgs - smooth))
    if k is TransformKind.CROP:
        side = int(round(CROP_RATIO * min(h, w)))
        if side < 1 or side > min(h, w):
            raise DimensionError(f"crop side {side} invalid for {h}x{w} image")
        top, left = _crop_box(h, w, side, int(t.param))
        return imgs[:, top:top + side, left:left + side, :].copy()
    raise ParameterError(f"unknown transform kind {k}")


def apply_transform(img: Image, t: Transform) -> Image:
    """Apply one transform to a single image; identity is bit-exact."""
    validate_image(img)
    return batch_apply_transform(img[None], t)[0]


def hflip(img: Image) -> Image:
    return img[:, ::-1, :].copy()


# ---------------------------------------------------------------------------
# Crop ensembles
# ---------------------------------------------------------------------------

def crop_set(img: Image, n: int, resize_to: int, crop_to: int) -> list[Image]:
    """Center + 4 corner crops (n=5), plus their horizontal flips (n=10).

    The image is first resized so its short side equals ``resize_to``
    (aspect preserved, bicubic), then ``crop_to``-sided crops are taken.
    """
    validate_image(img)
    if n not in (5, 10):
        raise ParameterError(f"crop count must be 5 or 10, got {n}")
    if not 0 < crop_to <= resize_to:
        raise ParameterError(f"need resize_to >= crop_to > 0, got {resize_to}, {crop_to}")
    h, w = img.shape[:2]
    if h <= w:
        nh, nw = resize_to, max(resize_to, int(round(w * resize_to / h)))
    else:
        nh, nw = max(resize_to, int(round(h * resize_to / w))), resize_to
    resized = resize_bicubic_batch(img[None], nh, nw)[0]
    if crop_to > min(nh, nw):
        raise DimensionError(f"crop {crop_to} exceeds resized size {nh}x{nw}")
    crops = []
    for corner in range(5):
        top, left = _crop_box(nh, nw, crop_to, corner)
        crops.append(resized[top:top + crop_to, left:left + crop_to, :].copy())
    if n == 10:
        crops.extend(hflip(c) for c in list(crops))
    return crops


# ---------------------------------------------------------------------------
# PPM I/O
# ---------------------------------------------------------------------------

def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Linear 8-bit quantization with round-half-up."""
    return np.clip(np.floor(img.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(img: Image, path) -> None:
    """Write binary PPM (P6, maxval 255); 1-channel images are expanded to RGB."""
    validate_image(img)
    data = quantize_u8(img)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> Image:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    # Strip comments, then take magic / width / height / maxval tokens.
    header_end = 2
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(raw):
        m = re.match(rb"(?:\s+|\s*#[^\n]*\n)*(\d+)", raw[pos:])
        if m is None:
            raise FormatError(f"{path}: malformed PPM header")
        tokens.append(m.group(1))
        pos += m.end()
    if raw[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError(f"{path}: malformed PPM header")
    pos += 1
    header_end = pos
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    body = raw[header_end:header_end + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)
