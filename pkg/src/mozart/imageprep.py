"""Backbone input preprocessing and affine augmentation on in-memory rasters.

Images are ``float64`` arrays of shape ``(height, width, channels)`` with raw
pixel values in ``[0, 255]``; ``channels`` is 1 or 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

# canonical ImageNet per-channel means, blue-green-red
IMAGENET_BGR_MEANS = (103.939, 116.779, 123.68)


def as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise InvalidArgument(f"image must be (H, W), (H, W, 1) or (H, W, 3); got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidArgument("image has zero size")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("image contains non-finite values")
    return a


def read_png(path) -> np.ndarray:
    """8-bit grayscale or RGB PNG -> float image, raw values unchanged."""
    from PIL import Image

    with Image.open(Path(path)) as im:
        if im.mode not in ("L", "RGB"):
            raise InvalidArgument(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit L or RGB)")
        return as_image(np.asarray(im, dtype=np.uint8).astype(np.float64))


def write_png(img, path) -> None:
    from PIL import Image

    a = as_image(img)
    if a.min() < 0 or a.max() > 255 or not np.all(a == np.round(a)):
        raise InvalidArgument("PNG export needs integer values in [0, 255]")
    a = a.astype(np.uint8)
    Image.fromarray(a[:, :, 0] if a.shape[2] == 1 else a).save(Path(path), format="PNG")


@dataclass(frozen=True)
class PreprocessMode:
    """``scale`` maps [0, 255] to [-1, 1]; ``mean_subtract`` reorders RGB to BGR and subtracts ``means``."""

    kind: str
    means: tuple = IMAGENET_BGR_MEANS

    def __post_init__(self):
        if self.kind not in ("scale", "mean_subtract"):
            raise InvalidArgument(f"unknown preprocessing mode {self.kind!r}")
        if self.kind == "mean_subtract" and len(self.means) != 3:
            raise InvalidArgument("mean_subtract needs three channel means")


SCALE_TO_PLUS_MINUS_ONE = PreprocessMode("scale")
MEAN_SUBTRACT = PreprocessMode("mean_subtract")

# per-backbone choice
BACKBONE_PREPROCESSING = {
    "InceptionV3": SCALE_TO_PLUS_MINUS_ONE,
    "Xception": SCALE_TO_PLUS_MINUS_ONE,
    "ResNet50": MEAN_SUBTRACT,
}


def preprocess(img, mode: PreprocessMode) -> np.ndarray:
    a = as_image(img)
    if a.min() < 0.0 or a.max() > 255.0:
        raise InvalidArgument("pixel values must lie in [0, 255]")
    if mode.kind == "scale":
        return a / 127.5 - 1.0
    if a.shape[2] != 3:
        raise InvalidArgument("mean subtraction needs a 3-channel RGB image")
    return a[:, :, ::-1] - np.asarray(mode.means, dtype=np.float64)


@dataclass(frozen=True)
class AugmentParams:
    shear_factor: float = 0.1
    zoom_fraction: float = 0.1
    rotation_degrees: float = 10.0
    horizontal_flip: bool = True

    def __post_init__(self):
        if not 0.0 <= self.zoom_fraction < 1.0:
            raise InvalidArgument("zoom_fraction must be in [0, 1)")
        if self.rotation_degrees < 0 or self.shear_factor < 0:
            raise InvalidArgument("rotation and shear ranges must be non-negative")


IDENTITY_AUGMENT = AugmentParams(0.0, 0.0, 0.0, False)


def _bilinear(a, sx, sy, edge):
    """Sample ``a`` at fractional (column, row) coordinates.

    ``edge='zero'`` treats outside pixels as 0, ``edge='clamp'`` replicates the border.
    """
    h, w, _ = a.shape
    if edge == "clamp":
        sx = np.clip(sx, 0.0, w - 1.0)
        sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    def tap(dy, dx):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        return np.where(inside[..., None], a[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)

    # lerp form is exact on constant patches and at integer sample positions
    top = tap(0, 0)
    top = top + fx * (tap(0, 1) - top)
    bottom = tap(1, 0)
    bottom = bottom + fx * (tap(1, 1) - bottom)
    out = top + fy * (bottom - top)
    return out


def affine_transform(img, shear=0.0, zoom=1.0, rotation_degrees=0.0, flip=False) -> np.ndarray:
    """Rotate(shear(zoom(.))) about the image centre, then optionally mirror left-right.

    Coordinates are (x = column, y = row, pointing down). Shear maps
    ``x -> x + shear * y``; zoom > 1 magnifies; positive angles turn the
    picture counter-clockwise as displayed. Bilinear resampling, zero fill.
    """
    a = as_image(img)
    if not zoom > 0:
        raise InvalidArgument("zoom must be positive")
    h, w, _ = a.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(rotation_degrees)
    c, s = math.cos(th), math.sin(th)
    # inverse of R(th) @ Shear @ Zoom, composed factor by factor
    r_inv = np.array([[c, -s], [s, c]])
    shear_inv = np.array([[1.0, -shear], [0.0, 1.0]])
    inv = (shear_inv @ r_inv) / zoom
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy
    out = _bilinear(a, sx, sy, "zero")
    if flip:
        out = out[:, ::-1, :].copy()
    return out


def augment(img, params: AugmentParams, rng) -> np.ndarray:
    """Random shear, zoom, rotation and flip drawn from ``params``' ranges.

    Always consumes four draws from ``rng`` so streams stay aligned.
    """
    shear = rng.uniform(-params.shear_factor, params.shear_factor)
    zoom = rng.uniform(1.0 - params.zoom_fraction, 1.0 + params.zoom_fraction)
    angle = rng.uniform(-params.rotation_degrees, params.rotation_degrees)
    flip = bool(rng.random() < 0.5) and params.horizontal_flip
    return affine_transform(img, shear, zoom, angle, flip)


def resize(img, h, w) -> np.ndarray:
    """Bilinear resize with half-pixel centres and replicated borders."""
    a = as_image(img)
    if isinstance(h, bool) or isinstance(w, bool) or int(h) != h or int(w) != w or h < 1 or w < 1:
        raise InvalidArgument("target size must be positive integers")
    h, w = int(h), int(w)
    src_h, src_w, _ = a.shape
    ys = (np.arange(h) + 0.5) * (src_h / h) - 0.5
    xs = (np.arange(w) + 0.5) * (src_w / w) - 0.5
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear(a, sx, sy, "clamp")
