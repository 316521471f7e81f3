"""Image containers, cropping, bicubic resampling and patch sampling.

Conventions
-----------
* Pixel data is stored as a float ndarray of shape ``(height, width,
  channels)`` with channels 1 (gray) or 3 (RGB), nominal range [0, 1].
  Values outside the range are permitted until a pipeline stage clamps.
* 8-bit PNG I/O converts with ``value / 255`` on read and
  round-half-up on write.
* Bicubic resampling uses the Catmull-Rom kernel (a = -0.5) with
  source coordinates clamped at the borders, and the half-pixel center
  alignment ``src = (dst + 0.5) * scale - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as _PILImage

from .errors import BoundsError, SizeError
from .rng import Rng


@dataclass(frozen=True, eq=False)
class Rect:
    """Axis-aligned pixel rectangle: top-left corner plus size."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise SizeError(f"rect must have positive size, got {self.w}x{self.h}")

    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def contains(self, other: "Rect") -> bool:
        return (
            other.x >= self.x
            and other.y >= self.y
            and other.x + other.w <= self.x + self.w
            and other.y + other.h <= self.y + self.h
        )

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True, eq=False)
class ImageF:
    """Planar floating-point image.

    `data` has shape (height, width, channels); treat it as immutable
    after construction so images can be shared across workers.
    """

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise SizeError(f"image data must be 3-d (h, w, c), got shape {d.shape}")
        if d.shape[2] not in (1, 3):
            raise SizeError(f"channels must be 1 or 3, got {d.shape[2]}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise SizeError(f"image must be at least 1x1, got shape {d.shape}")
        if not np.issubdtype(d.dtype, np.floating):
            raise SizeError(f"image data must be floating point, got {d.dtype}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def rect(self) -> Rect:
        return Rect(0, 0, self.width, self.height)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageF":
        """Wrap a (h, w) or (h, w, c) float array, copying only if needed."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        return cls(np.ascontiguousarray(a))

    @classmethod
    def full(cls, w: int, h: int, value: float, channels: int = 1) -> "ImageF":
        return cls(np.full((h, w, channels), value, dtype=np.float64))

    def plane(self, i: int) -> np.ndarray:
        return self.data[:, :, i]

    def luma(self) -> np.ndarray:
        """Single-channel view/copy; color is reduced with Rec. 709 weights."""
        if self.channels == 1:
            return self.data[:, :, 0]
        w = np.array([0.2126, 0.7152, 0.0722], dtype=self.data.dtype)
        return self.data @ w

    def gray(self) -> "ImageF":
        return ImageF.from_array(self.luma())


def crop(img: ImageF, r: Rect) -> ImageF:
    """Copy of the `r` sub-window of `img`; raises BoundsError if outside."""
    if not img.rect.contains(r):
        raise BoundsError(f"rect {r.as_tuple()} outside image {img.width}x{img.height}")
    sy, sx = r.slices()
    return ImageF(img.data[sy, sx, :].copy())


# Catmull-Rom coefficients for fractional offset t in [0, 1): weights for
# samples at relative positions -1, 0, 1, 2.
def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,), dtype=np.float64)
    w[..., 0] = -0.5 * t3 + t2 - 0.5 * t
    w[..., 1] = 1.5 * t3 - 2.5 * t2 + 1.0
    w[..., 2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w[..., 3] = 0.5 * t3 - 0.5 * t2
    return w


def _resample_axis(data: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    """Catmull-Rom resample of one axis with border clamping."""
    old_len = data.shape[axis]
    scale = old_len / new_len
    src = (np.arange(new_len) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    w = _catmull_rom_weights(t)  # (new_len, 4)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    np.clip(idx, 0, old_len - 1, out=idx)

    moved = np.moveaxis(data, axis, 0)
    gathered = moved[idx.ravel()].reshape(new_len, 4, *moved.shape[1:])
    out = np.einsum("nk,nk...->n...", w, gathered)
    return np.moveaxis(out, 0, axis)


def resize_bicubic(img: ImageF, new_w: int, new_h: int) -> ImageF:
    """Bicubic (Catmull-Rom) resize to `new_w` x `new_h`."""
    if new_w < 1 or new_h < 1:
        raise SizeError(f"target size must be >= 1, got {new_w}x{new_h}")
    out = img.data.astype(np.float64, copy=False)
    if new_h != img.height:
        out = _resample_axis(out, new_h, axis=0)
    if new_w != img.width:
        out = _resample_axis(out, new_w, axis=1)
    return ImageF(np.ascontiguousarray(out))


def resize_bicubic_array(arr: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """2-d array variant of :func:`resize_bicubic` (used for score maps)."""
    out = arr.astype(np.float64, copy=False)
    if new_h != arr.shape[0]:
        out = _resample_axis(out, new_h, axis=0)
    if new_w != arr.shape[1]:
        out = _resample_axis(out, new_w, axis=1)
    return out


def patch_positions(region: Rect, patch: int, count: int, rng: Rng) -> np.ndarray:
    """`count` uniform top-left corners for `patch`-sized crops in `region`.

    Positions are drawn with replacement; returns an (count, 2) array of
    (x, y) pairs.  Deterministic given `rng`.
    """
    if patch > region.w or patch > region.h:
        raise SizeError(
            f"patch {patch} larger than region {region.w}x{region.h}"
        )
    xs = rng.integers(region.x, region.x + region.w - patch + 1, size=count)
    ys = rng.integers(region.y, region.y + region.h - patch + 1, size=count)
    return np.stack([xs, ys], axis=1)


def sample_patches(img: ImageF, region: Rect, patch: int, count: int, rng: Rng):
    """`count` random `patch`-sized crops from `region` of `img`."""
    if not img.rect.contains(region):
        raise BoundsError(
            f"region {region.as_tuple()} outside image {img.width}x{img.height}"
        )
    pos = patch_positions(region, patch, count, rng)
    return [crop(img, Rect(int(x), int(y), patch, patch)) for x, y in pos]


def to_u8(img: ImageF) -> np.ndarray:
    """Quantize to uint8 with round-half-up after clamping to [0, 1]."""
    v = np.clip(img.data, 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_png(img: ImageF, path) -> None:
    u8 = to_u8(img)
    if img.channels == 1:
        _PILImage.fromarray(u8[:, :, 0], mode="L").save(path, format="PNG")
    else:
        _PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_png(path) -> ImageF:
    with _PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageF.from_array(arr)


def write_raw(img: ImageF, path) -> None:
    """Lossless dump: NPY file, little-endian float64, C order."""
    np.save(path, img.data.astype("<f8"), allow_pickle=False)


def read_raw(path) -> ImageF:
    arr = np.load(path, allow_pickle=False)
    return ImageF.from_array(arr)
