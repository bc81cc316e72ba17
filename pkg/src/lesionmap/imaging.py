"""Raster images and the preprocessing ops applied before classification.

Pixels are 8-bit, stored row-major with interleaved channels (H, W, C).
All ops are deterministic and pure; the fixed rounding rule everywhere is
round-half-away-from-zero so golden outputs are bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves going away from zero."""
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


class Image:
    """An 8-bit raster with 1 (grayscale) or 3 (RGB) interleaved channels."""

    __slots__ = ("pixels", "source")

    def __init__(self, pixels: np.ndarray, source: str | None = None):
        arr = np.asarray(pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"expected (H,W) or (H,W,C) with C in {{1,3}}, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"image dimensions must be positive, got {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("pixel values outside [0, 255]")
            arr = arr.astype(np.uint8)
        self.pixels = np.ascontiguousarray(arr)
        self.source = source

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width}x{self.channels})"


@dataclass
class Histogram:
    """256 intensity counts plus their total."""

    bins: np.ndarray
    total: int


def luma_channel(img: Image) -> np.ndarray:
    """Integer-rounded Rec.601 luma for color images, the sole channel otherwise."""
    if img.channels == 1:
        return img.pixels[:, :, 0].copy()
    p = img.pixels.astype(np.float64)
    y = 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]
    return round_half_away(y).astype(np.uint8)


def intensity_histogram(img: Image) -> Histogram:
    """256-bin histogram over the luma channel (color) or sole channel (gray)."""
    counts = np.bincount(luma_channel(img).ravel(), minlength=256)
    return Histogram(bins=counts.astype(np.int64), total=int(counts.sum()))


def chi_square_to_uniform(hist: Histogram) -> float:
    """Chi-square distance between a histogram and the uniform one of equal mass."""
    expected = hist.total / 256.0
    return float(np.sum((hist.bins - expected) ** 2 / expected))


# ---------------------------------------------------------------------------
# CLAHE


def equalize_mapping(hist: np.ndarray, clip_factor: float) -> np.ndarray:
    """Intensity mapping for one tile: clip, redistribute excess, scale the CDF.

    Bins are clipped at ceil(clip_factor * N / 256); the clipped excess is
    spread uniformly in a single pass, with the integer remainder going to
    the lowest-index bins. The mapping is m(v) = round(255 * CDF(v) / N).
    """
    hist = np.asarray(hist, dtype=np.int64)
    n = int(hist.sum())
    if n == 0:
        raise ValueError("cannot equalize an empty histogram")
    limit = math.ceil(clip_factor * n / 256.0)
    clipped = np.minimum(hist, limit)
    excess = n - int(clipped.sum())
    clipped = clipped + excess // 256
    remainder = excess % 256
    if remainder:
        clipped[:remainder] += 1
    cdf = np.cumsum(clipped)
    return round_half_away(255.0 * cdf / n).astype(np.uint8)


def _tile_bounds(extent: int, tiles: int) -> np.ndarray:
    """Boundaries of `tiles` contiguous bands covering [0, extent)."""
    return np.array([(i * extent) // tiles for i in range(tiles + 1)], dtype=np.int64)


def _interp_coords(extent: int, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bracketing tile indices and blend weight for every pixel coordinate."""
    coords = np.arange(extent, dtype=np.float64)
    if len(centers) == 1:
        zeros = np.zeros(extent, dtype=np.int64)
        return zeros, zeros, np.zeros(extent)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, len(centers) - 2)
    hi = lo + 1
    weight = (coords - centers[lo]) / (centers[hi] - centers[lo])
    return lo, hi, np.clip(weight, 0.0, 1.0)


def clahe(img: Image, tiles: tuple[int, int] = (8, 8), clip_factor: float = 2.0) -> Image:
    """Contrast-limited adaptive histogram equalization.

    Color images are enhanced on the luma channel with per-pixel chroma
    offsets preserved. Each tile gets its own clipped-equalization mapping
    (see :func:`equalize_mapping`); every output pixel bilinearly blends the
    mappings of the four surrounding tile centers, clamping at the edges.
    """
    t_r, t_c = tiles
    if t_r < 1 or t_c < 1:
        raise ValueError(f"tile grid must be at least 1x1, got {tiles}")
    if img.height < t_r or img.width < t_c:
        raise DimensionError(
            f"tile grid {t_r}x{t_c} larger than image {img.height}x{img.width}"
        )
    if clip_factor < 1.0:
        raise ValueError(f"clip_factor must be >= 1, got {clip_factor}")

    y = luma_channel(img)
    row_bounds = _tile_bounds(img.height, t_r)
    col_bounds = _tile_bounds(img.width, t_c)

    mappings = np.empty((t_r, t_c, 256), dtype=np.float64)
    for r in range(t_r):
        for c in range(t_c):
            tile = y[row_bounds[r] : row_bounds[r + 1], col_bounds[c] : col_bounds[c + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            mappings[r, c] = equalize_mapping(hist, clip_factor)

    row_centers = (row_bounds[:-1] + row_bounds[1:] - 1) / 2.0
    col_centers = (col_bounds[:-1] + col_bounds[1:] - 1) / 2.0
    r0, r1, wy = _interp_coords(img.height, row_centers)
    c0, c1, wx = _interp_coords(img.width, col_centers)

    m00 = mappings[r0[:, None], c0[None, :], y]
    m01 = mappings[r0[:, None], c1[None, :], y]
    m10 = mappings[r1[:, None], c0[None, :], y]
    m11 = mappings[r1[:, None], c1[None, :], y]
    top = m00 * (1.0 - wx)[None, :] + m01 * wx[None, :]
    bottom = m10 * (1.0 - wx)[None, :] + m11 * wx[None, :]
    blended = top * (1.0 - wy)[:, None] + bottom * wy[:, None]
    y_out = round_half_away(blended)

    if img.channels == 1:
        return Image(np.clip(y_out, 0, 255).astype(np.uint8)[:, :, None])
    delta = img.pixels.astype(np.int64) - y[:, :, None].astype(np.int64)
    out = np.clip(delta + y_out[:, :, None].astype(np.int64), 0, 255)
    return Image(out.astype(np.uint8))


# ---------------------------------------------------------------------------
# geometry


def _source_coords(out_extent: int, in_extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source positions, split into floor index and fraction."""
    scale = in_extent / out_extent
    src = (np.arange(out_extent, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_extent - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_extent - 1)
    return lo, hi, src - lo


def resample_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a float (H, W) or (H, W, C) array (no rounding)."""
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[:, :, None]
    h, w = values.shape[:2]
    y0, y1, fy = _source_coords(out_h, h)
    x0, x1, fx = _source_coords(out_w, w)
    top = values[y0][:, x0] * (1 - fx)[None, :, None] + values[y0][:, x1] * fx[None, :, None]
    bot = values[y1][:, x0] * (1 - fx)[None, :, None] + values[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[:, :, 0] if squeeze else out


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize with half-pixel centers; blends are rounded half away from zero."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    resampled = resample_bilinear(img.pixels.astype(np.float64), out_h, out_w)
    return Image(np.clip(round_half_away(resampled), 0, 255).astype(np.uint8))


def flip(img: Image, axis: str) -> Image:
    """Mirror the pixel grid: 'horizontal' swaps left/right, 'vertical' top/bottom."""
    if axis == HORIZONTAL:
        return Image(img.pixels[:, ::-1].copy())
    if axis == VERTICAL:
        return Image(img.pixels[::-1].copy())
    raise ValueError(f"axis must be '{HORIZONTAL}' or '{VERTICAL}', got {axis!r}")


def normalize(
    img: Image,
    mean: float | Sequence[float] = 0.5,
    std: float | Sequence[float] = 0.5,
) -> Tensor:
    """Scale pixels to [0,1], shift/scale per channel, emit a (C, H, W) tensor."""
    c = img.channels
    mean_arr = np.broadcast_to(np.asarray(mean, dtype=np.float64), (c,))
    std_arr = np.broadcast_to(np.asarray(std, dtype=np.float64), (c,))
    if np.any(std_arr <= 0):
        raise ValueError(f"std must be positive per channel, got {std_arr}")
    planes = img.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
    return Tensor((planes - mean_arr[:, None, None]) / std_arr[:, None, None])
