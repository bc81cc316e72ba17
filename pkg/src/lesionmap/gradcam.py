"""Gradient-weighted class activation maps and their rendering.

The localisation map for class c is built in three steps: backpropagate the
pre-sigmoid class logit to the designated convolutional feature maps, average
those gradients over space to get one importance weight per map, then ReLU
the importance-weighted sum of the maps. Upsampling, normalization, and the
blue-green-red colormap turn that coarse map into an overlay image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .imaging import Image, resample_bilinear, round_half_away
from .model import ModelGraph

DEFAULT_BLEND = 0.4


@dataclass
class Heatmap:
    """A normalized localisation map in [0,1] tied to the class it explains."""

    values: np.ndarray
    source_class: int = -1

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def feature_gradients(model: ModelGraph, x: Tensor, c: int) -> Tensor:
    """d(logit_c) / d(feature maps), with dropout in inference mode.

    The class target is the pre-sigmoid logit so gradients stay informative
    even when the sigmoid saturates.
    """
    if not 0 <= c < model.num_classes:
        raise ValueError(f"class index {c} out of range for {model.num_classes} classes")
    run = model.forward(x, train_mode=False)
    seed = np.zeros(model.num_classes)
    seed[c] = 1.0
    grads = ad.backward(run.tape, Tensor(seed), output=run.logits)
    return Tensor(grads[run.features])


def neuron_importance(grads: Tensor) -> Tensor:
    """Spatial mean of each gradient map: one importance weight per feature map."""
    return ad.global_avg_pool(grads)


def gradcam_map(alpha: Tensor, features: Tensor) -> Tensor:
    """ReLU of the importance-weighted sum of feature maps."""
    if features.data.ndim != 3 or alpha.shape != (features.shape[0],):
        raise DimensionError(
            f"alpha {alpha.shape} does not match feature maps {features.shape}"
        )
    combined = np.tensordot(alpha.data, features.data, axes=1)
    return Tensor(np.maximum(combined, 0.0))


def upsample_and_normalize(
    map2d: Tensor, out_h: int, out_w: int, source_class: int = -1
) -> Heatmap:
    """Bilinearly upsample to image resolution and min-max normalize to [0,1].

    A constant map (all-zero included) normalizes to all-zero: no evidence,
    no highlight.
    """
    if map2d.data.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got {map2d.shape}")
    if out_h < map2d.shape[0] or out_w < map2d.shape[1]:
        raise DimensionError(
            f"target {out_h}x{out_w} smaller than map {map2d.shape[0]}x{map2d.shape[1]}"
        )
    up = resample_bilinear(map2d.data, out_h, out_w)
    lo, hi = float(up.min()), float(up.max())
    if hi - lo == 0.0:
        values = np.zeros((out_h, out_w))
    else:
        values = (up - lo) / (hi - lo)
    return Heatmap(values=values, source_class=source_class)


def compute_heatmap(model: ModelGraph, x: Tensor, c: int, out_h: int, out_w: int) -> Heatmap:
    """Full pipeline: gradients -> importance weights -> map -> heatmap."""
    run = model.forward(x, train_mode=False)
    grads = feature_gradients(model, x, c)
    alpha = neuron_importance(grads)
    raw = gradcam_map(alpha, run.features)
    return upsample_and_normalize(raw, out_h, out_w, source_class=c)


# ---------------------------------------------------------------------------
# rendering


def heatmap_colors(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear colormap: blue at 0, green at 0.5, red at 1 (float RGB)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    lower = v <= 0.5
    t_low = v * 2.0
    t_high = (v - 0.5) * 2.0
    r = np.where(lower, 0.0, 255.0 * t_high)
    g = np.where(lower, 255.0 * t_low, 255.0 * (1.0 - t_high))
    b = np.where(lower, 255.0 * (1.0 - t_low), 0.0)
    return np.stack([r, g, b], axis=-1)


def overlay(img: Image, hm: Heatmap, blend: float = DEFAULT_BLEND) -> Image:
    """Blend the colormapped heatmap onto the image: (1-blend)*img + blend*color."""
    if (hm.height, hm.width) != (img.height, img.width):
        raise DimensionError(
            f"heatmap {hm.height}x{hm.width} does not match image {img.height}x{img.width}"
        )
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {blend}")
    rgb = img.pixels.astype(np.float64)
    if img.channels == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    colors = heatmap_colors(hm.values)
    mixed = (1.0 - blend) * rgb + blend * colors
    return Image(np.clip(round_half_away(mixed), 0, 255).astype(np.uint8))


def heatmap_to_image(hm: Heatmap) -> Image:
    """Render the raw normalized map as an 8-bit grayscale image."""
    return Image(round_half_away(hm.values * 255.0).astype(np.uint8)[:, :, None])
