"""Boxes, regions, box noise and the grid transforms used for consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .domain import TRANSFORM_KINDS, BoxAnnotation, RegionPartition

INVERTIBLE_KINDS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")
_INVERSE = {"identity": "identity", "rot90": "rot270", "rot180": "rot180",
            "rot270": "rot90", "hflip": "hflip", "vflip": "vflip"}


def box_from_mask(mask) -> BoxAnnotation:
    """Tightest box around the foreground of ``mask``.

    A box with zero extent along an axis (e.g. a single pixel) is grown by one
    pixel towards the high side, or the low side when it touches the border.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("no foreground in mask")
    h, w = mask.shape
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    x0, x1 = _grow_degenerate(x0, x1, w)
    y0, y1 = _grow_degenerate(y0, y1, h)
    return BoxAnnotation(x0, y0, x1, y1)


def _grow_degenerate(lo, hi, size):
    if lo == hi:
        if hi < size - 1:
            hi += 1
        elif lo > 0:
            lo -= 1
        else:
            raise ValueError("cannot form a box on an axis of length 1")
    return lo, hi


def box_mask(box: BoxAnnotation, height: int, width: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=np.uint8)
    m[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1
    return m


def region_partition(box: BoxAnnotation, height: int, width: int) -> RegionPartition:
    box.check_fits(height, width)
    inside = box_mask(box, height, width)
    return RegionPartition(inside=inside, outside=1 - inside, inside_area=box.area)


def perturb_box(box: BoxAnnotation, noise_low: float, noise_high: float,
                rng: np.random.Generator, height: int, width: int) -> BoxAnnotation:
    """Displace each side of ``box`` independently, inwards or outwards.

    Displacement magnitudes are drawn uniformly from
    ``[noise_low * L, noise_high * L]`` with ``L = sqrt(height * width)`` and
    rounded to whole pixels. The result is clipped to the image and repaired
    so that it stays a valid box.
    """
    if not 0 <= noise_low <= noise_high:
        raise ValueError("need 0 <= noise_low <= noise_high")
    box.check_fits(height, width)
    scale = math.sqrt(height * width)
    mags = np.rint(rng.uniform(noise_low * scale, noise_high * scale, size=4)).astype(int)
    signs = rng.choice((-1, 1), size=4)  # +1 moves the side outwards
    x0 = box.x_min - signs[0] * mags[0]
    y0 = box.y_min - signs[1] * mags[1]
    x1 = box.x_max + signs[2] * mags[2]
    y1 = box.y_max + signs[3] * mags[3]
    x0, x1 = sorted((int(np.clip(x0, 0, width - 1)), int(np.clip(x1, 0, width - 1))))
    y0, y1 = sorted((int(np.clip(y0, 0, height - 1)), int(np.clip(y1, 0, height - 1))))
    x0, x1 = _grow_degenerate(x0, x1, width)
    y0, y1 = _grow_degenerate(y0, y1, height)
    return BoxAnnotation(x0, y0, x1, y1)


@dataclass(frozen=True)
class GeometricTransform:
    """A grid transform on the trailing two axes of an array.

    ``params`` is ``(dy, dx)`` for translate, given as fractions of the
    spatial extent so one transform acts consistently on an image and on its
    lower-resolution embedding, and ``(factor,)`` for scale. Other kinds take
    no parameters.
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @property
    def invertible(self) -> bool:
        return self.kind in INVERTIBLE_KINDS

    def inverse(self) -> "GeometricTransform":
        if not self.invertible:
            raise ValueError(f"{self.kind} is not exactly invertible on the grid")
        return GeometricTransform(_INVERSE[self.kind])

    def __call__(self, tensor):
        return apply_transform(self, tensor)


def sample_transform(transform_set, rng: np.random.Generator, max_translate: float = 0.1,
                     scale_range=(0.9, 1.1)) -> GeometricTransform:
    kinds = list(transform_set)
    if not kinds:
        raise ValueError("transform set is empty")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "translate":
        dy, dx = rng.uniform(-max_translate, max_translate, size=2)
        return GeometricTransform(kind, (float(dy), float(dx)))
    if kind == "scale":
        return GeometricTransform(kind, (float(rng.uniform(*scale_range)),))
    return GeometricTransform(kind)


def apply_transform(transform: GeometricTransform, tensor):
    """Apply ``transform`` to the last two axes of a numpy array or torch tensor."""
    is_torch = isinstance(tensor, torch.Tensor)
    if tensor.ndim < 2:
        raise ValueError("tensor needs at least two spatial axes")
    h, w = tensor.shape[-2:]
    kind = transform.kind
    if kind in ("rot90", "rot270") and h != w:
        raise ValueError(f"{kind} needs square spatial dims, got {h}x{w}")
    if kind == "identity":
        return tensor
    if kind in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[kind]
        if is_torch:
            return torch.rot90(tensor, k, dims=(-2, -1))
        return np.ascontiguousarray(np.rot90(tensor, k, axes=(-2, -1)))
    if kind in ("hflip", "vflip"):
        axis = -1 if kind == "hflip" else -2
        if is_torch:
            return torch.flip(tensor, dims=(axis,))
        return np.ascontiguousarray(np.flip(tensor, axis=axis))

    # translate / scale: nearest-neighbour pull-back with zero fill
    if kind == "translate":
        dy, dx = transform.params
        src_r = np.arange(h) - int(round(dy * h))
        src_c = np.arange(w) - int(round(dx * w))
    else:
        (factor,) = transform.params
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        src_r = np.rint((np.arange(h) - cy) / factor + cy).astype(int)
        src_c = np.rint((np.arange(w) - cx) / factor + cx).astype(int)
    valid = (src_r[:, None] >= 0) & (src_r[:, None] < h) & (src_c[None, :] >= 0) & (src_c[None, :] < w)
    rr = np.clip(src_r, 0, h - 1)
    cc = np.clip(src_c, 0, w - 1)
    if is_torch:
        out = tensor[..., torch.as_tensor(rr)[:, None], torch.as_tensor(cc)[None, :]]
        return out * torch.as_tensor(valid, dtype=tensor.dtype, device=tensor.device)
    out = tensor[..., rr[:, None], cc[None, :]]
    return out * valid.astype(tensor.dtype)


def largest_component_filter(mask, min_size: int = 10):
    """Keep the largest 4-connected foreground component.

    Returns None when the mask is empty or its largest component is smaller
    than ``min_size`` pixels.
    """
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask)  # default structure is 4-connected
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes))
    if sizes[best] < min_size:
        return None
    return (labels == best + 1).astype(np.uint8)
