"""Preprocessing, slice filtering, dataset manifests and synthetic blob data.

Manifest files are JSON lines. The first line is a header
``{"provenance": {...}}``; every following line is one sample::

    {"sample_id": "s0003", "image": "images/s0003.png", "mask": "masks/s0003.png",
     "box": [x_min, y_min, x_max, y_max], "split": "train"}

Paths are relative to the manifest's directory. Images are 8-bit greyscale
PNG (replicated to 3 channels on load), masks 8-bit PNG with values {0, 255}.

Raw 3D volumes are read from ``.npz`` containers holding ``volume``
(slices x rows x cols), ``spacing`` (mm per axis, same order) and optionally
``mask``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import __version__
from .domain import BoxAnnotation, Image
from .geometry import box_from_mask, largest_component_filter

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------
# preprocessing

def clip_and_rescale(values, low_pct: float = 0.5, high_pct: float = 99.5) -> np.ndarray:
    """Clip to the given percentiles of ``values`` and rescale linearly to [0, 255].

    Percentiles are taken over the whole array (a 2D image or a full 3D
    volume). A zero intensity range maps to all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite intensities")
    lo, hi = np.percentile(v, [low_pct, high_pct])
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.float32)
    v = np.clip(v, lo, hi)
    return ((v - lo) / (hi - lo) * 255.0).astype(np.float32)


def center_crop_or_pad(arr: np.ndarray, size) -> np.ndarray:
    """Center-crop and/or zero-pad the last two axes to ``size``."""
    th, tw = size
    h, w = arr.shape[-2:]
    out = np.zeros(arr.shape[:-2] + (th, tw), dtype=arr.dtype)
    sy, sx = max((h - th) // 2, 0), max((w - tw) // 2, 0)
    dy, dx = max((th - h) // 2, 0), max((tw - w) // 2, 0)
    ch, cw = min(h, th), min(w, tw)
    out[..., dy:dy + ch, dx:dx + cw] = arr[..., sy:sy + ch, sx:sx + cw]
    return out


def resize(arr: np.ndarray, size, order: int) -> np.ndarray:
    """Resize the 2D ``arr`` to ``size``; order 1 bilinear, order 0 nearest."""
    h, w = arr.shape
    if (h, w) == tuple(size):
        return arr.copy()
    zoom = (size[0] / h, size[1] / w)
    out = ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)
    return out


def _resample_to_mm(arr, spacing_rc, order):
    zoom = (spacing_rc[0], spacing_rc[1])
    if np.allclose(zoom, 1.0):
        return arr
    return ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)


def preprocess(raw, target_crop, target_resize, spacing=None, mask=None):
    """Turn a raw 2D image or 3D volume into fixed-size 3-channel images.

    For a 3D array (slices x rows x cols) ``spacing`` is required and
    percentile clipping uses the whole volume. Each 2D slice is resampled to
    1 x 1 mm (when ``spacing`` is given), center-cropped/padded to
    ``target_crop`` and resized to ``target_resize``. Returns a list of
    ``(Image, mask_or_None)`` pairs, one per slice.
    """
    raw = np.asarray(raw)
    if raw.ndim == 3:
        if spacing is None:
            raise ValueError("3D volumes need voxel spacing metadata")
        spacing_rc = tuple(spacing)[-2:]
    elif raw.ndim == 2:
        spacing_rc = tuple(spacing)[-2:] if spacing is not None else (1.0, 1.0)
    else:
        raise ValueError(f"expected a 2D image or 3D volume, got shape {raw.shape}")
    scaled = clip_and_rescale(raw)
    slices = scaled if raw.ndim == 3 else scaled[None]
    masks = None
    if mask is not None:
        masks = np.asarray(mask)
        masks = masks if masks.ndim == 3 else masks[None]
        if masks.shape != slices.shape:
            raise ValueError("mask shape does not match image")

    out = []
    for k, sl in enumerate(slices):
        img = _resample_to_mm(sl, spacing_rc, order=1)
        img = center_crop_or_pad(img, target_crop)
        img = np.clip(resize(img, target_resize, order=1), 0, 255)
        m = None
        if masks is not None:
            m = _resample_to_mm((masks[k] > 0).astype(np.uint8), spacing_rc, order=0)
            m = center_crop_or_pad(m, target_crop)
            m = resize(m, target_resize, order=0).astype(np.uint8)
        out.append((Image(np.repeat(img[None], 3, axis=0)), m))
    return out


def filter_slices(masks, min_size: int = 10):
    """Indices of slices to keep and their reduced masks.

    Background-only slices are dropped, each remaining mask is reduced to its
    largest connected object, and slices whose largest object is smaller
    than ``min_size`` pixels are dropped.
    """
    keep, kept_masks = [], []
    for k, m in enumerate(masks):
        reduced = largest_component_filter(m, min_size=min_size)
        if reduced is not None:
            keep.append(k)
            kept_masks.append(reduced)
    return keep, kept_masks


def load_volume(path):
    """Read an ``.npz`` volume container -> (volume, spacing, mask_or_None)."""
    with np.load(path) as z:
        if "volume" not in z:
            raise ValueError(f"{path}: missing 'volume' array")
        if "spacing" not in z:
            raise ValueError(f"{path}: missing 'spacing' metadata")
        vol = z["volume"]
        mask = z["mask"] if "mask" in z else None
        return vol, tuple(float(s) for s in z["spacing"]), mask


def fingerprint(params: dict) -> str:
    blob = json.dumps({"params": params, "version": __version__}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# manifests

@dataclass
class ManifestEntry:
    sample_id: str
    box: BoxAnnotation
    split: str = "train"
    image_path: str | None = None
    mask_path: str | None = None
    # in-memory payloads, used before the dataset is written to disk
    image: Image | None = field(default=None, repr=False, compare=False)
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        rec = {"sample_id": self.sample_id, "image": self.image_path,
               "box": list(self.box.as_tuple()), "split": self.split}
        if self.mask_path is not None:
            rec["mask"] = self.mask_path
        return rec


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {e.sample_id!r}")
            if e.split not in SPLITS:
                raise ManifestError(f"sample {e.sample_id!r}: unknown split {e.split!r}")
            seen.add(e.sample_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_image(self, entry: ManifestEntry) -> Image:
        if entry.image is not None:
            return entry.image
        path = self._resolve(entry.image_path)
        with PILImage.open(path) as im:
            px = np.asarray(im.convert("L"), dtype=np.float32)
        entry.image = Image(np.repeat(px[None], 3, axis=0))
        return entry.image

    def load_mask(self, entry: ManifestEntry) -> np.ndarray:
        if entry.mask is not None:
            return entry.mask
        if entry.mask_path is None:
            raise ManifestError(f"sample {entry.sample_id!r} has no ground-truth mask")
        with PILImage.open(self._resolve(entry.mask_path)) as im:
            entry.mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
        return entry.mask

    def _resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write ``manifest`` to ``path``, materialising in-memory images next to it."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"provenance": manifest.provenance}, sort_keys=True)]
    for e in manifest.entries:
        if e.image is not None and e.image_path is None:
            e.image_path = f"images/{e.sample_id}.png"
            _write_png(root / e.image_path, e.image.pixels[0])
        if e.mask is not None and e.mask_path is None:
            e.mask_path = f"masks/{e.sample_id}.png"
            _write_png(root / e.mask_path, np.asarray(e.mask, dtype=np.uint8) * 255)
        if e.image_path is None:
            raise ManifestError(f"sample {e.sample_id!r} has no image")
        lines.append(json.dumps(e.to_record(), sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    manifest.root = root
    return path


def _write_png(path: Path, arr2d):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr2d)
    if arr.dtype != np.uint8:
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("images must hold integer values in [0, 255] to be stored losslessly")
        arr = rounded.astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path, optimize=False)


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    provenance = {}
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e.msg}") from None
            if "provenance" in rec and "sample_id" not in rec:
                provenance = rec["provenance"]
                continue
            try:
                entry = ManifestEntry(sample_id=str(rec["sample_id"]), box=BoxAnnotation(*rec["box"]),
                                      split=rec.get("split", "train"), image_path=rec["image"],
                                      mask_path=rec.get("mask"))
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: bad record ({e})") from None
            if check_files:
                for p in (entry.image_path, entry.mask_path):
                    if p is not None and not (root / p).exists():
                        raise ManifestError(f"sample {entry.sample_id!r}: missing file {p}")
            entries.append(entry)
    try:
        return DatasetManifest(entries, provenance, root)
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from None


# --------------------------------------------------------------------------
# synthetic data

def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def synthetic_blob(rng: np.random.Generator, image_size=(256, 256), area_range=(0.02, 0.10),
                   axis_ratio_range=(0.7, 1.0), contrast_range=(40.0, 110.0),
                   background_range=(50.0, 110.0), texture_amplitude=10.0, noise_sigma=8.0):
    """One textured image with a single bright ellipse. Returns (pixels uint8, mask)."""
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    while True:
        frac = rng.uniform(*area_range)
        ratio = rng.uniform(*axis_ratio_range)
        a = math.sqrt(frac * h * w / (math.pi * ratio))
        b = ratio * a
        theta = rng.uniform(0, math.pi)
        margin = a + 2
        if 2 * margin >= min(h, w):
            continue
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
        if area_range[0] <= mask.mean() <= area_range[1]:
            break
    bg = rng.uniform(*background_range)
    texture = texture_amplitude * _smooth_noise(rng, (h, w), sigma=max(h, w) / 24)
    contrast = rng.uniform(*contrast_range)
    # slow shading across the blob so it is not a flat plateau
    shade = 0.15 * contrast * _smooth_noise(rng, (h, w), sigma=max(h, w) / 12)
    img = bg + texture + mask * (contrast + shade) + noise_sigma * rng.standard_normal((h, w))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def generate_synthetic(n: int, image_size=(256, 256), rng: np.random.Generator | None = None,
                       split_fractions=(1.0, 0.0, 0.0), id_prefix: str = "syn", **blob_kwargs) -> DatasetManifest:
    """``n`` synthetic blob samples with ground-truth masks and tight boxes.

    The first ``round(n * f_train)`` samples go to train, the next
    ``round(n * f_val)`` to val and the rest to test.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    n_train = int(round(n * split_fractions[0]))
    n_val = int(round(n * split_fractions[1]))
    entries = []
    for k in range(n):
        px, mask = synthetic_blob(rng, image_size, **blob_kwargs)
        split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
        entries.append(ManifestEntry(sample_id=f"{id_prefix}{k:04d}", box=box_from_mask(mask), split=split,
                                     image=Image(np.repeat(px[None], 3, axis=0).astype(np.float32)), mask=mask))
    params = {"n": n, "image_size": list(image_size), "split_fractions": list(split_fractions),
              "blob": {k: list(v) if isinstance(v, tuple) else v for k, v in blob_kwargs.items()}}
    return DatasetManifest(entries, {"source": "synthetic", "fingerprint": fingerprint(params)})
