"""Frozen promptable segmentation backbones and the image-embedding cache.

Two backbones are provided. ``ToyBackbone`` is a small deterministic
stand-in for a foundation model that runs on a laptop CPU. ``ExternalBackbone``
reads embeddings, default sparse embedding and box-prompted pseudo-labels that
were exported offline by a real model (same on-disk record layout as the
cache), and decodes with a user-supplied torch module.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .domain import BoxAnnotation, Image, PromptEmbedding

RECORD_MAGIC = b"BPREC001"
MANIFEST_NAME = "manifest.json"


class StaleCacheError(RuntimeError):
    """A cached record does not match its checksum or the current image."""


class CacheMissError(KeyError):
    pass


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    embedding_shape: tuple[int, int, int]
    input_size: tuple[int, int]
    deterministic: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embedding_shape"] = list(self.embedding_shape)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d) -> "BackboneDescriptor":
        return cls(d["name"], tuple(d["embedding_shape"]), tuple(d["input_size"]),
                   bool(d.get("deterministic", True)))


def image_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """Image / array / tensor -> float tensor of shape (B, 3, H, W)."""
    if isinstance(image, Image):
        image = image.pixels
    t = image if torch.is_tensor(image) else torch.from_numpy(np.array(image, dtype=np.float32))
    t = t.to(dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ValueError(f"expected a CxHxW or BxCxHxW image, got {tuple(t.shape)}")
    return t


def image_hash(image) -> str:
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float32)
    return hashlib.sha256(np.ascontiguousarray(px, dtype="<f4").tobytes()).hexdigest()


def threshold_probabilities(prob) -> torch.Tensor:
    """Binary mask ``prob >= 0.5`` (inclusive)."""
    return (torch.as_tensor(prob) >= 0.5).to(torch.uint8)


class PromptableBackbone(nn.Module):
    """Frozen image encoder, box prompt encoder and mask decoder."""

    descriptor: BackboneDescriptor

    def encode_image(self, image) -> torch.Tensor:
        raise NotImplementedError

    def encode_box_prompt(self, box: BoxAnnotation) -> PromptEmbedding:
        raise NotImplementedError

    def default_sparse_embedding(self) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z_i, prompt: PromptEmbedding) -> torch.Tensor:
        raise NotImplementedError

    def prompted_pseudo_label(self, image, box: BoxAnnotation, z_i=None) -> np.ndarray:
        """Decoder output for the box prompt, thresholded at 0.5."""
        if z_i is None:
            z_i = self.encode_image(image)
        with torch.no_grad():
            prob = self.decode(z_i, self.encode_box_prompt(box))
        return threshold_probabilities(prob).squeeze(0).numpy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def _check_image(self, x: torch.Tensor):
        if tuple(x.shape[-2:]) != tuple(self.descriptor.input_size) or x.shape[-3] != 3:
            raise ValueError(f"image shape {tuple(x.shape[-3:])} does not match backbone input "
                             f"(3, {self.descriptor.input_size[0]}, {self.descriptor.input_size[1]})")

    def _check_embeddings(self, z_i, dense):
        want = tuple(self.descriptor.embedding_shape)
        if tuple(z_i.shape[-3:]) != want:
            raise ValueError(f"image embedding shape {tuple(z_i.shape[-3:])} != {want}")
        if tuple(dense.shape[-3:]) != want:
            raise ValueError(f"dense prompt shape {tuple(dense.shape[-3:])} != {want}")


class ToyBackbone(PromptableBackbone):
    """Deterministic, differentiable stand-in for a promptable foundation model.

    Image encoder: the first ``detail**2`` channels hold the mean contrast
    (grey level in [0, 1] minus the image median) of a ``detail x detail``
    grid of sub-cells inside each ``patch x patch`` cell (a space-to-depth
    layout); any remaining channels are a seeded random strided convolution
    followed by tanh.

    Box prompt encoder: dense channels 0-3 hold the corners
    ``(x_min/(W-1), y_min/(H-1), x_max/(W-1), y_max/(H-1))`` broadcast over
    the grid, channel 4 the fraction of each cell covered by the box and
    channel 5 its complement; other channels are zero. The sparse embedding
    of an empty prompt is the zero vector.

    Decoder: a frozen 1x1 mixing of image embedding, dense prompt and sparse
    prompt gives one logit per cell; it is upsampled to the sub-cell grid
    and added to ``gain * (contrast - threshold)`` unpacked from the embedding,
    then bilinearly upsampled to the input size and passed through a sigmoid.
    Sub-cells brighter than their surroundings inside the box become
    foreground; with an all-zero dense prompt the output is confidently
    background.
    """

    def __init__(self, input_size=(256, 256), embed_dim: int = 16, patch: int = 16, detail: int = 4,
                 seed: int = 0, intensity_gain: float = 48.0, intensity_threshold: float = 0.2,
                 empty_prompt_bias: float = -26.0, inside_weight: float = 27.0, outside_weight: float = -4.0,
                 feature_weight: float = 0.1, corner_weight: float = 0.1):
        super().__init__()
        h, w = input_size
        if h % patch or w % patch:
            raise ValueError(f"input size {input_size} is not a multiple of patch {patch}")
        if patch % detail:
            raise ValueError("patch must be a multiple of detail")
        if embed_dim < max(6, detail * detail):
            raise ValueError(f"embed_dim must be at least max(6, detail**2) = {max(6, detail * detail)}")
        self.patch, self.detail = patch, detail
        self.descriptor = BackboneDescriptor("toy", (embed_dim, h // patch, w // patch), (h, w), True)
        g = torch.Generator().manual_seed(seed)
        n_rand = embed_dim - detail * detail
        fan_in = 3 * patch * patch
        self.register_buffer("enc_weight", torch.randn(n_rand, 3, patch, patch, generator=g) * (3.0 / fan_in) ** 0.5)
        self.register_buffer("enc_bias", torch.randn(n_rand, generator=g) * 0.1)

        w_prompt = torch.randn(embed_dim, generator=g) * feature_weight
        w_prompt[0:4] = corner_weight
        w_prompt[4] = inside_weight
        w_prompt[5] = outside_weight
        self.register_buffer("mix_image", torch.randn(embed_dim, generator=g) * feature_weight)
        self.register_buffer("mix_prompt", w_prompt)
        self.register_buffer("mix_sparse", torch.randn(embed_dim, generator=g) * feature_weight)
        self.register_buffer("mix_bias", torch.tensor(float(empty_prompt_bias)))
        self.intensity_gain = float(intensity_gain)
        self.intensity_threshold = float(intensity_threshold)

    def encode_image(self, image) -> torch.Tensor:
        x = image_tensor(image, dtype=self.enc_weight.dtype)
        self._check_image(x)
        grey = x.mean(dim=1, keepdim=True) / 255.0
        # contrast against the image's median grey level
        base = grey.flatten(1).median(dim=1).values.view(-1, 1, 1, 1)
        level = F.pixel_unshuffle(F.avg_pool2d(grey - base, self.patch // self.detail), self.detail)
        if self.enc_weight.shape[0] == 0:
            return level
        feats = torch.tanh(F.conv2d(x / 255.0 - 0.5, self.enc_weight, self.enc_bias, stride=self.patch))
        return torch.cat([level, feats], dim=1)

    def encode_box_prompt(self, box: BoxAnnotation) -> PromptEmbedding:
        h, w = self.descriptor.input_size
        box.check_fits(h, w)
        c, he, we = self.descriptor.embedding_shape
        dtype = self.enc_weight.dtype
        dense = torch.zeros(1, c, he, we, dtype=dtype)
        corners = torch.tensor([box.x_min / (w - 1), box.y_min / (h - 1),
                                box.x_max / (w - 1), box.y_max / (h - 1)], dtype=dtype)
        dense[0, 0:4] = corners[:, None, None]
        inside = torch.zeros(1, 1, h, w, dtype=dtype)
        inside[..., box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1
        cover = F.avg_pool2d(inside, self.patch)[0, 0]
        dense[0, 4] = cover
        dense[0, 5] = 1 - cover
        return PromptEmbedding(dense, self.default_sparse_embedding().unsqueeze(0))

    def default_sparse_embedding(self) -> torch.Tensor:
        return torch.zeros(self.descriptor.embedding_shape[0], dtype=self.enc_weight.dtype)

    def decode(self, z_i, prompt: PromptEmbedding) -> torch.Tensor:
        """Probability map of shape (B, H, W) (or (H, W) for unbatched input)."""
        dense, sparse = prompt
        unbatched = z_i.ndim == 3
        if unbatched:
            z_i = z_i.unsqueeze(0)
        if dense.ndim == 3:
            dense = dense.unsqueeze(0)
        if sparse.ndim == 1:
            sparse = sparse.unsqueeze(0)
        self._check_embeddings(z_i, dense)
        coarse = (torch.einsum("bchw,c->bhw", z_i, self.mix_image)
                  + torch.einsum("bchw,c->bhw", dense, self.mix_prompt)
                  + (sparse @ self.mix_sparse)[:, None, None]
                  + self.mix_bias)
        d = self.detail
        grey = F.pixel_shuffle(z_i[:, :d * d], d)
        logit = F.interpolate(coarse.unsqueeze(1), size=grey.shape[-2:], mode="bilinear", align_corners=False)
        logit = logit + self.intensity_gain * (grey - self.intensity_threshold)
        logit = F.interpolate(logit, size=self.descriptor.input_size,
                              mode="bilinear", align_corners=False).squeeze(1)
        prob = torch.sigmoid(logit)
        return prob.squeeze(0) if unbatched else prob


# --------------------------------------------------------------------------
# record files shared by the embedding cache and external exports

def write_record(path, array, header: dict) -> None:
    raw = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = dict(header, shape=list(raw.shape), dtype="<f4",
                  checksum=hashlib.sha256(raw.tobytes()).hexdigest())
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(RECORD_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(raw.tobytes())
    os.replace(tmp, path)


def read_record(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != RECORD_MAGIC:
        raise StaleCacheError(f"{path}: not a record file")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n])
    except json.JSONDecodeError as e:
        raise StaleCacheError(f"{path}: corrupt header ({e})") from None
    raw = data[12 + n:]
    if hashlib.sha256(raw).hexdigest() != header.get("checksum"):
        raise StaleCacheError(f"record for sample {header.get('sample_id')!r} failed its checksum ({path})")
    arr = np.frombuffer(raw, dtype="<f4").reshape(header["shape"]).astype(np.float32)
    return header, arr


def _safe_name(sample_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in sample_id)
    return f"{keep}-{hashlib.sha1(sample_id.encode()).hexdigest()[:8]}"


class EmbeddingCache:
    """On-disk image embeddings keyed by sample id.

    Each record stores the sample id, the hash of the image it was computed
    from and a checksum of the tensor bytes; ``manifest.json`` lists them.
    """

    def __init__(self, cache_dir):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.root / MANIFEST_NAME
        if self._manifest_path.exists():
            self.manifest = json.loads(self._manifest_path.read_text())
        else:
            self.manifest = {"backbone": None, "records": {}}

    def __contains__(self, sample_id) -> bool:
        return sample_id in self.manifest["records"]

    def __len__(self) -> int:
        return len(self.manifest["records"])

    def _save_manifest(self):
        tmp = self._manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))
        os.replace(tmp, self._manifest_path)

    def put(self, sample_id: str, image, embedding, backbone_name: str) -> None:
        b = self.manifest.get("backbone")
        if b is not None and b != backbone_name:
            raise ValueError(f"cache holds {b!r} embeddings, not {backbone_name!r}")
        self.manifest["backbone"] = backbone_name
        fname = _safe_name(sample_id) + ".emb"
        ih = image_hash(image)
        emb = embedding.detach().cpu().numpy() if torch.is_tensor(embedding) else embedding
        write_record(self.root / fname, emb, {"sample_id": sample_id, "kind": "embedding",
                                              "image_hash": ih, "backbone": backbone_name})
        self.manifest["records"][sample_id] = {"file": fname, "image_hash": ih}
        self._save_manifest()

    def get(self, sample_id: str, image=None) -> torch.Tensor:
        rec = self.manifest["records"].get(sample_id)
        if rec is None:
            raise CacheMissError(f"no cached embedding for sample {sample_id!r}; run precompute first")
        header, arr = read_record(self.root / rec["file"])
        if header.get("sample_id") != sample_id:
            raise StaleCacheError(f"record {rec['file']} belongs to {header.get('sample_id')!r}, not {sample_id!r}")
        if image is not None and image_hash(image) != header.get("image_hash"):
            raise StaleCacheError(f"cached embedding for sample {sample_id!r} was computed from a different image")
        return torch.from_numpy(arr)

    def verify(self) -> list[str]:
        """Sample ids whose records fail to load."""
        bad = []
        for sid in self.manifest["records"]:
            try:
                self.get(sid)
            except (StaleCacheError, OSError):
                bad.append(sid)
        return bad


def precompute_embeddings(backbone: PromptableBackbone, samples, cache_dir) -> dict:
    """Encode every ``(sample_id, image)`` not yet cached.

    Returns a summary ``{"count", "computed", "hits", "bytes"}``. Cached
    records whose image no longer matches raise StaleCacheError.
    """
    cache = EmbeddingCache(cache_dir)
    computed = hits = 0
    for sample_id, image in samples:
        if sample_id in cache:
            cache.get(sample_id, image)
            hits += 1
            continue
        with torch.no_grad():
            z = backbone.encode_image(image)[0]
        cache.put(sample_id, image, z, backbone.descriptor.name)
        computed += 1
    nbytes = sum((cache.root / r["file"]).stat().st_size for r in cache.manifest["records"].values())
    return {"count": len(cache), "computed": computed, "hits": hits, "bytes": nbytes,
            "manifest": str(cache._manifest_path)}


# --------------------------------------------------------------------------
# external backbones

def export_backbone_outputs(backbone: PromptableBackbone, samples, export_dir) -> Path:
    """Write embeddings, default sparse embedding and pseudo-labels in the export layout.

    ``samples`` yields ``(sample_id, image, box)``. This is the format an
    offline run of a real foundation model is expected to produce.
    """
    root = Path(export_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"descriptor": backbone.descriptor.to_dict(), "sparse": "default_sparse.rec",
                "records": {}}
    write_record(root / "default_sparse.rec", backbone.default_sparse_embedding().detach().numpy(),
                 {"sample_id": None, "kind": "sparse"})
    for sample_id, image, box in samples:
        name = _safe_name(sample_id)
        ih = image_hash(image)
        with torch.no_grad():
            z = backbone.encode_image(image)
        write_record(root / f"{name}.emb", z[0].numpy(),
                     {"sample_id": sample_id, "kind": "embedding", "image_hash": ih})
        entry = {"embedding": f"{name}.emb", "image_hash": ih, "pseudo_labels": []}
        if box is not None:
            lbl = backbone.prompted_pseudo_label(image, box, z_i=z)
            fname = f"{name}__{'_'.join(map(str, box.as_tuple()))}.lbl"
            write_record(root / fname, lbl, {"sample_id": sample_id, "kind": "pseudo_label",
                                             "box": list(box.as_tuple())})
            entry["pseudo_labels"].append({"box": list(box.as_tuple()), "file": fname})
        manifest["records"][sample_id] = entry
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


class ExternalBackbone(PromptableBackbone):
    """Backbone served from an offline export.

    ``encode_image`` looks embeddings up by image hash and
    ``prompted_pseudo_label`` by (image, box). ``decoder``, when given, is a
    torch callable ``decoder(z_i, PromptEmbedding) -> probabilities`` wrapping
    the real model's mask decoder; without it ``decode`` is unavailable.
    """

    def __init__(self, export_dir, decoder=None):
        super().__init__()
        self.root = Path(export_dir)
        manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        self.descriptor = BackboneDescriptor.from_dict(manifest["descriptor"])
        self._records = manifest["records"]
        self._by_hash = {r["image_hash"]: sid for sid, r in self._records.items()}
        _, sparse = read_record(self.root / manifest["sparse"])
        if sparse.shape != (self.descriptor.embedding_shape[0],):
            raise ValueError(f"sparse embedding has shape {sparse.shape}")
        self.register_buffer("sparse_default", torch.from_numpy(sparse))
        self.decoder = decoder

    def sample_id_for(self, image) -> str:
        sid = self._by_hash.get(image_hash(image))
        if sid is None:
            raise CacheMissError("image not present in the external export")
        return sid

    def encode_image(self, image) -> torch.Tensor:
        sid = self.sample_id_for(image)
        _, arr = read_record(self.root / self._records[sid]["embedding"])
        return torch.from_numpy(arr).unsqueeze(0)

    def default_sparse_embedding(self) -> torch.Tensor:
        return self.sparse_default.clone()

    def encode_box_prompt(self, box):
        raise NotImplementedError("external exports carry pseudo-labels, not prompt embeddings")

    def decode(self, z_i, prompt):
        if self.decoder is None:
            raise NotImplementedError("ExternalBackbone needs a decoder callable to decode")
        self._check_embeddings(z_i, prompt.dense)
        return self.decoder(z_i, prompt)

    def prompted_pseudo_label(self, image, box, z_i=None) -> np.ndarray:
        sid = self.sample_id_for(image)
        for entry in self._records[sid]["pseudo_labels"]:
            if tuple(entry["box"]) == box.as_tuple():
                _, arr = read_record(self.root / entry["file"])
                return arr.astype(np.uint8)
        raise CacheMissError(f"no exported pseudo-label for sample {sid!r} with box {box.as_tuple()}")
