"""Trainable image-to-prompt-embedding generator and its checkpoint format.

Checkpoint layout: 8-byte magic, little-endian uint32 header length, JSON
header ``{config, config_fingerprint, params, checksum, meta}``, then the
float32 little-endian tensors in the order listed in ``params``.
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

from .backbone import image_tensor
from .domain import PromptEmbedding

CKPT_MAGIC = b"BPCKPT01"
PAPER_ENCODER_WIDTHS = (192, 256, 320, 480, 720, 1280)


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_widths: tuple[int, ...] = (8, 16, 32)
    decoder_upsample_blocks: int = 2
    output_shape: tuple[int, int, int] = (16, 16, 16)
    input_size: tuple[int, int] = (256, 256)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if not self.encoder_widths:
            raise ValueError("encoder_widths is empty")
        if self.decoder_upsample_blocks < 0:
            raise ValueError("decoder_upsample_blocks must be nonnegative")

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        c = self.output_shape[0]
        b = self.decoder_upsample_blocks
        return tuple(c * 2 ** (b - 1 - i) for i in range(b))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("init_seed")  # seeds do not change the parameter layout
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def paper_scale(cls, **kw) -> "GeneratorConfig":
        kw.setdefault("output_shape", (256, 64, 64))
        kw.setdefault("input_size", (1024, 1024))
        return cls(encoder_widths=PAPER_ENCODER_WIDTHS, **kw)


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class PromptGenerator(nn.Module):
    """Strided convolutional encoder plus upsampling decoder.

    Each encoder stage is a stride-2 3x3 conv and a 3x3 conv; each decoder
    block is a 2x bilinear upsampling and two 3x3 convs with widths halving
    towards the embedding depth; a 1x1 head produces the dense embedding,
    which is pooled or interpolated to the exact output grid. No
    normalisation layers, so train and eval mode compute the same function.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), sparse_default=None):
        super().__init__()
        self.config = config
        layers, cin = [], 3
        for w in config.encoder_widths:
            layers += [_conv(cin, w, stride=2), nn.ReLU(), _conv(w, w), nn.ReLU()]
            cin = w
        self.encoder = nn.Sequential(*layers)
        blocks = []
        for w in config.decoder_widths:
            blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                                        _conv(cin, w), nn.ReLU(), _conv(w, w), nn.ReLU()))
            cin = w
        self.decoder = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, config.output_shape[0], 1)
        c = config.output_shape[0]
        sparse = torch.zeros(c) if sparse_default is None else torch.as_tensor(sparse_default, dtype=torch.float32)
        if sparse.shape != (c,):
            raise ValueError(f"sparse embedding must have length {c}")
        self.register_buffer("sparse_default", sparse.clone())
        self._init_weights(config.init_seed)

    def _init_weights(self, seed):
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        with torch.no_grad():
            self.head.weight.mul_(0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images in [0, 255] -> (B, C_e, H_e, W_e) dense embeddings."""
        if tuple(x.shape[-2:]) != self.config.input_size or x.shape[-3] != 3:
            raise ValueError(f"generator expects (3, {self.config.input_size[0]}, {self.config.input_size[1]}) "
                             f"images, got {tuple(x.shape[-3:])}")
        h = self.head(self.decoder(self.encoder(x / 127.5 - 1.0)))
        target = self.config.output_shape[1:]
        if tuple(h.shape[-2:]) == target:
            return h
        if h.shape[-2] >= target[0] and h.shape[-1] >= target[1]:
            return F.adaptive_avg_pool2d(h, target)
        return F.interpolate(h, size=target, mode="bilinear", align_corners=False)

    def generate(self, image) -> PromptEmbedding:
        x = image_tensor(image, dtype=self.head.weight.dtype)
        dense = self(x)
        sparse = self.sparse_default.expand(dense.shape[0], -1)
        return PromptEmbedding(dense, sparse)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def freeze(self) -> "PromptGenerator":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def save_weights(self, path, meta: dict | None = None) -> Path:
        return save_weights(self, path, meta)


def save_weights(gen: PromptGenerator, path, meta: dict | None = None) -> Path:
    state = gen.state_dict()
    names = sorted(state)
    blobs, params, offset = [], [], 0
    for name in names:
        raw = np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4").tobytes()
        params.append({"name": name, "shape": list(state[name].shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = b"".join(blobs)
    header = {"config": gen.config.to_dict(), "config_fingerprint": gen.config.fingerprint(),
              "params": params, "checksum": hashlib.sha256(body).hexdigest(), "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + body)
    os.replace(tmp, path)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        data = f.read(12)
        if data[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a generator checkpoint")
        (n,) = struct.unpack("<I", data[8:12])
        return json.loads(f.read(n))


def load_weights(path, config: GeneratorConfig | None = None) -> PromptGenerator:
    """Rebuild a generator from ``path``.

    When ``config`` is given, the checkpoint must have been written for the
    same parameter layout.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a generator checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n])
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt header") from None
    body = data[12 + n:]
    if hashlib.sha256(body).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or was modified")
    saved = GeneratorConfig(**header["config"])
    if config is not None and config.fingerprint() != header["config_fingerprint"]:
        raise ConfigMismatchError(f"checkpoint was saved for config {saved}, not {config}")
    gen = PromptGenerator(saved if config is None else config)
    state = {}
    for p in header["params"]:
        raw = body[p["offset"]:p["offset"] + p["nbytes"]]
        state[p["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(p["shape"]).copy())
    gen.load_state_dict(state)
    gen.checkpoint_meta = header.get("meta", {})
    return gen
