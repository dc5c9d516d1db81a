"""Training loop for the prompt generator against a frozen backbone."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import CacheMissError, EmbeddingCache, PromptableBackbone, image_tensor
from .domain import BoxAnnotation, PromptEmbedding, TrainConfig, validate_config
from .geometry import apply_transform, box_from_mask, box_mask, perturb_box, sample_transform
from .losses import (LossBreakdown, PenaltyFunction, barrier_schedule, consistency_loss,
                     emptiness_loss, pseudo_label_loss, size_loss, total_loss)
from .metrics import aggregate, dsc, evaluate_masks
from .prompt_generator import GeneratorConfig, PromptGenerator

LR_DROP_FACTOR = 0.1

# box-noise bands as fractions of the image length scale
NOISE_BANDS = {"0": (0.0, 0.0), "0-1.5": (0.0, 0.015), "1.5-3": (0.015, 0.03), "3-5": (0.03, 0.05)}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (subset, init, transforms, noise, ...)."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, tag])


def torch_seed(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(2 ** 31 - 1))


@dataclass
class PreparedSample:
    """Per-sample tensors that stay fixed during training."""

    sample_id: str
    image: torch.Tensor      # (3, H, W)
    z_i: torch.Tensor        # (C_e, H_e, W_e)
    pseudo: torch.Tensor     # (H, W) {0, 1}
    outside: torch.Tensor    # (H, W) {0, 1}
    inside_area: int
    box: BoxAnnotation


def prepare_samples(backbone: PromptableBackbone, samples, cache: EmbeddingCache | None = None,
                    require_cache: bool = False) -> list[PreparedSample]:
    """Look up embeddings and compute box-prompted pseudo-labels once.

    ``samples`` yields ``(sample_id, image, box)``. The backbone is frozen
    and deterministic, so pseudo-labels do not change between epochs.
    """
    out = []
    h, w = backbone.descriptor.input_size
    for sample_id, image, box in samples:
        x = image_tensor(image)[0]
        if cache is not None and sample_id in cache:
            z = cache.get(sample_id, image).unsqueeze(0)
        elif require_cache:
            raise CacheMissError(f"sample {sample_id!r} is not in the embedding cache; run precompute first")
        else:
            with torch.no_grad():
                z = backbone.encode_image(x)
        pseudo = backbone.prompted_pseudo_label(x, box, z_i=z)
        inside = box_mask(box, h, w)
        out.append(PreparedSample(sample_id, x, z[0], torch.as_tensor(pseudo, dtype=torch.float32),
                                  torch.as_tensor(1 - inside, dtype=torch.float32), box.area, box))
    return out


@dataclass
class TrainState:
    config: TrainConfig
    generator: PromptGenerator
    backbone: PromptableBackbone
    optimizer: torch.optim.Optimizer
    transform_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    epoch: int = 0
    log: list = field(default_factory=list)

    @property
    def t(self) -> float:
        c = self.config
        return barrier_schedule(self.epoch, c.barrier_t0, c.barrier_factor, c.barrier_every_epochs)

    @property
    def lr(self) -> float:
        c = self.config
        return c.lr * (LR_DROP_FACTOR if self.epoch >= c.effective_lr_drop_epoch else 1.0)


def init_state(config: TrainConfig, backbone: PromptableBackbone, gen_config: GeneratorConfig | None = None,
               generator: PromptGenerator | None = None) -> TrainState:
    validate_config(config)
    if generator is None:
        if gen_config is None:
            gen_config = GeneratorConfig(output_shape=backbone.descriptor.embedding_shape,
                                         input_size=backbone.descriptor.input_size)
        # initialisation is governed by the training seed
        gen_config = GeneratorConfig(**{**gen_config.to_dict(), "init_seed": torch_seed(config.seed, "init")})
        generator = PromptGenerator(gen_config, sparse_default=backbone.default_sparse_embedding())
    if tuple(generator.config.output_shape) != tuple(backbone.descriptor.embedding_shape):
        raise ValueError("generator output shape does not match the backbone embedding shape")
    for p in backbone.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(generator.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(config, generator, backbone, opt, rng_stream(config.seed, "transforms"),
                      rng_stream(config.seed, "shuffle"))


def compute_losses(state: TrainState, batch: list[PreparedSample]):
    """Per-batch mean of each loss term, as differentiable tensors."""
    cfg, gen, bb = state.config, state.generator, state.backbone
    x = torch.stack([s.image for s in batch])
    z = torch.stack([s.z_i for s in batch])
    pseudo = torch.stack([s.pseudo for s in batch])
    outside = torch.stack([s.outside for s in batch])
    area = torch.tensor([float(s.inside_area) for s in batch])
    lam = cfg.lambdas

    prompt = gen.generate(x)
    pred = bb.decode(z, prompt)
    l_pseudo = pseudo_label_loss(pred, pseudo, cfg.alpha, cfg.beta).mean()
    zero = pred.new_zeros(())
    l_size = size_loss(pred, area, cfg.eps1, cfg.eps2, PenaltyFunction(cfg.penalty_kind, state.t)).mean() \
        if lam[1] else zero
    l_empty = emptiness_loss(pred, outside).mean() if lam[2] else zero
    if lam[3]:
        ts = [sample_transform(cfg.transform_set, state.transform_rng, cfg.max_translate, cfg.scale_range)
              for _ in batch]
        xt = torch.stack([apply_transform(T, x[k]) for k, T in enumerate(ts)])
        zt = torch.stack([apply_transform(T, z[k]) for k, T in enumerate(ts)])
        pred_t = bb.decode(zt, gen.generate(xt))
        target = torch.stack([apply_transform(T, pred[k].detach()) for k, T in enumerate(ts)])
        l_cons = consistency_loss(pred_t, target).mean()
    else:
        l_cons = zero
    return pred, (l_pseudo, l_size, l_empty, l_cons)


def train_step(batch: list[PreparedSample], state: TrainState) -> tuple[TrainState, LossBreakdown]:
    if not batch:
        raise ValueError("empty batch")
    for g in state.optimizer.param_groups:
        g["lr"] = state.lr
    state.generator.train()
    _, comps = compute_losses(state, batch)
    total, br = total_loss(comps, state.config.lambdas)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss at epoch {state.epoch}: {br.as_dict()}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    return state, br


def run_epoch(state: TrainState, samples: list[PreparedSample]) -> dict:
    t0 = time.perf_counter()
    order = state.shuffle_rng.permutation(len(samples))
    bs = state.config.batch_size
    sums = np.zeros(5)
    for i in range(0, len(order), bs):
        batch = [samples[k] for k in order[i:i + bs]]
        _, br = train_step(batch, state)
        sums += len(batch) * np.array([br.pseudo, br.size, br.empty, br.cons, br.total])
    means = sums / len(samples)
    rec = {"epoch": state.epoch, "t": state.t, "lr": state.lr,
           **dict(zip(("pseudo", "size", "empty", "cons", "total"), means.tolist())),
           "wall_time": time.perf_counter() - t0}
    state.log.append(rec)
    state.epoch += 1
    return rec


def train(config: TrainConfig, samples: list[PreparedSample], backbone: PromptableBackbone,
          gen_config: GeneratorConfig | None = None, log_path=None, callback=None):
    """Train a fresh generator for ``config.epochs`` epochs; returns (generator, log).

    The generator from the final epoch is returned. With ``log_path`` each
    epoch record is appended there as one JSON line.
    """
    state = init_state(config, backbone, gen_config)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("")
    for _ in range(config.epochs):
        rec = run_epoch(state, samples)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")
        if callback is not None:
            callback(state, rec)
    state.generator.eval()
    return state.generator, state.log


@torch.no_grad()
def predict(generator: PromptGenerator, backbone: PromptableBackbone, images, z_i=None, batch_size: int = 8):
    """Probability maps (N, H, W) with the generator replacing the prompt encoder."""
    generator.eval()
    x = torch.stack([image_tensor(im)[0] for im in images])
    if z_i is None:
        z_i = backbone.encode_image(x)
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(backbone.decode(z_i[i:i + batch_size], generator.generate(x[i:i + batch_size])))
    return torch.cat(outs).numpy()


def validation_gate(pred_masks, boxes, min_ratio: float = 0.5) -> tuple[float, float, bool]:
    """Box-level Dice and mean foreground-to-box size ratio of predictions.

    Dice compares the box around each prediction with the annotated box (in
    percent, an empty prediction scores 0). The ratio is the mean fraction of
    each annotated box covered by predicted foreground. Passes when the ratio
    exceeds ``min_ratio``.
    """
    dices, ratios = [], []
    for m, box in zip(pred_masks, boxes):
        m = np.asarray(m).astype(bool)
        h, w = m.shape
        ann = box_mask(box, h, w)
        if m.any():
            dices.append(dsc(box_mask(box_from_mask(m), h, w), ann))
        else:
            dices.append(0.0)
        ratios.append(float((m & ann.astype(bool)).sum()) / box.area)
    ratio = float(np.mean(ratios)) if ratios else 0.0
    return float(np.mean(dices)) if dices else 0.0, ratio, ratio > min_ratio


def evaluate_generator(generator, backbone, images, gt_masks, sample_ids=None, metrics=("dsc", "assd")) -> dict:
    probs = predict(generator, backbone, images)
    preds = [(p >= 0.5).astype(np.uint8) for p in probs]
    report = evaluate_masks(preds, gt_masks, sample_ids, metrics)
    report["predictions"] = preds
    report["probabilities"] = probs
    return report


def run_trials(config: TrainConfig, train_pool, test_set, backbone: PromptableBackbone,
               n_subsets: int = 3, n_seeds: int = 3, subset_size: int = 20,
               gen_config: GeneratorConfig | None = None, metrics=("dsc", "assd")) -> dict:
    """Repeat training over random training subsets and initialisation seeds.

    ``train_pool`` is a list of PreparedSample; ``test_set`` is
    ``(images, gt_masks, sample_ids)``. Returns one row per trial plus
    ``aggregate`` = (mean, std) of the per-trial mean metrics.
    """
    if len(train_pool) < subset_size:
        raise ValueError(f"need at least {subset_size} training samples, have {len(train_pool)}")
    subset_rng = rng_stream(config.seed, "subset")
    subsets = [sorted(subset_rng.choice(len(train_pool), size=subset_size, replace=False).tolist())
               for _ in range(n_subsets)]
    images, gts, ids = test_set
    rows = []
    for si, subset in enumerate(subsets):
        for seed_idx in range(n_seeds):
            seed = config.seed + 1000 * seed_idx
            cfg = config.replace(seed=seed)
            gen, log = train(cfg, [train_pool[k] for k in subset], backbone, gen_config)
            rep = evaluate_generator(gen, backbone, images, gts, ids, metrics)
            row = {"subset": si, "seed": seed, "train_ids": [train_pool[k].sample_id for k in subset]}
            row.update({m: rep["aggregate"][m][0] for m in metrics})
            rows.append(row)
    agg = {m: aggregate([r[m] for r in rows]) for m in metrics}
    return {"rows": rows, "aggregate": agg}


def parse_band(spec: str) -> tuple[float, float]:
    """``"0"`` or ``"lo-hi"`` in percent, e.g. ``"1.5-3"`` -> (0.015, 0.03)."""
    text = spec.strip()
    parts = text.split("-")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"malformed noise band {spec!r}; expected e.g. 0 or 1.5-3") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or not 0 <= vals[0] <= vals[1] or vals[1] > 100 or \
            (len(parts) == 1 and vals[0] != 0):
        raise ValueError(f"malformed noise band {spec!r}; expected e.g. 0 or 1.5-3")
    return vals[0] / 100.0, vals[1] / 100.0


def noisy_samples(samples, band: tuple[float, float], seed: int, height: int, width: int):
    """Replace each box by a perturbed copy drawn from the ``noise`` stream of ``seed``."""
    rng = rng_stream(seed, "noise")
    lo, hi = band
    return [(sid, image, perturb_box(box, lo, hi, rng, height, width)) for sid, image, box in samples]


def run_noise_ablation(config: TrainConfig, samples, test_set, backbone: PromptableBackbone, bands,
                       seeds=(0,), gen_config: GeneratorConfig | None = None, cache=None,
                       metrics=("dsc",)) -> dict:
    """Train on boxes perturbed within each band and evaluate on clean test masks.

    ``samples`` yields ``(sample_id, image, box)`` with tight boxes; ``bands``
    maps a label to ``(low, high)`` fractions. Returns per-trial rows and a
    per-band ``(mean, std)`` table.
    """
    h, w = backbone.descriptor.input_size
    images, gts, ids = test_set
    rows = []
    for label, band in bands.items():
        for seed in seeds:
            noisy = noisy_samples(samples, band, seed, h, w)
            prepared = prepare_samples(backbone, noisy, cache=cache)
            gen, _ = train(config.replace(seed=seed), prepared, backbone, gen_config)
            rep = evaluate_generator(gen, backbone, images, gts, ids, metrics)
            rows.append({"band": label, "seed": seed, **{m: rep["aggregate"][m][0] for m in metrics}})
    table = {label: {m: aggregate([r[m] for r in rows if r["band"] == label]) for m in metrics}
             for label in bands}
    return {"rows": rows, "table": table}
