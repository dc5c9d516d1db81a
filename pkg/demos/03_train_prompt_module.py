"""
Training the prompt module from boxes only
==========================================

Trains the generator on 20 synthetic images with the full loss and with
the pseudo-label loss alone, then evaluates both on 40 held-out images.
Pass a number of epochs on the command line (default 200, a few minutes
per run on one core). Writes ``demo_output/training.png``.
"""

import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from boxprompt.backbone import ToyBackbone
from boxprompt.datapipe import generate_synthetic
from boxprompt.presets import apply_ablation, generator_config, get_preset
from boxprompt.trainer import evaluate_generator, prepare_samples, train, validation_gate

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 200
torch.set_num_threads(1)
out = Path("demo_output")
out.mkdir(exist_ok=True)

data = generate_synthetic(60, rng=np.random.default_rng(123), split_fractions=(1 / 3, 0, 2 / 3))
train_set, test_set = data.split("train"), data.split("test")
backbone = ToyBackbone()
preset = get_preset("desk-synthetic")
gen_cfg = generator_config(preset, backbone)

# only the boxes of the training images are used
samples = prepare_samples(backbone, [(e.sample_id, e.image, e.box) for e in train_set])

results = {}
for ablation in ("pseudo-only", "full"):
    cfg = apply_ablation(preset.train, ablation).replace(epochs=epochs)
    gen, log = train(cfg, samples, backbone, gen_cfg)
    rep = evaluate_generator(gen, backbone, [e.image for e in test_set], [e.mask for e in test_set],
                             [e.sample_id for e in test_set])
    _, ratio, ok = validation_gate(rep["predictions"], [e.box for e in test_set])
    results[ablation] = (rep, log)
    (d, ds), (a, as_) = rep["aggregate"]["dsc"], rep["aggregate"]["assd"]
    print(f"{ablation:12s} DSC {d:.2f} ± {ds:.2f}  ASSD {a:.2f} ± {as_:.2f}  fg/box {ratio:.2f} gate={ok}")

fig, axes = plt.subplots(1, 4, figsize=(14, 3.5))
for ablation, (rep, log) in results.items():
    axes[0].plot([r["total"] for r in log], label=ablation)
axes[0].set_title("training loss")
axes[0].set_yscale("log")
axes[0].legend()
for ax, k in zip(axes[1:], range(3)):
    e = test_set[k]
    ax.imshow(e.image.pixels[0], cmap="gray", vmin=0, vmax=255)
    ax.contour(e.mask, levels=[0.5], colors="r", linewidths=1)
    ax.contour(results["full"][0]["predictions"][k], levels=[0.5], colors="c", linewidths=1)
    ax.contour(results["pseudo-only"][0]["predictions"][k], levels=[0.5], colors="y", linewidths=1)
    ax.set_title(e.sample_id)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "training.png", dpi=90)
print("red = truth, cyan = full loss, yellow = pseudo-label loss only")
