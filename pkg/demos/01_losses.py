"""
Loss terms on hand-made probability maps
========================================

A box on a 32 x 32 grid, a few candidate predictions, and what each loss
term says about them. Writes ``demo_output/penalties.png``.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from boxprompt.domain import BoxAnnotation
from boxprompt.geometry import region_partition
from boxprompt.losses import (PenaltyFunction, barrier_schedule, emptiness_loss, penalty, pseudo_label_loss,
                              size_loss)

out = Path("demo_output")
out.mkdir(exist_ok=True)

box = BoxAnnotation(8, 6, 23, 25)
region = region_partition(box, 32, 32)
inside = torch.tensor(region.inside, dtype=torch.float64)
print(f"box {box.as_tuple()} covers {region.inside_area} of {32 * 32} pixels")

# a filled box, a blob inside it, a hollow ring and a blob that leaks out
yy, xx = np.mgrid[0:32, 0:32]
blob = ((yy - 15.5) / 8) ** 2 + ((xx - 15.5) / 6.5) ** 2 <= 1
ring = region.inside.astype(bool) & ~(((yy - 15.5) / 7) ** 2 + ((xx - 15.5) / 5.5) ** 2 <= 1)
leak = ((yy - 15.5) / 10) ** 2 + ((xx - 20) / 9) ** 2 <= 1
candidates = {"box": inside.numpy(), "blob": blob, "ring": ring, "leak": leak}

t = 5.0
for name, m in candidates.items():
    p = torch.tensor(np.where(m, 0.95, 0.02))
    print(f"{name:5s} size={size_loss(p, region, 0.7, 0.9, PenaltyFunction('logbarrier', t)).item():8.3f} "
          f"empty={emptiness_loss(p, region).item():8.3f} "
          f"pseudo(vs blob)={pseudo_label_loss(p, torch.tensor(blob, dtype=torch.float64)).item():.3f}")

# the extended log-barrier sharpens as t grows
z = torch.linspace(-1.0, 0.5, 400, dtype=torch.float64)
fig, ax = plt.subplots(figsize=(5, 3.5))
for epoch in (0, 50, 100, 199):
    tt = barrier_schedule(epoch, 5.0, 1.1, 5)
    ax.plot(z, penalty(z, PenaltyFunction("logbarrier", tt)), label=f"epoch {epoch}, t={tt:.1f}")
ax.plot(z, penalty(z, PenaltyFunction("relu")), "k--", label="relu")
ax.set_ylim(-1, 6)
ax.set_xlabel("constraint value z (feasible when z <= 0)")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(out / "penalties.png", dpi=100)
print("wrote", out / "penalties.png")
