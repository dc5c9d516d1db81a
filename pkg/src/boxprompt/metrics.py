"""Dice similarity coefficient and average symmetric surface distance."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    """Dice overlap in percent; two empty masks score 100."""
    a, b = _pair(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / denom


def extract_contour(mask) -> np.ndarray:
    """(N, 2) array of (row, col) boundary pixels, in row-major order.

    A foreground pixel is on the boundary if one of its 4-neighbours is
    background or lies outside the image.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def assd(a, b, both_empty: str = "diagonal") -> float:
    """Average symmetric surface distance in pixels.

    If one contour is empty, every distance from the other contour is the
    image diagonal ``sqrt(H**2 + W**2)``. Two empty masks give the diagonal,
    or 0 with ``both_empty="zero"``.
    """
    a, b = _pair(a, b)
    h, w = a.shape
    diag = math.sqrt(h * h + w * w)
    ca, cb = extract_contour(a), extract_contour(b)
    if len(ca) == 0 and len(cb) == 0:
        if both_empty == "zero":
            return 0.0
        if both_empty != "diagonal":
            raise ValueError(f"unknown both_empty policy {both_empty!r}")
        return diag
    if len(ca) == 0 or len(cb) == 0:
        return diag
    d = cdist(ca, cb)
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(ca) + len(cb)))


def aggregate(values, ddof: int = 1) -> tuple[float, float]:
    """Mean and standard deviation (sample std by default, 0 for one value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list")
    std = float(v.std(ddof=ddof)) if v.size > ddof else 0.0
    return float(v.mean()), std


def evaluate_masks(pred_masks, gt_masks, sample_ids=None, metrics=("dsc", "assd")) -> dict:
    """Per-sample metric rows plus aggregates and empty-case counts."""
    rows = []
    n_both_empty = 0
    for k, (p, g) in enumerate(zip(pred_masks, gt_masks)):
        sid = sample_ids[k] if sample_ids is not None else str(k)
        row = {"sample_id": sid}
        if "dsc" in metrics:
            row["dsc"] = dsc(p, g)
        if "assd" in metrics:
            row["assd"] = assd(p, g)
        n_both_empty += int(not np.any(p) and not np.any(g))
        rows.append(row)
    agg = {m: aggregate([r[m] for r in rows]) for m in metrics} if rows else {}
    return {"rows": rows, "aggregate": agg, "both_empty": n_both_empty}


def write_report(report: dict, path, metrics=("dsc", "assd")) -> Path:
    """Comma-separated table: one row per sample, then ``mean`` and ``std`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", *metrics])
        for r in report["rows"]:
            w.writerow([r["sample_id"], *(f"{r[m]:.6f}" for m in metrics)])
        w.writerow(["mean", *(f"{report['aggregate'][m][0]:.6f}" for m in metrics)])
        w.writerow(["std", *(f"{report['aggregate'][m][1]:.6f}" for m in metrics)])
    return path


def read_report(path) -> dict:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        metrics = header[1:]
        rows, agg = [], {}
        summary = {}
        for rec in rd:
            if rec[0] in ("mean", "std"):
                summary[rec[0]] = [float(x) for x in rec[1:]]
                continue
            rows.append({"sample_id": rec[0], **{m: float(x) for m, x in zip(metrics, rec[1:])}})
    for i, m in enumerate(metrics):
        if "mean" in summary:
            agg[m] = (summary["mean"][i], summary.get("std", [0.0] * len(metrics))[i])
    return {"rows": rows, "aggregate": agg, "metrics": metrics}
