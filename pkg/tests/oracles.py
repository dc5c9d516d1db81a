"""Slow scalar re-implementations used as independent test oracles."""

import math

import numpy as np

FLOOR = 1e-7


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def loop_bce_dice(p, y, alpha, beta):
    h, w = p.shape
    ce = 0.0
    inter = sp = sy = 0.0
    for i in range(h):
        for j in range(w):
            q = min(max(p[i, j], FLOOR), 1 - FLOOR)
            ce += -(y[i, j] * math.log(q) + (1 - y[i, j]) * math.log(1 - q))
            inter += p[i, j] * y[i, j]
            sp += p[i, j]
            sy += y[i, j]
    ce /= h * w
    dice = 1 - (2 * inter + 1) / (sp + sy + 1)
    return alpha * ce + beta * dice


def loop_emptiness(p, outside):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if outside[i, j]:
                q = min(max(p[i, j], FLOOR), 1 - FLOOR)
                total -= math.log(1 - q)
    return total


def loop_contour(mask):
    h, w = mask.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    pts.append((r, c))
                    break
    return pts


def loop_dsc(a, b):
    na = nb = nab = 0
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            na += bool(a[r, c])
            nb += bool(b[r, c])
            nab += bool(a[r, c]) and bool(b[r, c])
    if na + nb == 0:
        return 100.0
    return 200.0 * nab / (na + nb)


def loop_assd(a, b):
    h, w = a.shape
    diag = math.sqrt(h * h + w * w)
    ca, cb = loop_contour(a), loop_contour(b)
    if not ca or not cb:
        return diag

    def d(p, pts):
        return min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in pts)

    return (sum(d(p, cb) for p in ca) + sum(d(q, ca) for q in cb)) / (len(ca) + len(cb))
