import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from boxprompt.domain import BoxAnnotation
from boxprompt.geometry import region_partition
from boxprompt.losses import (PROB_FLOOR, PenaltyFunction, barrier_schedule, consistency_loss,
                              emptiness_loss, penalty, pseudo_label_loss, size_loss, total_loss)

from .oracles import central_diff, loop_bce_dice, loop_emptiness


def rand_map(rng, shape=(8, 8), lo=0.05, hi=0.95):
    return torch.tensor(rng.uniform(lo, hi, size=shape), dtype=torch.float64)


def test_pseudo_loss_zero_on_exact_match():
    y = torch.tensor(np.random.default_rng(0).integers(0, 2, (8, 8)), dtype=torch.float64)
    assert pseudo_label_loss(y, y, clamp=False).item() == 0.0


def test_pseudo_loss_maximal_disagreement():
    y = torch.tensor(np.random.default_rng(1).integers(0, 2, (8, 8)), dtype=torch.float64)
    ce = pseudo_label_loss(1 - y, y, alpha=1, beta=0).item()
    assert ce == pytest.approx(-math.log(PROB_FLOOR), rel=1e-6)
    dice = pseudo_label_loss(1 - y, y, alpha=0, beta=1).item()
    # Dice uses +1 smoothing, so full disagreement gives 1 - 1/(N + 1)
    assert dice == pytest.approx(1 - 1 / 65, abs=1e-12)


def test_pseudo_loss_matches_pixel_loop():
    rng = np.random.default_rng(2)
    for _ in range(10):
        p = rand_map(rng, lo=0, hi=1)
        y = torch.tensor(rng.integers(0, 2, (8, 8)), dtype=torch.float64)
        a, b = rng.uniform(0, 2, 2)
        got = pseudo_label_loss(p, y, a, b).item()
        assert got == pytest.approx(loop_bce_dice(p.numpy(), y.numpy(), a, b), abs=1e-6)


def test_pseudo_loss_shape_mismatch():
    with pytest.raises(ValueError):
        pseudo_label_loss(torch.zeros(4, 4), torch.zeros(4, 5))


def test_penalty_relu():
    p = PenaltyFunction("relu")
    assert penalty(torch.tensor(-3.0), p).item() == 0
    assert penalty(torch.tensor(0.05 * 400), p).item() == pytest.approx(20.0)


@pytest.mark.parametrize("t", [2.0, 5.0, 50.0])
def test_logbarrier_junction(t):
    p = PenaltyFunction("logbarrier", t)
    z0 = -1 / t ** 2
    log_side = -math.log(-z0) / t
    lin_side = t * z0 - math.log(1 / t ** 2) / t + 1 / t
    assert abs(log_side - lin_side) < 1e-9
    zs = torch.tensor([z0 - 1e-12, z0, z0 + 1e-12], dtype=torch.float64)
    vals = penalty(zs, p)
    assert (vals.max() - vals.min()).item() < 1e-9


def test_logbarrier_values():
    p = PenaltyFunction("logbarrier", 5.0)
    assert penalty(torch.tensor(-1.0, dtype=torch.float64), p).item() == 0.0
    assert penalty(torch.tensor(-math.e, dtype=torch.float64), p).item() == pytest.approx(-0.2)


def test_logbarrier_monotone_and_hard_limit():
    zs = torch.linspace(-5, 5, 2001, dtype=torch.float64)
    for t in (1.0, 5.0, 50.0):
        v = penalty(zs, PenaltyFunction("logbarrier", t))
        assert torch.all(v[1:] >= v[:-1] - 1e-12)
    neg = [abs(penalty(torch.tensor(-0.5, dtype=torch.float64), PenaltyFunction("logbarrier", t)).item())
           for t in (5, 50, 500, 5000)]
    pos = [penalty(torch.tensor(0.5, dtype=torch.float64), PenaltyFunction("logbarrier", t)).item()
           for t in (5, 50, 500, 5000)]
    assert neg == sorted(neg, reverse=True) and neg[-1] < 1e-3
    assert pos == sorted(pos) and pos[-1] > 2000


def test_logbarrier_gradient_finite_everywhere():
    z = torch.linspace(-3, 3, 101, dtype=torch.float64, requires_grad=True)
    penalty(z, PenaltyFunction("logbarrier", 5.0)).sum().backward()
    assert torch.all(torch.isfinite(z.grad))


def test_size_loss_relu_band():
    region = region_partition(BoxAnnotation(2, 2, 11, 11), 16, 16)   # area 100
    relu = PenaltyFunction("relu")
    pred = torch.full((16, 16), 80.0 / 256, dtype=torch.float64)
    assert size_loss(pred, region, 0.7, 0.9, relu).item() == pytest.approx(0.0, abs=1e-12)
    pred = torch.full((16, 16), 95.0 / 256, dtype=torch.float64)
    assert size_loss(pred, region, 0.7, 0.9, relu).item() == pytest.approx(0.05 * 100)


def test_size_loss_logbarrier_sweep():
    region = region_partition(BoxAnnotation(0, 0, 9, 9), 16, 16)
    area = region.inside_area
    interior, outside_grad = [], []
    for t in (5.0, 50.0, 500.0):
        p = PenaltyFunction("logbarrier", t)
        pred = torch.full((16, 16), 0.8 * area / 256, dtype=torch.float64)
        interior.append(abs(size_loss(pred, region, 0.7, 0.9, p).item()))
        pred = torch.full((16, 16), 0.95 * area / 256, dtype=torch.float64, requires_grad=True)
        size_loss(pred, region, 0.7, 0.9, p).backward()
        outside_grad.append(pred.grad[0, 0].item())
    assert interior == sorted(interior, reverse=True)
    assert interior[-1] < 0.05
    ratios = np.array(outside_grad) / np.array([5.0, 50.0, 500.0])
    assert np.allclose(ratios, ratios[0], rtol=1e-2)


def test_emptiness_examples():
    region = region_partition(BoxAnnotation(0, 0, 3, 3), 8, 8)
    pred = torch.zeros(8, 8, dtype=torch.float64)
    assert emptiness_loss(pred, region).item() == pytest.approx(0.0, abs=1e-5)
    pred[6, 6] = 0.5
    assert emptiness_loss(pred, region).item() == pytest.approx(math.log(2), abs=1e-4)
    pred = torch.zeros(8, 8, dtype=torch.float64)
    pred[1, 1] = 0.9  # inside the box: ignored
    assert emptiness_loss(pred, region).item() < 1e-4


def test_emptiness_matches_pixel_loop():
    rng = np.random.default_rng(3)
    region = region_partition(BoxAnnotation(1, 2, 5, 6), 8, 8)
    for _ in range(10):
        p = rand_map(rng, lo=0, hi=1)
        assert emptiness_loss(p, region).item() == pytest.approx(loop_emptiness(p.numpy(), region.outside), abs=1e-6)


def test_consistency_examples():
    a = torch.rand(8, 8, dtype=torch.float64)
    assert consistency_loss(a, a.clone()).item() == 0
    b = a.clone()
    b[3, 4] += 0.1
    assert consistency_loss(a, b).item() == pytest.approx(0.01)
    with pytest.raises(ValueError):
        consistency_loss(a, a[:4])


def test_total_loss_weights():
    total, br = total_loss((2.0, 3.0, 5.0, 7.0), (1, 0.01, 0.001, 0.001))
    assert br.total == pytest.approx(2 + 0.03 + 0.005 + 0.007, abs=1e-15)
    total, br = total_loss((2.0, float("inf"), 5.0, 7.0), (1, 0, 0, 0))
    assert br.total == 2.0
    total, br = total_loss((0.0, 0.0, 0.0, 0.0), (1, 0.01, 0.001, 0.001))
    assert br.total == 0.0
    with pytest.raises(ValueError):
        total_loss((1, 1, 1, 1), (1, -1, 0, 0))


@given(st.lists(st.floats(0, 1e4), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=4, max_size=4))
@settings(max_examples=200, deadline=None)
def test_total_loss_decomposition(comps, lams):
    _, br = total_loss(comps, lams)
    expected = sum(l * c for l, c in zip(lams, comps))
    assert br.total == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_barrier_schedule():
    assert barrier_schedule(0, 5, 1.1, 5) == 5
    assert barrier_schedule(4, 5, 1.1, 5) == 5
    assert barrier_schedule(5, 5, 1.1, 5) == 5.5
    assert barrier_schedule(3, 5, 2, 1) == 40
    ts = [barrier_schedule(e, 5, 1.1, 5) for e in range(200)]
    assert ts == sorted(ts)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rand_map(rng, lo=0, hi=1)
    y = torch.tensor(rng.integers(0, 2, (8, 8)), dtype=torch.float64)
    region = region_partition(BoxAnnotation(1, 1, 6, 5), 8, 8)
    assert pseudo_label_loss(p, y).item() >= 0
    assert size_loss(p, region, 0.7, 0.9, PenaltyFunction("relu")).item() >= 0
    assert emptiness_loss(p, region).item() >= 0
    assert consistency_loss(p, rand_map(rng)).item() >= 0


def _check_grad(fn, p, tol=1e-4):
    p = p.clone().requires_grad_(True)
    fn(p).backward()
    num = central_diff(lambda arr: fn(torch.tensor(arr)).item(), p.detach().numpy())
    analytic = p.grad.numpy()
    rel = np.abs(analytic - num).max() / max(np.abs(num).max(), 1e-12)
    assert rel < tol, rel


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    region = region_partition(BoxAnnotation(2, 1, 6, 6), 8, 8)
    y = torch.tensor(rng.integers(0, 2, (8, 8)), dtype=torch.float64)
    other = rand_map(rng)
    for t in (5.0, 50.0):
        for _ in range(3):
            p = rand_map(rng)
            _check_grad(lambda q: pseudo_label_loss(q, y, 1.0, 1.0), p)
            _check_grad(lambda q: size_loss(q, region, 0.7, 0.9, PenaltyFunction("logbarrier", t)), p)
            _check_grad(lambda q: emptiness_loss(q, region), p)
            _check_grad(lambda q: consistency_loss(q, other), p)
