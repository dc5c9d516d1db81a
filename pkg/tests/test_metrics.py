import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from boxprompt.metrics import aggregate, assd, dsc, evaluate_masks, extract_contour, read_report, write_report

from .oracles import loop_assd, loop_contour, loop_dsc


def _masks_4x4(max_fg=4):
    cells = list(itertools.product(range(4), range(4)))
    out = []
    for k in range(max_fg + 1):
        for fg in itertools.combinations(cells, k):
            m = np.zeros((4, 4), bool)
            for rc in fg:
                m[rc] = True
            out.append(m)
    return out


def test_exhaustive_4x4_against_loop_oracle():
    masks = _masks_4x4()
    assert len(masks) == 1 + 16 + 120 + 560 + 1820
    rng = np.random.default_rng(0)
    # every mask against itself and against a random partner
    partners = rng.integers(len(masks), size=len(masks))
    for m, j in zip(masks, partners):
        assert [tuple(p) for p in extract_contour(m)] == loop_contour(m)
        for other in (m, masks[j]):
            assert dsc(m, other) == loop_dsc(m, other)
            assert assd(m, other) == pytest.approx(loop_assd(m, other), abs=1e-12)


def test_random_16x16_pairs_against_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        b = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        assert [tuple(p) for p in extract_contour(a)] == loop_contour(a)
        assert dsc(a, b) == pytest.approx(loop_dsc(a, b), abs=1e-12)
        assert assd(a, b) == pytest.approx(loop_assd(a, b), abs=1e-9)


def test_dsc_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    b = np.zeros((20, 20), bool)
    b[:10, 5:15] = True
    assert dsc(a, a) == 100
    assert dsc(a, ~a) == 0
    assert dsc(a, b) == 50
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 100
    with pytest.raises(ValueError):
        dsc(np.zeros((3, 3)), np.zeros((3, 4)))


def test_contour_examples():
    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    c = {tuple(p) for p in extract_contour(m)}
    assert len(c) == 8 and (3, 3) not in c
    one = np.zeros((5, 5), bool)
    one[4, 0] = True
    assert extract_contour(one).tolist() == [[4, 0]]
    assert extract_contour(np.zeros((5, 5))).shape == (0, 2)


def test_assd_examples():
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert assd(a, b) == 5.0
    assert assd(a, a) == 0
    gt = np.zeros((256, 256), bool)
    gt[100:120, 100:130] = True
    assert assd(np.zeros_like(gt), gt) == pytest.approx(362.04, abs=0.005)
    assert assd(np.zeros_like(gt), gt) == math.sqrt(2 * 256 ** 2)


def test_assd_both_empty_policy():
    z = np.zeros((3, 4))
    assert assd(z, z) == 5.0
    assert assd(z, z, both_empty="zero") == 0.0
    with pytest.raises(ValueError):
        assd(z, z, both_empty="nan")


def test_one_pixel_difference_is_small():
    a = np.zeros((64, 64), bool)
    a[10:40, 10:40] = True
    b = a.copy()
    b[10, 25] = False
    assert 0 < assd(a, b) < 1


mask16 = arrays(bool, (16, 16))


@settings(max_examples=200, deadline=None)
@given(mask16, mask16)
def test_symmetry_and_range(a, b):
    assert dsc(a, b) == dsc(b, a)
    assert 0 <= dsc(a, b) <= 100
    assert assd(a, b) == pytest.approx(assd(b, a), abs=1e-12)
    if a.any():
        assert dsc(a, a) == 100 and assd(a, a) == 0


@settings(max_examples=100, deadline=None)
@given(mask16, mask16, st.integers(0, 8), st.integers(0, 8))
def test_translation_invariance(a, b, dy, dx):
    big_a = np.zeros((32, 32), bool)
    big_b = np.zeros((32, 32), bool)
    big_a[4:20, 4:20], big_b[4:20, 4:20] = a, b
    sa = np.roll(big_a, (dy, dx), axis=(0, 1))
    sb = np.roll(big_b, (dy, dx), axis=(0, 1))
    assert dsc(sa, sb) == dsc(big_a, big_b)
    assert assd(sa, sb) == pytest.approx(assd(big_a, big_b), abs=1e-9)


def test_aggregate():
    assert aggregate([50, 50, 50]) == (50, 0)
    assert aggregate([0, 100])[0] == 50
    assert aggregate([7.0]) == (7.0, 0.0)
    rng = np.random.default_rng(2)
    v = rng.normal(size=37).tolist()
    mean = sum(v) / len(v)
    std = math.sqrt(sum((x - mean) ** 2 for x in v) / (len(v) - 1))
    m, s = aggregate(v)
    assert m == pytest.approx(mean, abs=1e-9) and s == pytest.approx(std, abs=1e-9)
    assert aggregate(v, ddof=0)[1] == pytest.approx(math.sqrt(sum((x - mean) ** 2 for x in v) / len(v)), abs=1e-9)
    with pytest.raises(ValueError):
        aggregate([])


def test_report_round_trip(tmp_path):
    a = np.zeros((8, 8), bool)
    a[2:5, 2:6] = True
    rep = evaluate_masks([a, np.zeros_like(a)], [a, np.zeros_like(a)], ["s1", "s2"])
    assert rep["both_empty"] == 1
    back = read_report(write_report(rep, tmp_path / "r.csv"))
    assert [r["sample_id"] for r in back["rows"]] == ["s1", "s2"]
    assert back["rows"][1]["assd"] == pytest.approx(math.sqrt(128), abs=1e-6)
    assert back["aggregate"]["dsc"] == pytest.approx(rep["aggregate"]["dsc"], abs=1e-6)
