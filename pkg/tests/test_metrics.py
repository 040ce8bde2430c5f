import itertools
from fractions import Fraction

import numpy as np
import pytest

from msseg.errors import GeometryError, InputError
from msseg.metrics import (aggregate, boundary, dice, evaluate, format_csv, format_table,
                           mean_surface_distance)
from msseg.volume import LabelVolume

FACES = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def lv(data, spacing=(1, 1, 1), n=None):
    data = np.asarray(data)
    return LabelVolume(data, spacing, num_classes=n or int(data.max()) + 1)


# --- exhaustive oracles ---------------------------------------------------------

def oracle_dice(a, b):
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return None
    return float(Fraction(2 * int((a & b).sum()), total))


def oracle_boundary(mask):
    pts = []
    shape = mask.shape
    for idx in itertools.product(*map(range, shape)):
        if not mask[idx]:
            continue
        for d in FACES:
            nb = tuple(i + o for i, o in zip(idx, d))
            if any(c < 0 or c >= s for c, s in zip(nb, shape)) or not mask[nb]:
                pts.append(idx)
                break
    return np.array(pts, dtype=np.float64)


def oracle_msd(a, b, spacing):
    if not a.any() or not b.any():
        return None
    pa = oracle_boundary(a) * spacing
    pb = oracle_boundary(b) * spacing
    dist = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return (dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(pa) + len(pb))


def test_oracle_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(1, 11, 3))
        spacing = np.round(rng.uniform(0.5, 3.0, 3), 3)
        fill = rng.uniform(0.05, 0.9)
        a = rng.random(shape) < fill
        b = rng.random(shape) < fill
        pred, ref = lv(a.astype(int), spacing, 2), lv(b.astype(int), spacing, 2)
        assert dice(pred, ref, 1) == oracle_dice(a, b)
        got, want = mean_surface_distance(pred, ref, 1), oracle_msd(a, b, spacing)
        if want is None:
            assert got is None
        else:
            assert abs(got - want) <= 1e-9


# --- examples -----------------------------------------------------------------

def test_dice_examples():
    a = np.zeros((4, 1, 1), int)
    b = np.zeros((4, 1, 1), int)
    a[0:2] = 1
    b[1:3] = 1
    assert dice(lv(a), lv(b), 1) == 0.5
    assert dice(lv(a), lv(a), 1) == 1.0
    c = np.zeros((4, 1, 1), int)
    c[3] = 1
    assert dice(lv(a), lv(c), 1) == 0.0


def test_dice_undefined():
    z = lv(np.zeros((3, 3, 3), int), n=3)
    assert dice(z, z, 2) is None


@pytest.mark.parametrize("spacing, expected", [((1, 1, 1), 3.0), ((2, 1, 1), 6.0)])
def test_msd_single_voxels(spacing, expected):
    a = np.zeros((6, 3, 3), int)
    b = np.zeros((6, 3, 3), int)
    a[1, 1, 1] = 1
    b[4, 1, 1] = 1
    assert mean_surface_distance(lv(a, spacing), lv(b, spacing), 1) == expected


def test_msd_identical_and_empty():
    a = np.zeros((5, 5, 5), int)
    a[1:4, 1:4, 1:4] = 1
    assert mean_surface_distance(lv(a), lv(a), 1) == 0.0
    assert mean_surface_distance(lv(a), lv(np.zeros_like(a), n=2), 1) is None


def test_boundary_definition():
    a = np.zeros((5, 5, 5), bool)
    a[1:4, 1:4, 1:4] = True
    b = boundary(a)
    assert b.sum() == 26 and not b[2, 2, 2]
    # the grid border counts as outside
    assert boundary(np.ones((3, 3, 3), bool)).sum() == 26


def test_symmetry():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a = rng.integers(0, 3, (6, 7, 5))
        b = rng.integers(0, 3, (6, 7, 5))
        pa, pb = lv(a, (1, 1.5, 2), 3), lv(b, (1, 1.5, 2), 3)
        for c in (1, 2):
            assert dice(pa, pb, c) == dice(pb, pa, c)
            assert abs(mean_surface_distance(pa, pb, c) - mean_surface_distance(pb, pa, c)) <= 1e-12


def test_geometry_mismatch():
    with pytest.raises(GeometryError, match="axis Y"):
        dice(lv(np.zeros((3, 3, 3), int)), lv(np.zeros((3, 4, 3), int)), 1)


# --- reports --------------------------------------------------------------------

def test_evaluate_identical():
    ref = lv(np.random.default_rng(0).integers(0, 4, (8, 8, 4)))
    r = evaluate(ref, ref)
    assert r.classes == [1, 2, 3]
    assert all(r.dice[c] == 1.0 and r.msd[c] == 0.0 for c in r.classes)


def test_evaluate_absent_class():
    ref = lv(np.random.default_rng(0).integers(0, 2, (5, 5, 5)), n=3)
    r = evaluate(ref, ref)
    assert r.dice[2] is None and r.msd[2] is None


def test_evaluate_needs_classes():
    with pytest.raises(InputError):
        evaluate(lv(np.zeros((2, 2, 2), int), n=1), lv(np.zeros((2, 2, 2), int), n=1))


def test_aggregate_skips_undefined():
    ref = lv(np.random.default_rng(1).integers(0, 3, (6, 6, 6)))
    r1 = evaluate(ref, ref, case="a")
    r2 = evaluate(ref, ref, case="b")
    r2.dice[2] = None
    r1.dice[1] = 0.5
    s = aggregate([r1, r2])
    assert s.dice[1] == (0.75, 0.25)
    assert s.dice[2] == (1.0, 0.0)


def test_table_and_csv_agree():
    rng = np.random.default_rng(3)
    ref = lv(rng.integers(0, 4, (9, 9, 5)), (1, 1, 2), 5)
    pred = lv(rng.integers(0, 4, (9, 9, 5)), (1, 1, 2), 5)
    r = evaluate(pred, ref)
    table = format_table(r).splitlines()
    csv_rows = [line.split(",") for line in format_csv(r).splitlines()[1:]]
    dice_cells = table[1].split()[1:]
    msd_cells = table[2].split()[2:]
    for (_, c, d, m), dc, mc in zip(csv_rows, dice_cells, msd_cells):
        if d == "n/a":
            assert dc == "n/a" and mc == "n/a" and m == "n/a"
        else:
            assert f"{float(d):.4f}" == dc and f"{float(m):.4f}" == mc
    assert csv_rows[-1][2:] == ["n/a", "n/a"]
    assert format_csv(r).splitlines()[0] == "case,class,dice,msd_mm"


def test_table_multiple_reports():
    ref = lv(np.random.default_rng(0).integers(0, 3, (5, 5, 5)))
    text = format_table([evaluate(ref, ref), evaluate(ref, ref)], {1: "WM", 2: "GM"})
    assert "WM" in text and "1.0000 ± 0.0000" in text
