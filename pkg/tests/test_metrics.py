import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from vesseldistill.metrics import (ConfusionCounts, MetricsReport, accuracy, cl_dice, confusion,
                                   dsc, evaluate, gwd, hd95, jaccard, smd, volume_key)
from vesseldistill.errors import DimensionError
from vesseldistill.skeleton import is_simple, skeletonize3d, thin
from vesseldistill.transport import sinkhorn, sinkhorn_smd, subsample
from vesseldistill.volume import Volume, write_volume


def loop_confusion(p, g):
    tp = tn = fp = fn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def random_pair(seed, shape=(6, 6, 6), density=None):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.1, 0.6) if density is None else density
    return rng.random(shape) < d, rng.random(shape) < d


def brute_ot(a, b):
    """Exact optimal transport between equal-size uniform clouds: best permutation."""
    C = ((a[:, None] - b[None]) ** 2).sum(-1)
    n = len(a)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def boundary_loop(m):
    out = np.zeros_like(m)
    for idx in np.argwhere(m):
        for ax in range(3):
            for s in (-1, 1):
                j = idx.copy()
                j[ax] += s
                if j[ax] < 0 or j[ax] >= m.shape[ax] or not m[tuple(j)]:
                    out[tuple(idx)] = True
    return out


def brute_hd95(p, g):
    bp, bg = np.argwhere(boundary_loop(p)), np.argwhere(boundary_loop(g))
    d = np.sqrt(((bp[:, None].astype(float) - bg[None]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([d.min(1), d.min(0)]), 95))


# ---------------------------------------------------------------- confusion


def test_confusion_examples():
    m = np.random.default_rng(0).random((4, 4, 4)) > 0.5
    c = confusion(m, m)
    assert c.FP == c.FN == 0
    c = confusion(np.ones((2, 2, 2), bool), np.zeros((2, 2, 2), bool))
    assert c.FP == 8 and c.total == 8
    with pytest.raises(DimensionError):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_confusion_loop_oracle(seed):
    p, g = random_pair(seed, (4, 4, 4))
    c = confusion(p, g)
    assert (c.TP, c.TN, c.FP, c.FN) == loop_confusion(p, g)


def test_scores_hand_arithmetic():
    c = ConfusionCounts(TP=3, TN=10, FP=1, FN=2)
    assert dsc(c) == pytest.approx(6 / 9)
    assert jaccard(c) == 0.5
    assert accuracy(c) == 13 / 16
    e = ConfusionCounts(0, 8, 0, 0)
    assert dsc(e) == jaccard(e) == accuracy(e) == 1.0
    m = np.zeros((3, 3, 3), bool)
    m[1, 1] = True
    c = confusion(m, m)
    assert dsc(c) == jaccard(c) == accuracy(c) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_jaccard_dice_identity(seed):
    p, g = random_pair(seed)
    c = confusion(p, g)
    d = dsc(c)
    assert abs(jaccard(c) - d / (2 - d)) < 1e-12


# ---------------------------------------------------------------- hd95


def test_hd95_examples():
    m = np.zeros((8, 8, 8), bool)
    m[2:5, 2:6, 3] = True
    assert hd95(m, m) == 0
    a, b = np.zeros((10, 3, 3), bool), np.zeros((10, 3, 3), bool)
    a[1, 1, 1], b[6, 1, 1] = True, True
    assert hd95(a, b) == 5.0
    assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == 10.0
    assert hd95(a, np.zeros_like(a), return_flag=True) == (math.inf, True)


@pytest.mark.parametrize("seed", range(8))
def test_hd95_all_pairs_oracle(seed):
    p, g = random_pair(seed, (6, 5, 7), density=0.3)
    assert hd95(p, g) == pytest.approx(brute_hd95(p, g), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_hd95_symmetric(seed):
    p, g = random_pair(seed)
    if p.any() and g.any():
        assert hd95(p, g) == hd95(g, p)


# ---------------------------------------------------------------- skeleton


def test_skeleton_single_voxel_and_line():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert np.array_equal(thin(m), m)
    line = np.zeros((5, 5, 12), bool)
    line[2, 2, 1:11] = True
    assert np.array_equal(thin(line), line)


def test_skeleton_of_bar_is_axis():
    bar = np.zeros((9, 9, 24), bool)
    bar[2:7, 2:7, 2:22] = True
    sk = thin(bar)
    pts = np.argwhere(sk)
    assert len(pts) > 0
    assert np.all(np.hypot(pts[:, 0] - 4, pts[:, 1] - 4) <= 1.0)
    assert ndimage.label(sk, np.ones((3, 3, 3)))[1] == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_thinning_properties(seed):
    rng = np.random.default_rng(seed)
    m = ndimage.binary_dilation(rng.random((7, 7, 7)) > 0.85, iterations=1)
    sk = thin(m)
    full = np.ones((3, 3, 3))
    assert np.all(m[sk])  # subset
    assert ndimage.label(sk, full)[1] == ndimage.label(m, full)[1]
    # fixpoint: no remaining voxel is deletable
    padded = np.pad(sk, 1)
    for z, y, x in np.argwhere(padded):
        nb = padded[z - 1:z + 2, y - 1:y + 2, x - 1:x + 2]
        assert not (is_simple(nb) and nb.sum() > 2)
    cloud = skeletonize3d(m, "ground_truth")
    assert cloud.source == "ground_truth" and np.all(m[tuple(cloud.points.T)])


# ---------------------------------------------------------------- clDice


def _tube():
    m = np.zeros((11, 11, 20), bool)
    m[5, 5, 2:18] = True
    m[5, 5:9, 17] = True
    return m


def test_cl_dice_examples():
    t = _tube()
    assert cl_dice(t, t) == 1.0
    other = np.zeros_like(t)
    other[1, 1, 2:18] = True
    assert cl_dice(t, other) == 0.0
    dilated = ndimage.binary_dilation(t, ndimage.generate_binary_structure(3, 1))
    assert cl_dice(dilated, t) == 1.0
    assert dsc(confusion(dilated, t)) < 1
    assert cl_dice(t, np.zeros_like(t), return_flag=True) == (0.0, True)


def test_cl_dice_self_on_phantoms():
    from vesseldistill.phantom import banded_phantom
    for s in range(3):
        _, _, lab = banded_phantom(s, (32, 32, 32))
        assert cl_dice(lab.voxels, lab.voxels) == 1.0


# ---------------------------------------------------------------- transport


def test_sinkhorn_single_points_and_identical():
    a, b = np.array([[0.0, 0, 0]]), np.array([[3.0, 4, 0]])
    assert sinkhorn_smd(a, b, eps=1e-3) == pytest.approx(25.0, abs=1e-12)
    pts = np.random.default_rng(0).integers(0, 10, (12, 3)).astype(float)
    pts = np.unique(pts, axis=0)
    assert sinkhorn_smd(pts, pts, eps=1e-2) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_sinkhorn_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    a, b = rng.uniform(0, 5, (n, 3)), rng.uniform(0, 5, (n, 3))
    ref = brute_ot(a, b)
    assert abs(sinkhorn_smd(a, b, eps=1e-3) - ref) <= 0.01 * ref + 1e-9


def test_sinkhorn_symmetric_and_monotone():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 8, (15, 3)), rng.uniform(0, 8, (11, 3))
    assert sinkhorn_smd(a, b) == pytest.approx(sinkhorn_smd(b, a), rel=1e-6)
    base = _tube()
    prev = -1.0
    for k in range(1, 5):
        moved = np.roll(base, k, axis=0)
        c = gwd(moved, base)
        assert c >= prev - 1e-9
        prev = c


def test_sinkhorn_flags():
    res = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), 1e-3, max_iter=1, tol=0.0)
    assert not res.converged
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((1, 1)), 0.0)
    with pytest.raises(ValueError):
        sinkhorn_smd(np.zeros((0, 3)), np.zeros((1, 3)))
    assert len(subsample(np.zeros((4001, 3)))) <= 2000
    t = _tube()
    assert gwd(t, np.zeros_like(t), return_flag=True) == (math.inf, True)
    assert smd is gwd


# ---------------------------------------------------------------- evaluate


def _write_pairs(tmp_path, masks, preds):
    gt_dir, pred_dir = tmp_path / "gt", tmp_path / "pred"
    gt_dir.mkdir()
    pred_dir.mkdir()
    for i, (m, p) in enumerate(zip(masks, preds)):
        write_volume(Volume(m.astype(np.uint8), kind="label"), gt_dir / f"test_{i:04d}_label.vvol")
        write_volume(Volume(p.astype(np.float32), kind="probability"), pred_dir / f"test_{i:04d}_prob.vvol")
    return pred_dir, gt_dir


def test_evaluate_identical(tmp_path):
    t = _tube()
    pred_dir, gt_dir = _write_pairs(tmp_path, [t, np.roll(t, 2, axis=1)], [t, np.roll(t, 2, axis=1)])
    rep = evaluate(pred_dir, gt_dir, eps=1e-3)
    agg = rep.aggregate()
    for k in ("DSC", "Accuracy", "Jaccard", "Cl_Dice"):
        assert agg[k]["mean"] == 1.0
    assert agg["HD95"]["mean"] == 0.0 and agg["GWD"]["mean"] < 1e-6
    assert "1.000 ± 0.000" in rep.table("self")


def test_evaluate_aggregate_and_skips(tmp_path, caplog):
    t = _tube()
    preds = [t, ndimage.binary_dilation(t), np.roll(t, 1, axis=0)]
    pred_dir, gt_dir = _write_pairs(tmp_path, [t, t, t], preds)
    write_volume(Volume(t.astype(np.float32), kind="probability"), pred_dir / "orphan_prob.vvol")
    rep = evaluate(pred_dir, gt_dir)
    assert rep.skipped == ["orphan"]
    vals = [rep.per_volume[k]["DSC"] for k in sorted(rep.per_volume)]
    agg = rep.aggregate()["DSC"]
    assert agg["mean"] == pytest.approx(sum(vals) / 3, abs=1e-15)
    assert agg["std"] == pytest.approx(float(np.std(vals)), abs=1e-15)
    lines = rep.records()
    assert len(lines) == 4 and json.loads(lines[-1])["n"] == 3


def test_single_pair_std_zero(tmp_path):
    t = _tube()
    pred_dir, gt_dir = _write_pairs(tmp_path, [t], [np.roll(t, 1, axis=2)])
    agg = evaluate(pred_dir, gt_dir).aggregate()
    assert all(agg[k]["std"] == 0 for k in agg)


def test_volume_key():
    assert volume_key("a/test_0001_label.vvol") == "test_0001"
    assert volume_key("test_0001_prob.vvol") == "test_0001"
    assert volume_key("plain.vvol") == "plain"


def test_empty_report():
    agg = MetricsReport().aggregate()
    assert math.isnan(agg["DSC"]["mean"])
