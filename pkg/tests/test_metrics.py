import itertools

import numpy as np
import pytest
from scipy import ndimage

from dscnet.metrics import (
    REPORT_HEADER,
    MetricsReport,
    accuracy,
    auc,
    betti_error,
    cldice,
    dice,
    mask_hausdorff,
    skeletonize,
)


def hausdorff_oracle(a, b):
    pa, pb = np.argwhere(a), np.argwhere(b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(1).max(), d.min(0).max())


def cldice_oracle(p, l):
    sp, sl = skeletonize(p), skeletonize(l)
    tprec = (sp & l).sum() / sp.sum()
    tsens = (sl & p).sum() / sl.sum()
    return 2 * tprec * tsens / (tprec + tsens)


def disk(n, r, centre=None):
    c = (n - 1) / 2 if centre is None else centre
    yy, xx = np.mgrid[:n, :n]
    return (yy - c) ** 2 + (xx - c) ** 2 <= r * r


def random_masks(seed, n, shape=(12, 12), density=0.3):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        m = rng.random(shape) < density
        if m.any():
            out.append(m)
    return out


# -- dice ---------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    b = np.zeros((4, 4), bool)
    b[1:3] = True  # 8 pixels each, 4 shared
    assert dice(a, b) == 0.5
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_shape_mismatch_raises():
    for fn in (dice, cldice, betti_error, mask_hausdorff, accuracy):
        with pytest.raises(ValueError):
            fn(np.ones((3, 3)), np.ones((3, 4)))


@pytest.mark.parametrize("fn", [dice, cldice])
def test_overlap_scores_symmetric_and_bounded(fn):
    masks = random_masks(0, 20)
    for a, b in zip(masks[::2], masks[1::2]):
        v = fn(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(fn(b, a), abs=1e-12)


# -- skeleton -----------------------------------------------------------------


def test_skeleton_of_bar_is_one_pixel_wide():
    bar = np.zeros((9, 26), bool)
    bar[3:6, 3:23] = True
    sk = skeletonize(bar)
    assert sk.any() and not (sk & ~bar).any()
    assert ndimage.distance_transform_edt(sk).max() == 1.0
    assert sk.sum(axis=0).max() == 1
    assert ndimage.label(sk, structure=np.ones((3, 3)))[1] == 1


def test_skeleton_trivial_cases():
    assert not skeletonize(np.zeros((5, 5))).any()
    dot = np.zeros((5, 5), bool)
    dot[2, 3] = True
    np.testing.assert_array_equal(skeletonize(dot), dot)


def test_skeleton_idempotent_and_never_adds():
    for m in random_masks(1, 30, (16, 16), 0.5) + [disk(15, 5)]:
        sk = skeletonize(m)
        assert not (sk & ~m).any()
        np.testing.assert_array_equal(skeletonize(sk), sk)


def test_skeleton_keeps_ring_topology():
    ring = disk(15, 6) & ~disk(15, 3)
    assert betti_error(skeletonize(ring), ring) == (0, 0)


# -- cldice -------------------------------------------------------------------


def test_cldice_examples():
    a = np.zeros((10, 10), bool)
    a[2:4, 1:9] = True
    assert cldice(a, a) == 1.0
    assert cldice(a, np.roll(a, 5, axis=0)) == 0.0
    assert cldice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    assert cldice(a, np.zeros_like(a)) == 0.0


def test_cldice_of_dilated_label():
    label = np.zeros((12, 16), bool)
    label[5:7, 2:14] = True
    pred = ndimage.binary_dilation(label)
    v = cldice(pred, label)
    assert v == pytest.approx(cldice_oracle(pred, label), abs=1e-12)
    # the label skeleton lies inside the dilated pred
    assert (skeletonize(label) & ~pred).sum() == 0
    assert v == 1.0


# -- betti errors -------------------------------------------------------------


def test_betti_error_examples():
    d = disk(15, 6)
    ring = d & ~disk(15, 3)
    assert betti_error(d, d) == (0, 0)
    assert betti_error(ring, d) == (0, 1)
    bar = np.zeros((7, 20), bool)
    bar[2:5, 2:18] = True
    cut = bar.copy()
    cut[:, 10] = False
    assert ndimage.label(cut, structure=np.ones((3, 3)))[1] == 2
    assert betti_error(cut, bar)[0] == 1


def test_betti_error_self_is_zero():
    for m in random_masks(2, 20):
        assert betti_error(m, m) == (0, 0)


# -- hausdorff ----------------------------------------------------------------


def test_hausdorff_examples():
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert mask_hausdorff(a, b) == 5.0
    assert mask_hausdorff(a, a) == 0.0
    with pytest.raises(ValueError):
        mask_hausdorff(a, np.zeros_like(a))


def test_hausdorff_partial_ring():
    ring = disk(21, 8) & ~disk(21, 6)
    part = ring.copy()
    part[:10] = False
    assert mask_hausdorff(part, ring) == pytest.approx(hausdorff_oracle(part, ring), abs=1e-12)
    assert mask_hausdorff(part, ring) > 5


def test_hausdorff_matches_oracle_and_is_a_metric():
    masks = random_masks(3, 30, (10, 10), 0.15)
    for a, b in itertools.combinations(masks[:10], 2):
        assert mask_hausdorff(a, b) == pytest.approx(hausdorff_oracle(a, b), abs=1e-12)
        assert mask_hausdorff(a, b) == mask_hausdorff(b, a)
    for a, b, c in zip(masks[0::3], masks[1::3], masks[2::3]):
        assert mask_hausdorff(a, c) <= mask_hausdorff(a, b) + mask_hausdorff(b, c) + 1e-12


# -- secondary scores and report ----------------------------------------------


def test_accuracy_and_auc():
    label = np.array([[1, 0], [1, 0]], bool)
    assert accuracy(label, label) == 1.0
    assert accuracy(~label, label) == 0.0
    assert auc(np.array([[0.9, 0.1], [0.8, 0.2]]), label) == 1.0
    assert auc(np.array([[0.1, 0.9], [0.2, 0.8]]), label) == 0.0
    assert auc(np.full((2, 2), 0.5), label) == 0.5
    assert np.isnan(auc(np.ones((2, 2)), np.ones((2, 2), bool)))


def test_auc_matches_pairwise_count():
    rng = np.random.default_rng(4)
    prob = np.round(rng.random((8, 8)), 1)  # ties included
    label = rng.random((8, 8)) < 0.4
    pos, neg = prob[label], prob[~label]
    ref = ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (pos.size * neg.size)
    assert auc(prob, label) == pytest.approx(ref, abs=1e-12)


def test_report_csv_layout():
    rep = MetricsReport()
    label = disk(9, 3)
    rep.add("a", label.astype(float), label)
    rep.add("b", np.where(label, 0.6, 0.0) + np.eye(9) * 0.7, label)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER) == "image,dice,cldice,betti0_err,betti1_err,hausdorff,acc,auc"
    assert len(lines) == 4
    assert lines[1].startswith("a,1.0000,1.0000,0.0000,0.0000,0.0000,1.0000")
    summary = lines[-1].split(",")
    assert summary[0] == "mean±std"
    m, s = summary[1].split("±")
    assert float(m) == pytest.approx(rep.mean("dice"), abs=5e-5)
    assert float(s) == pytest.approx(rep.std("dice"), abs=5e-5)
    for r in rep.rows:
        assert 0 <= r["dice"] <= 1 and 0 <= r["cldice"] <= 1
        assert r["betti0_err"] >= 0 and r["betti1_err"] >= 0


def test_report_empty_prediction_has_nan_hausdorff():
    rep = MetricsReport()
    row = rep.add("z", np.zeros((5, 5)), disk(5, 1))
    assert np.isnan(row["hausdorff"]) and row["dice"] == 0.0
    assert ",nan," in rep.to_csv().splitlines()[1]


def test_report_threshold():
    prob = np.full((3, 3), 0.4)
    label = np.ones((3, 3), bool)
    assert MetricsReport().add("x", prob, label)["dice"] == 0.0
    assert MetricsReport(threshold=0.3).add("x", prob, label)["dice"] == 1.0
