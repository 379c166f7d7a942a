import math
from collections import Counter

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from oracles import N8, binary_grids, counts_per_level, diagram_hausdorff_oracle, dim0_oracle, flood_components, hole_count, level_grids

from dscnet import autodiff as ad
from dscnet.autodiff import Tensor
from dscnet.topology import (
    DiagramCache,
    PersistenceDiagram,
    betti_numbers,
    compute_persistence,
    diagram_hausdorff,
    format_diagrams,
    hausdorff_pair,
    parse_diagrams,
    tc_loss,
    tc_loss_terms,
    topological_term,
)


# -- persistence --------------------------------------------------------------


def test_constant_grid():
    d0, d1 = compute_persistence(np.full((4, 5), 0.8))
    np.testing.assert_allclose(d0.points, [[0.8, 0.8]])
    assert len(d1) == 0


def annulus(n=7, inner=1):
    g = np.zeros((n, n))
    g[1:-1, 1:-1] = 1
    c = n // 2
    g[c - inner + 1 : c + inner, c - inner + 1 : c + inner] = 0
    return g


def test_annulus():
    d0, d1 = compute_persistence(annulus())
    np.testing.assert_array_equal(d0.points, [[1.0, 0.0]])
    np.testing.assert_array_equal(d1.points, [[1.0, 0.0]])


def test_two_blobs():
    g = np.full((7, 9), 0.1)
    g[1:3, 1:3] = 0.9
    g[4:6, 5:8] = 0.7
    d0, d1 = compute_persistence(g)
    np.testing.assert_allclose(d0.points, [[0.9, 0.1], [0.7, 0.1]])
    assert len(d1) == 0


def test_empty_grid_is_an_error():
    with pytest.raises(ValueError):
        compute_persistence(np.zeros((0, 3)))


def test_points_are_ordered_and_pixels_realise_values():
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = rng.random((7, 8))
        flat = g.reshape(-1)
        d0, d1 = compute_persistence(g)
        assert d0.points[0, 1] == g.min() and d0.points[0, 0] == g.max()
        for d in (d0, d1):
            assert np.all(d.points[:, 0] >= d.points[:, 1])
            np.testing.assert_array_equal(flat[d.pixels[:, 0]], d.points[:, 0])
            np.testing.assert_array_equal(flat[d.pixels[:, 1]], d.points[:, 1])


def _check_against_oracles(grid):
    d0, d1 = compute_persistence(grid)
    got = Counter(map(tuple, d0.points.tolist()))
    assert got == dim0_oracle(grid), grid
    for t, n0, n1 in counts_per_level(grid):
        assert d0.alive_at(t) == n0, (grid, t)
        assert d1.alive_at(t) == n1, (grid, t)


def test_all_binary_three_by_three_grids():
    for g in binary_grids():
        _check_against_oracles(g)


def test_random_six_by_six_grids_sample():
    for g in level_grids(150, seed=11):
        _check_against_oracles(g)


def test_binary_masks_reproduce_betti_numbers():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m = rng.random((10, 10)) < 0.55
        d0, d1 = compute_persistence(m.astype(float))
        assert (d0.alive_at(0.5), d1.alive_at(0.5)) == betti_numbers(m)


def _bottleneck_within(p, q, eps):
    """Perfect matching of points (or diagonal) with L-inf cost <= eps."""
    n, m = len(p), len(q)
    big = 1.0
    cost = np.full((n + m, n + m), big)
    cost[n:, m:] = 0
    for i in range(n):
        for j in range(m):
            if np.max(np.abs(p[i] - q[j])) <= eps + 1e-12:
                cost[i, j] = 0
        if (p[i, 0] - p[i, 1]) / 2 <= eps + 1e-12:
            cost[i, m + i] = 0
    for j in range(m):
        if (q[j, 0] - q[j, 1]) / 2 <= eps + 1e-12:
            cost[n + j, j] = 0
    r, c = linear_sum_assignment(cost)
    return cost[r, c].sum() == 0


def test_stability_under_small_perturbations():
    rng = np.random.default_rng(5)
    eps = 0.01
    for _ in range(60):
        g = rng.random((8, 8))
        h = g + rng.uniform(-eps, eps, g.shape)
        for a, b in zip(compute_persistence(g), compute_persistence(h)):
            assert _bottleneck_within(a.points, b.points, eps)


def test_order_preserving_perturbation_moves_points_by_at_most_eps():
    rng = np.random.default_rng(6)
    g = rng.permutation(64).reshape(8, 8) / 64.0  # distinct values 1/64 apart
    h = g + rng.uniform(-0.004, 0.004, g.shape)  # small enough to keep the order
    for a, b in zip(compute_persistence(g), compute_persistence(h)):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert np.abs(a.points - b.points).max() <= 0.004


def test_diagram_text_round_trip():
    d0, d1 = compute_persistence(np.random.default_rng(2).random((6, 6)))
    text = format_diagrams(d0, d1)
    assert all(len(line.split()) == 5 for line in text.splitlines())
    back = parse_diagrams(text)
    np.testing.assert_allclose(back[0].points, d0.points, atol=1e-6)
    np.testing.assert_array_equal(back[1].pixels, d1.pixels)


# -- diagram distance ---------------------------------------------------------


def test_hausdorff_examples():
    assert diagram_hausdorff([[1, 0]], [[1, 0]]) == 0.0
    assert diagram_hausdorff([[1, 0]], [[1, 0], [5, 2]]) == pytest.approx(math.sqrt(20))
    assert diagram_hausdorff([[3, 1]], []) == pytest.approx(2 / math.sqrt(2))
    assert diagram_hausdorff([], []) == 0.0


def test_hausdorff_matches_exhaustive_evaluation():
    rng = np.random.default_rng(7)
    for _ in range(500):
        a = [tuple(p) for p in rng.uniform(0, 1, (rng.integers(0, 11), 2))]
        b = [tuple(p) for p in rng.uniform(0, 1, (rng.integers(0, 11), 2))]
        assert abs(diagram_hausdorff(a, b) - diagram_hausdorff_oracle(a, b)) <= 1e-12


def test_hausdorff_pair_realises_distance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        a, b = rng.random((5, 2)), rng.random((3, 2))
        d, i, j = hausdorff_pair(a, b)
        assert d == pytest.approx(np.linalg.norm(a[i] - b[j]))


def test_hausdorff_metric_properties():
    rng = np.random.default_rng(9)
    for _ in range(200):
        a, b, c = (rng.random((rng.integers(1, 8), 2)) for _ in range(3))
        ab, ba = diagram_hausdorff(a, b), diagram_hausdorff(b, a)
        assert ab == ba and ab >= 0
        assert diagram_hausdorff(a, c) <= ab + diagram_hausdorff(b, c) + 1e-12
        assert diagram_hausdorff(a, a[::-1]) == 0


def test_hausdorff_dimension_mismatch():
    with pytest.raises(ValueError):
        diagram_hausdorff(PersistenceDiagram(0), PersistenceDiagram(1))


# -- Betti numbers ------------------------------------------------------------


def test_betti_examples():
    assert betti_numbers(np.ones((5, 5))) == (1, 0)
    assert betti_numbers(annulus()) == (1, 1)
    two = np.zeros((7, 16))
    two[:, :7] = annulus()
    two[:, 8:15] = annulus()
    assert betti_numbers(two) == (2, 2)


def test_betti_matches_flood_fill():
    rng = np.random.default_rng(10)
    for _ in range(200):
        m = rng.random((9, 11)) < 0.5
        assert betti_numbers(m) == (flood_components(m, N8)[1], hole_count(m))


def test_diagonal_touching_pixels_are_one_component():
    m = np.eye(4, dtype=bool)
    assert betti_numbers(m) == (1, 0)
    ring = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
    assert betti_numbers(ring) == (1, 1)


# -- topological loss ---------------------------------------------------------


def _blobs():
    lab = np.zeros((1, 1, 16, 16))
    lab[0, 0, 2:6, 2:6] = 1
    lab[0, 0, 9:14, 8:14] = 1
    return lab


def test_identical_prediction_has_zero_topological_term():
    lab = _blobs()
    assert topological_term(Tensor(lab), lab, cache=DiagramCache()).item() == 0.0
    sat = Tensor(np.where(lab > 0, 20.0, -20.0))
    _, topo = tc_loss_terms(sat, lab)
    assert topo.item() < 1e-6


def _oracle_term(pred, lab):
    d_pred, d_lab = compute_persistence(pred[0, 0]), compute_persistence(lab[0, 0])
    return sum(diagram_hausdorff_oracle([tuple(u) for u in p.points], [tuple(v) for v in q.points]) for p, q in zip(d_pred, d_lab))


def test_erased_blob_is_penalised():
    lab = _blobs()
    pred = lab.copy()
    pred[0, 0, 2:6, 2:6] = 0.3  # blob faded to a weak response
    with ad.precision(np.float64):
        got = topological_term(Tensor(pred), lab, cache=DiagramCache()).item()
    assert got == pytest.approx(_oracle_term(pred, lab), abs=1e-12)
    assert got == pytest.approx(0.7, abs=1e-12)


def test_fully_erased_binary_blob_is_invisible_to_set_distance():
    # both label components sit at (1, 0); a set distance ignores multiplicity
    lab = _blobs()
    pred = lab.copy()
    pred[0, 0, 2:6, 2:6] = 0
    got = topological_term(Tensor(pred), lab, cache=DiagramCache()).item()
    assert got == _oracle_term(pred, lab) == 0.0


def test_topological_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    lab = _blobs()
    with ad.precision(np.float64):
        base = np.clip(lab * 0.7 + 0.15 + rng.uniform(-0.1, 0.1, lab.shape), 0.01, 0.99)
        prob = Tensor(base, requires_grad=True)
        out = topological_term(prob, lab, cache=DiagramCache())
        ad.backward(out)
        grad = prob.grad.copy()
        critical = np.flatnonzero(grad)
        assert critical.size > 0
        h = 1e-6
        for idx in critical:
            up, dn = base.copy(), base.copy()
            up.flat[idx] += h
            dn.flat[idx] -= h
            fd = (topological_term(Tensor(up), lab).item() - topological_term(Tensor(dn), lab).item()) / (2 * h)
            assert abs(fd - grad.flat[idx]) <= 1e-2 * max(abs(fd), abs(grad.flat[idx]))


def test_patches_sum_per_patch_distances():
    lab = np.zeros((1, 1, 8, 8))
    lab[0, 0, 1:3, 1:3] = 1
    pred = np.full_like(lab, 0.2)
    pred[0, 0, 5:7, 5:7] = 0.9
    got = topological_term(Tensor(pred), lab, patch=4, cache=DiagramCache()).item()
    expected = 0.0
    for r in (0, 4):
        for c in (0, 4):
            dp = compute_persistence(pred[0, 0, r : r + 4, c : c + 4])
            dl = compute_persistence(lab[0, 0, r : r + 4, c : c + 4])
            expected += sum(diagram_hausdorff(p, q) for p, q in zip(dp, dl))
    assert got == pytest.approx(expected)


def test_tc_loss_is_ce_plus_weighted_term():
    rng = np.random.default_rng(13)
    lab = _blobs()
    logits = Tensor(rng.normal(size=lab.shape))
    ce, topo = tc_loss_terms(logits, lab)
    total = tc_loss(logits, lab, weight=0.5)
    assert total.item() == pytest.approx(ce.item() + 0.5 * topo.item(), rel=1e-6)
