import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from steerer.density import DensityMap, PointSet, gt_pyramid, rasterize_density
from steerer.metrics import MatchResult, count_from_density, counting_metrics, extract_maxima, match_points, prf


def brute_maxima(grid, threshold, window):
    """Scan every cell's full window in plain Python."""
    h, w = grid.shape
    r = window // 2
    out = []
    for y in range(h):
        for x in range(w):
            v = grid[y, x]
            if v <= threshold:
                continue
            ok = True
            for yy in range(max(y - r, 0), min(y + r + 1, h)):
                for xx in range(max(x - r, 0), min(x + r + 1, w)):
                    if (yy, xx) == (y, x):
                        continue
                    before = (yy, xx) < (y, x)
                    if grid[yy, xx] > v or (before and grid[yy, xx] == v):
                        ok = False
            if ok:
                out.append((x, y))
    return out


def optimal_tp(p, g, sigma):
    """Largest one-to-one matching by exhaustive assignment."""
    best = 0
    n = max(len(p), len(g))
    for perm in itertools.permutations(range(n), len(g)) if len(p) >= len(g) else \
            itertools.permutations(range(len(g)), len(p)):
        if len(p) >= len(g):
            pairs = [(perm[k], k) for k in range(len(g))]
        else:
            pairs = [(k, perm[k]) for k in range(len(p))]
        tp = sum(1 for a, b in pairs if a < len(p) and math.dist(p[a], g[b]) <= sigma)
        best = max(best, tp)
    return best


def test_count_examples():
    pts = PointSet([[40.0 + 6 * i, 64.0] for i in range(10)])
    assert abs(count_from_density(gt_pyramid(pts, (128, 128), 1)[0]) - 10.0) < 1e-5
    assert count_from_density(np.zeros((4, 4))) == 0.0
    grid = np.random.default_rng(0).uniform(size=(7, 5))
    acc = 0.0
    for v in grid.ravel():
        acc += v
    assert count_from_density(DensityMap(grid)) == pytest.approx(acc, rel=0, abs=1e-12)


def test_single_peak_maps_to_cell_center():
    d = rasterize_density(PointSet([[10.4, 7.9]]), (16, 16), 2.0)
    got = extract_maxima(d, 0.01, 3)
    np.testing.assert_array_equal(got.points, [[10 * 4 + 1.5, 7 * 4 + 1.5]])
    assert len(extract_maxima(np.zeros((8, 8)))) == 0


def test_plateau_yields_first_cell_only():
    grid = np.zeros((5, 5))
    grid[2, 2] = grid[2, 3] = 1.0
    got = extract_maxima(grid, 0.1, 3, stride=1)
    np.testing.assert_array_equal(got.points, [[2.0, 2.0]])


def test_window_errors():
    with pytest.raises(ValueError):
        extract_maxima(np.zeros((4, 4)), window=4)
    with pytest.raises(ValueError):
        extract_maxima(np.zeros((4, 4)), window=1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 20), window=st.sampled_from([3, 5]), quant=st.booleans())
def test_maxima_match_brute_scan(seed, window, quant):
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0, 1, (9, 11))
    if quant:
        grid = np.round(grid * 3) / 3  # force plateaus
    got = extract_maxima(grid, 0.2, window, stride=1)
    assert [tuple(map(int, p)) for p in got.points] == brute_maxima(grid, 0.2, window)


def test_two_separated_kernels():
    d = rasterize_density(PointSet([[5.0, 5.0], [14.0, 12.0]]), (20, 20), 1.0)
    got = extract_maxima(d, 0.05, 3)
    assert len(got) == 2
    assert [tuple(map(int, p)) for p in extract_maxima(d.grid, 0.05, 3, stride=1).points] == \
        brute_maxima(d.grid, 0.05, 3)


def test_match_examples():
    g = PointSet([[0.0, 0.0], [10.0, 0.0], [20.0, 5.0]])
    m = match_points(g, g, 1.0)
    assert (m.tp, m.fp, m.fn) == (3, 0, 0)
    m = match_points(PointSet(), g, 1.0)
    assert (m.tp, m.fp, m.fn) == (0, 0, 3)
    m = match_points(g, PointSet(), 1.0)
    assert (m.tp, m.fp, m.fn) == (0, 3, 0)
    with pytest.raises(ValueError):
        match_points(g, g, 0.0)


def test_match_per_point_sigma():
    g = PointSet([[0.0, 0.0], [50.0, 0.0]])
    p = PointSet([[3.0, 0.0], [53.0, 0.0]])
    m = match_points(p, g, np.array([2.0, 4.0]))
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)
    assert m.pairs == [(1, 1, 3.0)]


def test_match_greedy_prefers_nearest():
    g = PointSet([[0.0, 0.0]])
    p = PointSet([[3.0, 0.0], [1.0, 0.0]])
    m = match_points(p, g, 5.0)
    assert m.pairs == [(1, 0, 1.0)]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 20), n_p=st.integers(0, 5), n_g=st.integers(0, 5))
def test_match_invariants_and_oracle(seed, n_p, n_g):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 20, (n_p, 2))
    g = rng.uniform(0, 20, (n_g, 2))
    m = match_points(PointSet(p), PointSet(g), 100.0)
    assert m.tp + m.fp == n_p and m.tp + m.fn == n_g
    assert len({a for a, _, _ in m.pairs}) == m.tp == len({b for _, b, _ in m.pairs})
    # sigma covers every pair, so greedy is optimal
    assert m.tp == optimal_tp(p, g, 100.0) == min(n_p, n_g)
    m = match_points(PointSet(p), PointSet(g), 4.0)
    assert m.tp <= optimal_tp(p, g, 4.0)
    assert all(d <= 4.0 for _, _, d in m.pairs)


def test_prf_examples():
    assert prf(MatchResult(5, 0, 0)) == (1.0, 1.0, 1.0)
    assert prf(MatchResult(0, 3, 2)) == (0.0, 0.0, 0.0)
    assert prf(MatchResult(0, 0, 0)) == (0.0, 0.0, 0.0)
    p, r, f = prf(MatchResult(3, 1, 2))
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(2 * 0.45 / 1.35, abs=1e-15)
    # swapping pred and gt swaps fp and fn
    assert prf(MatchResult(4, 1, 3))[2] == pytest.approx(prf(MatchResult(4, 3, 1))[2], abs=1e-15)


def test_counting_examples():
    assert counting_metrics([(3, 3), (0, 0)]) == (0.0, 0.0, 0.0)
    mae, mse, nae = counting_metrics([(9, 10), (12, 10)])
    assert mae == 1.5
    assert mse == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert nae == pytest.approx(0.15, abs=1e-15)
    assert counting_metrics([(2.0, 0.0)])[2] == 2.0
    with pytest.raises(ValueError):
        counting_metrics([])


@settings(max_examples=40, deadline=None)
@given(pairs=st.lists(st.tuples(st.floats(0, 100), st.integers(0, 100)), min_size=1, max_size=20))
def test_counting_matches_scalar_loop(pairs):
    n = len(pairs)
    mae = sum(abs(a - b) for a, b in pairs) / n
    mse = math.sqrt(sum((a - b) ** 2 for a, b in pairs) / n)
    nae = sum(abs(a - b) / max(b, 1) for a, b in pairs) / n
    got = counting_metrics(pairs)
    np.testing.assert_allclose(got, (mae, mse, nae), rtol=1e-12, atol=1e-12)


def test_gt_maxima_recover_separated_points():
    rng = np.random.default_rng(4)
    pts = []
    while len(pts) < 12:
        c = rng.uniform(16, 112, 2)
        if all(math.dist(c, q) >= 16 for q in pts):
            pts.append(c)
    gt = PointSet(np.array(pts))
    d = gt_pyramid(gt, (128, 128), 1, 1.0)[0]
    found = extract_maxima(d, 0.1, 3)
    assert len(found) == 12
    assert prf(match_points(found, gt, 4.0))[2] == 1.0
