import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nf_sgvb.metrics import (
    DB_FLOOR,
    MatchedPairs,
    NoMatches,
    ZeroReference,
    match_paths,
    mse_angles,
    nmse_channel,
    nmse_distance,
    to_db,
)


def test_nmse_channel_examples(rng):
    h = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    assert nmse_channel(h, h) == DB_FLOOR
    assert nmse_channel(h, np.zeros(64)) == pytest.approx(0.0, abs=1e-12)
    n = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    n *= 0.1 * np.linalg.norm(h) / np.linalg.norm(n)
    assert nmse_channel(h, h + n) == pytest.approx(-20.0, abs=1e-10)


def test_nmse_channel_errors():
    with pytest.raises(ZeroReference):
        nmse_channel(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        nmse_channel(np.ones(4), np.ones(5))


def test_to_db_floor():
    assert to_db(0.0) == DB_FLOOR
    assert to_db(1e-40) == DB_FLOOR
    assert to_db(100.0) == pytest.approx(20.0)


def test_match_identical_and_swapped():
    m = match_paths([0.1, -0.7, 2.0], [0.1, -0.7, 2.0])
    assert m.pairs == [(0, 0), (1, 1), (2, 2)] and m.cost == 0.0
    m = match_paths([0.1, -0.7], [-0.7, 0.1])
    assert m.pairs == [(0, 1), (1, 0)] and m.cost == 0.0


def test_match_wraps_around():
    m = match_paths([3.1], [-3.1, 2.5])
    assert m.pairs == [(0, 0)]
    assert m.cost == pytest.approx(2 * math.pi - 6.2)
    assert m.unmatched_est == [1]


def test_match_ties_prefer_lower_estimate_index():
    m = match_paths([0.5], [0.5, 0.5])
    assert m.pairs == [(0, 0)] and m.unmatched_est == [1]


def test_match_unequal_sizes():
    m = match_paths([0.1, 1.0, 2.0], [1.05])
    assert m.pairs == [(1, 0)]
    assert m.unmatched_true == [0, 2]
    m = match_paths([], [1.0])
    assert m.pairs == [] and m.unmatched_est == [0]


@given(st.integers(0, 100_000))
def test_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-np.pi, np.pi, (3, 2))
    e = t[rng.permutation(3)] + rng.normal(0, 0.6, (3, 2))
    m = match_paths(t, e)

    def cost(perm):
        d = np.angle(np.exp(1j * (t - e[list(perm)])))
        return np.sum(np.sqrt(np.sum(d**2, axis=1)))

    best = min(cost(p) for p in itertools.permutations(range(3)))
    assert m.cost == pytest.approx(best, abs=1e-12)


def test_mse_angles_examples():
    pairs = match_paths([0.3], [0.3])
    assert mse_angles(pairs, [0.2], [0.2]) == DB_FLOOR
    assert mse_angles(pairs, [0.2], [0.21]) == pytest.approx(-40.0, abs=1e-9)
    assert mse_angles(pairs, [0.2], [0.21], in_degrees=True) == pytest.approx(-40.0 + 20 * math.log10(180 / math.pi))


def test_metric_hand_formula(rng):
    L = 6
    t_th = rng.uniform(-1, 1, L)
    e_th = t_th + rng.normal(0, 0.01, L)
    t_r = rng.uniform(3, 90, L)
    e_r = t_r + rng.normal(0, 2.0, L)
    pairs = MatchedPairs([(i, i) for i in range(L)])
    want_a = 10 * math.log10(sum((a - b) ** 2 for a, b in zip(t_th, e_th)))
    want_r = 10 * math.log10(sum((a - b) ** 2 for a, b in zip(t_r, e_r)) / sum(a * a for a in t_r))
    assert mse_angles(pairs, t_th, e_th) == pytest.approx(want_a, abs=1e-12)
    assert nmse_distance(pairs, t_r, e_r, 90.0) == pytest.approx(want_r, abs=1e-12)
    assert mse_angles(pairs, t_th, e_th, normalize=True) == pytest.approx(want_a - 10 * math.log10(L), abs=1e-12)


def test_penalties():
    pairs = MatchedPairs([(0, 0)], unmatched_true=[1])
    want = 10 * math.log10(0.01**2 + (math.pi / 2) ** 2)
    assert mse_angles(pairs, [0.0, 0.5], [0.01]) == pytest.approx(want)
    want = 10 * math.log10((10.0**2 + 90.0**2) / (10.0**2 + 20.0**2))
    assert nmse_distance(pairs, [10.0, 20.0], [0.0], 90.0) == pytest.approx(want)
    # far-field estimate paired to a near-field path
    pairs = MatchedPairs([(0, 0)])
    assert nmse_distance(pairs, [10.0], [math.inf], 90.0) == pytest.approx(10 * math.log10(81.0))


def test_no_matches():
    with pytest.raises(NoMatches):
        mse_angles(MatchedPairs([]), [], [])
    with pytest.raises(NoMatches):
        nmse_distance(MatchedPairs([], [0]), [1.0], [], 90.0)


@given(st.integers(0, 100_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-3, 3, 5)
    th = np.arcsin(w / np.pi)
    r = rng.uniform(3, 90, 5)
    ew = w + rng.normal(0, 0.02, 5)
    eth = np.arcsin(np.clip(ew / np.pi, -1, 1))
    er = r * rng.uniform(0.8, 1.2, 5)
    perm = rng.permutation(5)
    a = match_paths(w, ew)
    b = match_paths(w, ew[perm])
    assert mse_angles(a, th, eth) == pytest.approx(mse_angles(b, th, eth[perm]), abs=1e-12)
    assert nmse_distance(a, r, er, 90) == pytest.approx(nmse_distance(b, r, er[perm], 90), abs=1e-12)


@given(st.integers(0, 100_000), st.floats(1.01, 10.0))
def test_inflating_errors_increases_mse(seed, factor):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1, 1, 4)
    err = rng.normal(0, 0.05, 4)
    pairs = MatchedPairs([(i, i) for i in range(4)])
    assert mse_angles(pairs, t, t + factor * err) > mse_angles(pairs, t, t + err)


def test_nmse_additivity_concentrates():
    rng = np.random.default_rng(0)
    h = rng.standard_normal(256) + 1j * rng.standard_normal(256)
    n0 = 0.05
    want = 10 * math.log10(256 * n0 / np.vdot(h, h).real)
    vals = []
    for _ in range(500):
        n = math.sqrt(n0 / 2) * (rng.standard_normal(256) + 1j * rng.standard_normal(256))
        vals.append(nmse_channel(h, h + n))
    vals = np.array(vals)
    assert abs(np.mean(vals) - want) < 0.5
    assert np.mean(np.abs(vals - want) < 0.5) > 0.95
