"""Path matching and the channel, angle and distance error metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .vonmises import wrap_angle

DB_FLOOR = -300.0


class ZeroReference(ValueError):
    pass


class NoMatches(ValueError):
    pass


def to_db(x: float) -> float:
    if x <= 0:
        return DB_FLOOR
    return max(10.0 * math.log10(x), DB_FLOOR)


def nmse_channel(h_true, h_hat) -> float:
    h_true = np.asarray(h_true)
    h_hat = np.asarray(h_hat)
    if h_true.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h_true.shape} vs {h_hat.shape}")
    ref = float(np.vdot(h_true, h_true).real)
    if ref == 0:
        raise ZeroReference("reference channel has zero norm")
    err = h_true - h_hat
    return to_db(float(np.vdot(err, err).real) / ref)


@dataclass
class MatchedPairs:
    pairs: List[Tuple[int, int]]
    unmatched_true: List[int] = field(default_factory=list)
    unmatched_est: List[int] = field(default_factory=list)
    cost: float = 0.0


def _freq_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def match_paths(true_freqs, est_freqs) -> MatchedPairs:
    """Minimum-cost pairing of true and estimated paths by spatial frequency.

    Inputs are (L,) arrays of omega or (L, 2) arrays of (omega, psi); the cost
    is the Euclidean norm of the wrapped frequency differences.
    """
    t = _freq_array(true_freqs)
    e = _freq_array(est_freqs)
    n_t, n_e = t.shape[0], e.shape[0]
    if n_t == 0 or n_e == 0:
        return MatchedPairs([], list(range(n_t)), list(range(n_e)), 0.0)
    diff = wrap_angle(t[:, None, :] - e[None, :, :])
    cost = np.sqrt(np.sum(diff**2, axis=2))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return MatchedPairs(
        pairs=pairs,
        unmatched_true=sorted(set(range(n_t)) - set(rows.tolist())),
        unmatched_est=sorted(set(range(n_e)) - set(cols.tolist())),
        cost=float(cost[rows, cols].sum()),
    )


def _check(pairs: MatchedPairs):
    if not pairs.pairs:
        raise NoMatches("no matched paths")


def mse_angles(
    pairs: MatchedPairs,
    true_theta,
    est_theta,
    normalize: bool = False,
    in_degrees: bool = False,
) -> float:
    """``10 log10 sum (theta - theta_hat)^2`` over matched pairs.

    Unmatched true paths are charged pi/2. With ``normalize`` the sum becomes a
    mean over the true paths; ``in_degrees`` changes the reporting unit only.
    """
    _check(pairs)
    t = np.asarray(true_theta, dtype=float)
    e = np.asarray(est_theta, dtype=float)
    err = sum((t[i] - e[j]) ** 2 for i, j in pairs.pairs)
    err += len(pairs.unmatched_true) * (math.pi / 2) ** 2
    if in_degrees:
        err *= (180.0 / math.pi) ** 2
    if normalize:
        err /= len(pairs.pairs) + len(pairs.unmatched_true)
    return to_db(err)


def nmse_distance(pairs: MatchedPairs, true_r, est_r, r_max: float) -> float:
    """``10 log10 (||r - r_hat||^2 / ||r||^2)`` over matched pairs.

    Unmatched true paths and far-field estimates (``r_hat = inf``) are charged
    an error of ``r_max``.
    """
    _check(pairs)
    t = np.asarray(true_r, dtype=float)
    e = np.asarray(est_r, dtype=float)
    err = 0.0
    ref = 0.0
    for i, j in pairs.pairs:
        d = t[i] - e[j] if math.isfinite(e[j]) else r_max
        err += d * d
        ref += t[i] ** 2
    for i in pairs.unmatched_true:
        err += r_max**2
        ref += t[i] ** 2
    return to_db(err / ref)
