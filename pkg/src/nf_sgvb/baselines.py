"""Reference estimators: LS, oracle LS, polar-codebook OMP and SBL."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from .channel import (
    ArrayGeometry,
    ArrayKind,
    ChannelMode,
    InvalidConfig,
    PathParams,
    Scene,
    curvature_factor,
    frequency_factors,
    steering_vector,
)

RANK_TOL = 1e-10
JITTER = 1e-10


class RankDeficient(UserWarning):
    """Steering matrix of the oracle is numerically singular."""


def ls_estimate(y) -> np.ndarray:
    """Identity measurement, so least squares returns the observation."""
    return np.array(y, dtype=complex, copy=True)


def oracle_ls_estimate(y, geom: ArrayGeometry, true_scene: Scene, mode=ChannelMode.EXACT) -> np.ndarray:
    """Projection of ``y`` onto the span of the true steering vectors.

    ``mode`` selects the propagation model used for the steering matrix and
    should match the one that generated the channel. Near-singular ``B^H B``
    emits :class:`RankDeficient` and falls back to a truncated pseudo-inverse.
    """
    y = np.asarray(y, dtype=complex)
    B = np.column_stack([steering_vector(geom, sc, mode) for sc in true_scene.scatterers])
    if B.shape[1] > B.shape[0]:
        raise InvalidConfig("oracle LS needs L <= N")
    gram = B.conj().T @ B
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= RANK_TOL * max(ev[-1], 1e-300):
        warnings.warn("oracle steering matrix is rank deficient", RankDeficient, stacklevel=2)
        coef = np.linalg.pinv(B, rcond=math.sqrt(RANK_TOL)) @ y
    else:
        coef = linalg.cho_solve(linalg.cho_factor(gram), B.conj().T @ y)
    return B @ coef


# ---------------------------------------------------------------------------
# Polar-domain codebook


@dataclass(frozen=True)
class PolarCodebook:
    atoms: np.ndarray  # N x M, unit-norm columns
    angle_grid: np.ndarray  # (M_a, F) spatial frequencies
    s_grid_per_angle: Tuple[np.ndarray, ...]
    omega: np.ndarray  # (M,) per atom
    psi: np.ndarray  # (M,) per atom, zeros on a ULA
    s: np.ndarray  # (M,) per atom
    angle_index: np.ndarray  # (M,) row of angle_grid

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    def lookup(self, index: int) -> PathParams:
        return PathParams(omega=float(self.omega[index]), s=float(self.s[index]), gain=0j, psi=float(self.psi[index]))


def ring_coherence(geom: ArrayGeometry, delta_s: float) -> float:
    """``|c(s)^H c(s + delta)| / N``, which does not depend on ``s``."""
    f = curvature_factor(geom)
    return float(abs(np.exp(1j * f.sign * f.exponents * delta_s).sum()) / geom.n_total)


def ring_spacing(geom: ArrayGeometry, coherence_param: float, s_max: float) -> float:
    """Smallest ``delta`` in ``(0, s_max]`` where adjacent-ring coherence falls to ``coherence_param``."""
    if s_max <= 0:
        return math.inf
    deltas = np.linspace(0.0, s_max, 4097)[1:]
    f = curvature_factor(geom)
    coh = np.abs(np.exp(1j * f.sign * np.multiply.outer(deltas, f.exponents)).sum(axis=1)) / geom.n_total
    below = np.nonzero(coh <= coherence_param)[0]
    if below.size == 0:
        return math.inf
    k = int(below[0])
    if k == 0:
        return float(deltas[0])
    # linear interpolation for the crossing
    d0, d1, c0, c1 = deltas[k - 1], deltas[k], coh[k - 1], coh[k]
    return float(d0 + (c0 - coherence_param) * (d1 - d0) / (c0 - c1))


def _angle_grid(geom: ArrayGeometry, angular_size: int) -> np.ndarray:
    kd = geom.kd
    if geom.kind is ArrayKind.ULA:
        return (-kd + 2.0 * kd * np.arange(angular_size) / angular_size)[:, None]
    ratio = angular_size / geom.n_total
    m_h = max(1, int(math.ceil(geom.n_h * math.sqrt(ratio))))
    m_v = max(1, int(math.ceil(geom.n_v * math.sqrt(ratio))))
    w = -kd + 2.0 * kd * np.arange(m_h) / m_h
    p = -kd + 2.0 * kd * np.arange(m_v) / m_v
    ww, pp = np.meshgrid(w, p)
    return np.column_stack([ww.ravel(), pp.ravel()])


def build_polar_codebook(
    geom: ArrayGeometry,
    r_min: float,
    r_max: float,
    angular_size: Optional[int] = None,
    coherence_param: float = 0.5,
) -> PolarCodebook:
    """Angle-distance dictionary of unit-norm separable steering vectors.

    Angles are uniform in spatial frequency over ``[-kd, kd)``; on a UPA the
    angular budget is split over a rectangular (omega, psi) grid. Each angle
    carries distance rings uniform in ``s`` over ``[0, s_max]``, as many as
    possible while adjacent rings stay at most ``coherence_param`` coherent.
    ``r_min = inf`` gives a single far-field ring.
    """
    n = geom.n_total
    if angular_size is None:
        angular_size = 3 * n
    if angular_size < n:
        raise InvalidConfig(f"angular_size must be >= N = {n}")
    if not (r_min > 0 and r_max >= r_min):
        raise InvalidConfig(f"empty distance range [{r_min}, {r_max}]")
    if not 0 < coherence_param < 1:
        raise InvalidConfig("coherence_param must lie in (0, 1)")

    s_max = float(geom.s_from_r(r_min))
    delta = ring_spacing(geom, coherence_param, s_max)
    rings = 1 if not math.isfinite(delta) else int(math.floor(s_max / delta + 1e-12)) + 1
    s_rings = np.linspace(0.0, s_max, rings) if rings > 1 else np.zeros(1)

    grid = _angle_grid(geom, angular_size)
    ffs = frequency_factors(geom)
    curv = curvature_factor(geom).matrix(s_rings)  # N x S
    lin = np.ones((n, grid.shape[0]), dtype=complex)
    for fi, f in enumerate(ffs):
        lin = lin * f.matrix(grid[:, fi])
    atoms = (lin[:, :, None] * curv[:, None, :]).reshape(n, -1) / math.sqrt(n)

    a_idx = np.repeat(np.arange(grid.shape[0]), rings)
    return PolarCodebook(
        atoms=atoms,
        angle_grid=grid,
        s_grid_per_angle=tuple(s_rings for _ in range(grid.shape[0])),
        omega=grid[a_idx, 0].copy(),
        psi=grid[a_idx, 1].copy() if grid.shape[1] > 1 else np.zeros(a_idx.size),
        s=np.tile(s_rings, grid.shape[0]),
        angle_index=a_idx,
    )


# ---------------------------------------------------------------------------
# P-SOMP (single snapshot: OMP over the polar dictionary)


@dataclass
class PursuitResult:
    h_hat: np.ndarray
    selected: List[int]
    coefficients: np.ndarray
    residual_norms: List[float]


def p_somp(y, codebook: PolarCodebook, l_paths: int) -> PursuitResult:
    y = np.asarray(y, dtype=complex)
    A = codebook.atoms
    if l_paths > A.shape[0]:
        raise InvalidConfig("l_paths must not exceed N")
    residual = y.copy()
    selected: List[int] = []
    norms = [float(np.linalg.norm(residual))]
    coef = np.zeros(0, dtype=complex)
    for _ in range(l_paths):
        corr = np.abs(A.conj().T @ residual)
        corr[selected] = -1.0
        selected.append(int(np.argmax(corr)))
        sub = A[:, selected]
        coef = np.linalg.lstsq(sub, y, rcond=None)[0]
        residual = y - sub @ coef
        norms.append(float(np.linalg.norm(residual)))
    h_hat = A[:, selected] @ coef if selected else np.zeros_like(y)
    return PursuitResult(h_hat=h_hat, selected=selected, coefficients=coef, residual_norms=norms)


# ---------------------------------------------------------------------------
# SBL


@dataclass
class SblConfig:
    max_em_iters: int = 300
    prune_tol: float = 0.0
    tol: float = 1e-6
    fixed_gamma: Optional[float] = None


@dataclass
class SblResult:
    h_hat: np.ndarray
    weights: np.ndarray  # posterior means over the full dictionary
    gamma: float
    iterations: int
    converged: bool
    evidence: List[float] = field(default_factory=list)


def _sbl_posterior(A, y, var, gamma):
    """Posterior mean/diagonal covariance and log evidence through the N x N form."""
    n = A.shape[0]
    As = A * np.sqrt(var)
    C = As @ As.conj().T
    C[np.diag_indices(n)] += 1.0 / gamma + JITTER
    chol = linalg.cholesky(C, lower=True)
    W = linalg.solve_triangular(chol, A, lower=True)
    wy = linalg.solve_triangular(chol, y, lower=True)
    mu = var * (W.conj().T @ wy)
    sigma = var - var**2 * (W.real**2 + W.imag**2).sum(axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol).real))
    evidence = -n * math.log(math.pi) - logdet - float(np.vdot(wy, wy).real)
    return mu, np.maximum(sigma, 0.0), evidence


def sbl_estimate(y, codebook: PolarCodebook, config: Optional[SblConfig] = None) -> SblResult:
    """EM sparse Bayesian learning with per-atom prior variances.

    Atoms whose prior variance drops below ``prune_tol`` times the largest are
    removed. Iteration stops after ``max_em_iters`` or when the posterior mean
    changes by less than ``tol`` relative.
    """
    config = config or SblConfig()
    y = np.asarray(y, dtype=complex)
    A_full = codebook.atoms
    n, m = A_full.shape
    keep = np.arange(m)
    var = np.ones(m)
    y2 = float(np.vdot(y, y).real)
    gamma = config.fixed_gamma if config.fixed_gamma is not None else n / max(0.1 * y2, 1e-300)
    mu = np.zeros(m, dtype=complex)
    evidence: List[float] = []
    converged = False
    it = 0
    for it in range(1, config.max_em_iters + 1):
        A = A_full[:, keep]
        mu_new, sigma, ev = _sbl_posterior(A, y, var, gamma)
        evidence.append(ev)
        change = np.linalg.norm(mu_new - mu) / max(np.linalg.norm(mu_new), 1e-300)
        mu = mu_new
        if config.fixed_gamma is None:
            resid = y - A @ mu
            # tr(A Sigma A^H) = sum_m (1 - Sigma_mm / var_m) / gamma
            m_eff = float(np.sum(1.0 - sigma / np.maximum(var, 1e-300)))
            gamma = n / max(float(np.vdot(resid, resid).real) + m_eff / gamma, 1e-300)
        var = np.abs(mu) ** 2 + sigma
        if change < config.tol and it > 1:
            converged = True
            break
        live = var >= config.prune_tol * var.max()
        if not np.all(live):
            keep, var, mu = keep[live], var[live], mu[live]
    weights = np.zeros(m, dtype=complex)
    weights[keep] = mu
    return SblResult(
        h_hat=A_full[:, keep] @ mu,
        weights=weights,
        gamma=float(gamma),
        iterations=it,
        converged=converged,
        evidence=evidence,
    )
