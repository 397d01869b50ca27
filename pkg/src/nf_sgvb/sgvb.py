"""Semi-gridless variational Bayes (SG-VB) near-field channel estimator.

Mean-field factors per path ``l``:

* spatial frequencies (``omega``, plus ``psi`` on a UPA): von Mises, fitted by
  a Laplace approximation of ``exp(Re{eta^H a(omega)})``;
* curvature ``s``: point estimate from a coarse grid plus damped Newton;
* gain ``nu`` (``alpha`` on a UPA): complex Gaussian;
* gain precision ``beta``: Gamma.

A single Gamma factor models the noise precision ``gamma``. The residual
``eps = y - sum_l nu_l * prod(expected factors of l)`` is patched in place after
every update and recomputed from scratch once per sweep.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .channel import (
    ArrayGeometry,
    ArrayKind,
    PathParams,
    SteeringFactor,
    curvature_factor,
    frequency_factors,
    from_path_params,
)
from .vonmises import (
    KAPPA_MAX,
    AllZeroCoefficients,
    LogLinearCircularDensity,
    VonMisesParams,
    expected_steering,
    fit_von_mises,
    wrap_angle,
)

log = logging.getLogger(__name__)

GAMMA_MIN = 1e-12
GAMMA_MAX = 1e12


class ResidualDrift(AssertionError):
    pass


@dataclass
class SgvbConfig:
    l_paths: int = 6
    max_iters: int = 150
    grid_points_k: int = 256
    newton_step: float = 0.01
    newton_tol: float = 1e-10
    newton_max_steps: int = 50
    conv_tol: float = 1e-6
    a_beta: float = 1e-6
    b_beta: float = 1e-6
    a_gamma: float = 1e-6
    b_gamma: float = 1e-6
    r_min: float = 3.0
    r_max: float = 90.0
    prune_tol: float = 1e-4
    # per-path SNR (N * gamma * |nu|^2) below which a path is reported inactive;
    # None selects log(M) + 3 with M the number of (frequency, curvature) cells
    detect_threshold: Optional[float] = None
    audit: bool = False

    def __post_init__(self):
        if self.l_paths < 1:
            raise ValueError("l_paths must be >= 1")
        if self.grid_points_k < 8:
            raise ValueError("grid_points_k must be >= 8")
        if not 0 < self.newton_step <= 1:
            raise ValueError("newton_step must lie in (0, 1]")
        if self.r_min <= 0 or self.r_min > self.r_max:
            raise ValueError("invalid distance range")

    @classmethod
    def for_geometry(cls, geom: ArrayGeometry, **kw):
        """Geometry-dependent defaults: 150 sweeps on a ULA, 200 on a UPA."""
        kw.setdefault("max_iters", 150 if geom.kind is ArrayKind.ULA else 200)
        return cls(**kw)

    def s_range(self, geom: ArrayGeometry):
        return float(geom.s_from_r(self.r_max)), float(geom.s_from_r(self.r_min))


def make_s_grid(geom: ArrayGeometry, config: SgvbConfig) -> np.ndarray:
    """K points uniform in s over [s_min, s_max], with s = 0 prepended."""
    s_min, s_max = config.s_range(geom)
    return np.concatenate([[0.0], np.linspace(s_min, s_max, config.grid_points_k)])


# ---------------------------------------------------------------------------
# Curvature search


def curvature_objective(zeta: np.ndarray, factor: SteeringFactor, s: float):
    """``L(s) = Re{zeta^H f(s)}`` with its first and second derivatives."""
    g = factor.exponents
    e = np.conj(zeta) * np.exp(1j * factor.sign * g * s)
    ge = g * e
    return e.sum().real, -factor.sign * ge.sum().imag, -(g * ge).sum().real


def grid_search_s(
    zeta: np.ndarray,
    factor: SteeringFactor,
    s_grid: np.ndarray,
    step: float = 0.01,
    tol: float = 1e-10,
    max_steps: int = 50,
    grid_matrix: Optional[np.ndarray] = None,
    s_prev: Optional[float] = None,
) -> float:
    """Coarse-to-fine maximizer of ``Re{zeta^H f(s)}`` over ``s >= 0``.

    The coarse argmax over ``s_grid`` seeds damped Newton steps
    ``s <- s - step * L'/L''``. When ``s_prev`` (the previous estimate) scores
    at least as well as the coarse argmax, Newton resumes from it instead, so
    successive calls keep refining rather than restarting. ``grid_matrix``
    (``factor.matrix(s_grid)``) can be passed to avoid rebuilding the N x K
    phase table on every call.
    """
    if grid_matrix is None:
        grid_matrix = factor.matrix(s_grid)
    values = (np.conj(zeta) @ grid_matrix).real
    k_best = int(np.argmax(values))
    s0 = float(s_grid[k_best])
    l0 = float(values[k_best])
    s_hi = float(np.max(s_grid))

    s = s0
    val, d1, d2 = curvature_objective(zeta, factor, s)
    if s_prev is not None and 0.0 <= s_prev <= s_hi:
        prev = curvature_objective(zeta, factor, s_prev)
        if prev[0] >= l0:
            s, l0 = float(s_prev), prev[0]
            s0 = s
            val, d1, d2 = prev
    for _ in range(max_steps):
        if d2 >= 0.0:
            break
        s_new = s - step * d1 / d2
        val_new, d1, d2 = curvature_objective(zeta, factor, s_new)
        xi = abs(val_new - val)
        s, val = s_new, val_new
        if xi < tol:
            break
    if s < 0.0:
        return 0.0 if val >= l0 or s0 == 0.0 else s0
    if s > s_hi or val < l0:
        return s0
    return float(s)


# ---------------------------------------------------------------------------
# State


@dataclass
class EstimatorState:
    geom: ArrayGeometry
    config: SgvbConfig
    y: np.ndarray
    freq_factors: List[SteeringFactor]
    curv_factor: SteeringFactor
    s_grid: np.ndarray
    grid_matrix: np.ndarray
    mu: np.ndarray  # (L, F) von Mises means
    kappa: np.ndarray  # (L, F) von Mises concentrations
    s_hat: np.ndarray  # (L,)
    nu: np.ndarray  # (L,) complex
    tau: np.ndarray  # (L,)
    beta: np.ndarray  # (L,)
    cache: np.ndarray  # (L, F + 1, N) expected factors, curvature last
    gamma: float
    residual: np.ndarray
    iter: int = 0
    history: List[dict] = field(default_factory=list)
    skipped: int = 0

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def l_paths(self) -> int:
        return self.nu.size

    def atom(self, l: int) -> np.ndarray:
        return np.prod(self.cache[l], axis=0)

    def atoms(self) -> np.ndarray:
        return np.prod(self.cache, axis=1)

    def other_factors(self, l: int, skip: int) -> np.ndarray:
        idx = [j for j in range(self.cache.shape[1]) if j != skip]
        return np.prod(self.cache[l, idx], axis=0)

    def reconstruction(self) -> np.ndarray:
        return self.nu @ self.atoms()

    def fresh_residual(self) -> np.ndarray:
        return self.y - self.reconstruction()

    def audit(self, tol: float = 1e-9):
        fresh = self.fresh_residual()
        scale = max(np.linalg.norm(self.y), np.linalg.norm(fresh), 1e-300)
        err = np.linalg.norm(fresh - self.residual) / scale
        if err > tol:
            raise ResidualDrift(f"residual drift {err:.3e} exceeds {tol:.1e}")
        return err

    def path_params(self, l: int) -> PathParams:
        psi = float(self.mu[l, 1]) if self.mu.shape[1] > 1 else 0.0
        return PathParams(omega=float(self.mu[l, 0]), s=float(self.s_hat[l]), gain=complex(self.nu[l]), psi=psi)


def _empty_state(y, geom: ArrayGeometry, config: SgvbConfig) -> EstimatorState:
    y = np.asarray(y, dtype=complex).ravel()
    if y.size != geom.n_total:
        raise ValueError(f"observation has length {y.size}, geometry expects {geom.n_total}")
    ffs = frequency_factors(geom)
    cf = curvature_factor(geom)
    s_grid = make_s_grid(geom, config)
    L, F, N = config.l_paths, len(ffs), geom.n_total
    cache = np.ones((L, F + 1, N), dtype=complex)
    return EstimatorState(
        geom=geom,
        config=config,
        y=y,
        freq_factors=ffs,
        curv_factor=cf,
        s_grid=s_grid,
        grid_matrix=cf.matrix(s_grid),
        mu=np.zeros((L, F)),
        kappa=np.zeros((L, F)),
        s_hat=np.zeros(L),
        nu=np.zeros(L, dtype=complex),
        tau=np.zeros(L),
        beta=np.ones(L),
        cache=cache,
        gamma=1.0,
        residual=y.copy(),
    )


def _clamp_gamma(g: float) -> float:
    if not math.isfinite(g):
        return GAMMA_MAX
    return min(max(g, GAMMA_MIN), GAMMA_MAX)


def _search_s(state: EstimatorState, zeta: np.ndarray, s_prev: Optional[float] = None) -> float:
    c = state.config
    return grid_search_s(
        zeta,
        state.curv_factor,
        state.s_grid,
        step=c.newton_step,
        tol=c.newton_tol,
        max_steps=c.newton_max_steps,
        grid_matrix=state.grid_matrix,
        s_prev=s_prev,
    )


def _joint_grid_peak(state: EstimatorState, x: np.ndarray):
    """Grid argmax of |atom^H x| over (frequencies, curvature) for point-mass atoms."""
    geom = state.geom
    dechirped = np.conj(state.grid_matrix) * x[:, None]  # N x (K + 1)
    if geom.kind is ArrayKind.ULA:
        m = 4 * geom.n_total
        spec = np.fft.fft(dechirped, n=m, axis=0)
        power = np.abs(spec) ** 2
        k, j = np.unravel_index(int(np.argmax(power)), power.shape)
        return [2 * np.pi * k / m], float(state.s_grid[j])
    mh, mv = 4 * geom.n_h, 4 * geom.n_v
    cube = dechirped.reshape(geom.n_v, geom.n_h, -1)
    spec = np.fft.fft2(cube, s=(mv, mh), axes=(0, 1))
    power = np.abs(spec) ** 2
    kv, kh, j = np.unravel_index(int(np.argmax(power)), power.shape)
    return [2 * np.pi * kh / mh, 2 * np.pi * kv / mv], float(state.s_grid[j])


def _atom_from(state: EstimatorState, theta) -> np.ndarray:
    factors = list(state.freq_factors) + [state.curv_factor]
    atom = np.ones(state.n, dtype=complex)
    for f, t in zip(factors, theta):
        atom = atom * f(t)
    return atom


def _refine_atom(state: EstimatorState, x: np.ndarray, theta: np.ndarray, steps: int = 3) -> np.ndarray:
    """Joint Newton ascent of ``|atom(theta)^H x|^2`` over frequencies and curvature.

    The coordinates are strongly coupled through the gain phase, so a joint
    step converges far faster than cycling through them one at a time.
    """
    factors = list(state.freq_factors) + [state.curv_factor]
    G = np.array([f.sign * f.exponents for f in factors], dtype=float)  # P x N
    s_lo, s_hi = state.s_grid[0], state.s_grid[-1]
    theta = np.array(theta, dtype=float)

    def score(th):
        return abs(np.vdot(_atom_from(state, th), x)) ** 2

    best = score(theta)
    for _ in range(steps):
        e = np.conj(x) * _atom_from(state, theta)
        S = e.sum()
        dS = 1j * (G @ e)
        d2S = -(G * e) @ G.T
        grad = 2 * np.real(np.conj(S) * dS)
        hess = 2 * np.real(np.outer(np.conj(dS), dS) + np.conj(S) * d2S)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or grad @ step <= 0:
            break
        cand = theta + step
        cand[-1] = min(max(cand[-1], s_lo), s_hi)
        val = score(cand)
        if val < best:
            break
        theta, best = cand, val
    return theta


def initialize(y, geom: ArrayGeometry, config: SgvbConfig, rng_seed=None, refine_rounds: int = 3) -> EstimatorState:
    """Greedy matched-pursuit warm start with cyclic refinement.

    Each new path starts at the joint grid peak over (frequency, curvature) of
    the residual. After every addition all selected paths are revisited in turn:
    the path is added back to the residual, its parameters are polished by a
    joint Newton ascent, and then all gains are refit by least squares. The
    revisits stop strong paths from being split across two estimates.
    Concentrations are set afterwards from the curvature of each path's
    frequency density at the resulting noise precision. ``rng_seed`` is
    accepted for interface symmetry; the procedure is deterministic.
    """
    state = _empty_state(y, geom, config)
    L, F = state.l_paths, len(state.freq_factors)
    thetas: List[np.ndarray] = []
    atoms = np.zeros((0, state.n), dtype=complex)
    gains = np.zeros(0, dtype=complex)
    eps = state.y.copy()
    for _ in range(L):
        if not np.any(eps):
            break
        freqs, s = _joint_grid_peak(state, eps)
        theta = _refine_atom(state, eps, np.array(list(freqs) + [s]))
        thetas.append(theta)
        atoms = np.vstack([atoms, _atom_from(state, theta)])
        gains = np.linalg.lstsq(atoms.T, state.y, rcond=None)[0]
        eps = state.y - gains @ atoms
        for _ in range(refine_rounds):
            for l in range(len(thetas)):
                x = eps + gains[l] * atoms[l]
                thetas[l] = _refine_atom(state, x, thetas[l])
                atoms[l] = _atom_from(state, thetas[l])
                gains[l] = np.vdot(atoms[l], x) / state.n
                eps = x - gains[l] * atoms[l]
            gains = np.linalg.lstsq(atoms.T, state.y, rcond=None)[0]
            eps = state.y - gains @ atoms

    for l, theta in enumerate(thetas):
        state.mu[l] = wrap_angle(theta[:F])
        state.kappa[l] = KAPPA_MAX
        state.s_hat[l] = theta[F]
        state.nu[l] = gains[l]
        state.cache[l, :F] = [f(w) for f, w in zip(state.freq_factors, theta[:F])]
        state.cache[l, F] = state.curv_factor(theta[F])

    state.gamma = _clamp_gamma(state.n / max(float(np.vdot(eps, eps).real), 1e-12))
    state.residual = state.fresh_residual()
    # concentrations from the frequency densities at the warm-start gamma
    for l in range(L):
        if state.nu[l] == 0:
            continue
        for fi in range(F):
            _refit_frequency(state, l, fi)
    state.residual = state.fresh_residual()
    state.tau[:] = 1.0 / (state.n * state.gamma)
    for l in range(L):
        update_beta(state, l)
    return state


def initialize_from_params(
    y,
    geom: ArrayGeometry,
    config: SgvbConfig,
    params: Sequence[PathParams],
    kappa: float = KAPPA_MAX,
    gamma: float = GAMMA_MAX,
) -> EstimatorState:
    """State with every path placed at the given parameters (tests, oracles)."""
    state = _empty_state(y, geom, config)
    F = len(state.freq_factors)
    for l, p in enumerate(params):
        freqs = [p.omega, p.psi][:F]
        state.mu[l] = wrap_angle(freqs)
        state.kappa[l] = kappa
        state.s_hat[l] = p.s
        state.nu[l] = p.gain
        for fi, f in enumerate(state.freq_factors):
            state.cache[l, fi] = expected_steering(VonMisesParams(state.mu[l, fi], kappa), f.exponents)
        state.cache[l, F] = state.curv_factor(p.s)
    state.gamma = _clamp_gamma(gamma)
    state.tau[:] = 1.0 / (state.n * state.gamma)
    state.residual = state.fresh_residual()
    for l in range(state.l_paths):
        update_beta(state, l)
    return state


# ---------------------------------------------------------------------------
# Updates


def _refit_frequency(state: EstimatorState, l: int, fi: int) -> bool:
    nu = state.nu[l]
    if nu == 0:
        state.skipped += 1
        return False
    other = state.other_factors(l, fi)
    atom_old = other * state.cache[l, fi]
    eta = 2.0 * state.gamma * np.conj(nu) * np.conj(other) * (state.residual + nu * atom_old)
    factor = state.freq_factors[fi]
    try:
        vm = fit_von_mises(LogLinearCircularDensity(eta, factor.exponents))
    except AllZeroCoefficients:
        state.skipped += 1
        return False
    new = expected_steering(vm, factor.exponents)
    state.mu[l, fi] = vm.mu
    state.kappa[l, fi] = vm.kappa
    state.cache[l, fi] = new
    state.residual += nu * (atom_old - other * new)
    return True


def update_frequency(state: EstimatorState, l: int, factor: int = 0) -> bool:
    """Von Mises update of frequency ``factor`` (0: omega, 1: psi) of path l.

    Returns False (state untouched) when the path gain is zero.
    """
    updated = _refit_frequency(state, l, factor)
    if state.config.audit:
        state.audit()
    return updated


def update_s(state: EstimatorState, l: int) -> bool:
    nu = state.nu[l]
    if nu == 0:
        state.skipped += 1
        return False
    F = len(state.freq_factors)
    other = state.other_factors(l, F)
    c_old = state.cache[l, F].copy()
    zeta = 2.0 * state.gamma * np.conj(nu) * np.conj(other) * (state.residual + nu * other * c_old)
    s = _search_s(state, zeta, float(state.s_hat[l]))
    c_new = state.curv_factor(s)
    state.s_hat[l] = s
    state.cache[l, F] = c_new
    state.residual += nu * other * (c_old - c_new)
    if state.config.audit:
        state.audit()
    return True


def update_gain(state: EstimatorState, l: int) -> None:
    atom = state.atom(l)
    n = state.n
    nu_old = state.nu[l]
    z = (nu_old * np.vdot(atom, atom).real + np.vdot(atom, state.residual)) / n
    tau = 1.0 / (n * state.gamma + state.beta[l])
    nu_new = z * n * state.gamma * tau
    state.tau[l] = tau
    state.nu[l] = nu_new
    state.residual += (nu_old - nu_new) * atom
    if state.config.audit:
        state.audit()


def update_beta(state: EstimatorState, l: int) -> None:
    c = state.config
    state.beta[l] = (c.a_beta + 1.0) / (c.b_beta + abs(state.nu[l]) ** 2 + state.tau[l])


def expected_residual_energy(state: EstimatorState) -> float:
    """Posterior expectation of ``||y - sum_l nu_l * atom_l||^2``.

    Each random atom has unit-modulus entries, so ``E||atom||^2 = N`` while the
    squared norm of its mean is ``||atom_hat||^2 <= N``.
    """
    norms = np.sum(np.abs(state.atoms()) ** 2, axis=1)
    n = state.n
    second = np.abs(state.nu) ** 2 + state.tau
    eps2 = float(np.vdot(state.residual, state.residual).real)
    return eps2 + float(np.sum(state.tau * norms) + np.sum(second * (n - norms)))


def update_gamma(state: EstimatorState) -> None:
    c = state.config
    state.residual = state.fresh_residual()
    energy = expected_residual_energy(state)
    state.gamma = _clamp_gamma((c.a_gamma + state.n) / (c.b_gamma + energy))


def sweep(state: EstimatorState) -> None:
    """One full pass: per path frequencies -> s -> gain, then all beta, then gamma."""
    F = len(state.freq_factors)
    for l in range(state.l_paths):
        for fi in range(F):
            update_frequency(state, l, fi)
        update_s(state, l)
        update_gain(state, l)
    for l in range(state.l_paths):
        update_beta(state, l)
    update_gamma(state)
    state.iter += 1


# ---------------------------------------------------------------------------
# Driver


@dataclass
class SgvbResult:
    state: EstimatorState
    h_hat: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    s: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    active: np.ndarray
    iterations: int
    converged: bool
    wall_s: float = 0.0

    def path_params(self) -> List[PathParams]:
        return [self.state.path_params(l) for l in range(self.nu.size)]


def detect_threshold(state: EstimatorState) -> float:
    c = state.config
    if c.detect_threshold is not None:
        return c.detect_threshold
    cells = sum(4 * int(f.exponents.max() + 1) for f in state.freq_factors) * state.s_grid.size
    return math.log(cells) + 3.0


def active_paths(state: EstimatorState) -> np.ndarray:
    power = np.abs(state.nu) ** 2
    if not np.any(power > 0):
        return np.zeros(power.size, dtype=bool)
    relative = power >= state.config.prune_tol * power.max()
    snr = state.n * state.gamma * power
    return relative & (snr >= detect_threshold(state))


def _derotate(geom: ArrayGeometry, nu: complex, omega: float, s: float) -> complex:
    if geom.kind is ArrayKind.UPA:
        return nu
    n = geom.n_total
    return nu * np.exp(1j * ((n - 1) * omega / 2.0 + (n - 1) ** 2 * s / 4.0))


def summarize(state: EstimatorState, iterations: int, converged: bool, wall_s: float = 0.0) -> SgvbResult:
    geom = state.geom
    L = state.l_paths
    theta, phi, r = np.zeros(L), np.zeros(L), np.zeros(L)
    for l in range(L):
        theta[l], phi[l], r[l] = from_path_params(geom, state.path_params(l), clamp=True)
    omega = state.mu[:, 0].copy()
    psi = state.mu[:, 1].copy() if state.mu.shape[1] > 1 else np.zeros(L)
    alpha = np.array([_derotate(geom, state.nu[l], omega[l], state.s_hat[l]) for l in range(L)])
    return SgvbResult(
        state=state,
        h_hat=state.reconstruction(),
        omega=omega,
        psi=psi,
        s=state.s_hat.copy(),
        nu=state.nu.copy(),
        alpha=alpha,
        theta=theta,
        phi=phi,
        r=r,
        active=active_paths(state),
        iterations=iterations,
        converged=converged,
        wall_s=wall_s,
    )


def run(
    y,
    geom: ArrayGeometry,
    config: SgvbConfig,
    rng_seed=None,
    state: Optional[EstimatorState] = None,
    stop_early: bool = True,
) -> SgvbResult:
    """Run SG-VB until the relative residual-norm change drops below ``conv_tol``.

    With ``stop_early=False`` all ``max_iters`` sweeps run (the convergence
    flag is still reported), which gives fixed-length iteration traces.
    """
    t0 = time.perf_counter()
    if state is None:
        state = initialize(y, geom, config, rng_seed)
    prev = float(np.linalg.norm(state.residual))
    converged = False
    for _ in range(config.max_iters):
        sweep(state)
        cur = float(np.linalg.norm(state.residual))
        state.history.append(
            {
                "iter": state.iter,
                "residual_norm": cur,
                "gamma": state.gamma,
                "omega": state.mu[:, 0].copy(),
                "psi": state.mu[:, 1].copy() if state.mu.shape[1] > 1 else None,
                "s": state.s_hat.copy(),
                "nu_abs": np.abs(state.nu),
            }
        )
        if abs(prev - cur) <= config.conv_tol * max(prev, 1e-300):
            converged = True
            if stop_early:
                break
        prev = cur
    return summarize(state, state.iter, converged, time.perf_counter() - t0)
