"""Modified-Bessel ratios, von Mises circular moments and Laplace fits.

Everything here works with the ratio ``d_n(kappa) = I_n(kappa) / I_0(kappa)``
rather than the raw Bessel functions, which overflow long before the
concentrations reached by the estimator (``kappa`` routinely exceeds 1e8).

Three evaluation regimes are used:

* ``kappa <= 50``: ascending power series, summed in log space.
* large ``kappa`` relative to the order (``kappa >= 20 n^2``): the Hankel
  large-argument expansion, whose ``e^kappa / sqrt(2 pi kappa)`` prefactor
  cancels in the ratio.
* otherwise: Lentz continued fraction for ``I_n / I_{n-1}`` at the top order,
  followed by the (stable) downward ratio recurrence and a cumulative product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

KAPPA_MIN = 1e-6
KAPPA_MAX = 1e10

_SERIES_MAX_KAPPA = 50.0
_SERIES_TERMS = 200
_ASYMPTOTIC_FACTOR = 20.0
_ASYMPTOTIC_TERMS = 24


class AllZeroCoefficients(ValueError):
    """Raised when a log-linear circular density has no nonzero coefficient."""


def wrap_angle(x):
    """Map angles into [-pi, pi)."""
    return (np.asarray(x) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class VonMisesParams:
    mu: float
    kappa: float

    def __post_init__(self):
        if not (self.kappa >= 0.0):
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        object.__setattr__(self, "mu", float(wrap_angle(self.mu)))
        object.__setattr__(self, "kappa", float(self.kappa))


@dataclass(frozen=True)
class LogLinearCircularDensity:
    """Density proportional to ``exp(Re{sum_i conj(coeffs_i) e^{j g_i w}})``."""

    coeffs: np.ndarray
    exponents: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=complex).ravel()
        exponents = np.asarray(self.exponents).ravel()
        if coeffs.shape != exponents.shape:
            raise ValueError("coeffs and exponents must have equal length")
        if exponents.size and (exponents.min() < 0 or not np.all(exponents == np.round(exponents))):
            raise ValueError("exponents must be nonnegative integers")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "exponents", exponents.astype(np.int64))

    def aggregated(self) -> np.ndarray:
        """Conjugated coefficients summed per exponent, indexed 0..max(g)."""
        size = int(self.exponents.max()) + 1 if self.exponents.size else 1
        conj = np.conj(self.coeffs)
        re = np.bincount(self.exponents, weights=conj.real, minlength=size)
        im = np.bincount(self.exponents, weights=conj.imag, minlength=size)
        return re + 1j * im

    def log_density(self, omega):
        """Unnormalized log density ``f(omega)``."""
        b = self.aggregated()
        g = np.arange(b.size)
        omega = np.asarray(omega, dtype=float)
        return np.real(np.exp(1j * np.multiply.outer(omega, g)) @ b)


# ---------------------------------------------------------------------------
# Bessel ratios


def _series_log_bessel(n_max: int, kappa: float) -> np.ndarray:
    """log I_n(kappa) for n = 0..n_max via the ascending series."""
    n = np.arange(n_max + 1)[:, None]
    k = np.arange(_SERIES_TERMS)[None, :]
    log_half = math.log(kappa / 2.0)
    terms = (2 * k + n) * log_half - gammaln(k + 1) - gammaln(n + k + 1)
    return logsumexp(terms, axis=1)


def _lentz_ratio(n: int, kappa: float, tol: float = 1e-16, max_iter: int = 10_000_000) -> float:
    """I_n(kappa) / I_{n-1}(kappa) by the modified Lentz algorithm."""
    tiny = 1e-300
    f = tiny
    c = f
    d = 0.0
    two_over = 2.0 / kappa
    for k in range(max_iter):
        b = (n + k) * two_over
        d = b + d
        if d == 0.0:
            d = tiny
        c = b + 1.0 / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < tol:
            break
    return f


def _asymptotic_ratios(n_max: int, kappa: float) -> np.ndarray:
    """d_n for n = 0..n_max from the Hankel expansion of I_n and I_0."""
    mu = 4.0 * np.arange(n_max + 1, dtype=float) ** 2
    total = np.ones(n_max + 1)
    term = np.ones(n_max + 1)
    for k in range(1, _ASYMPTOTIC_TERMS + 1):
        term = term * -(mu - (2 * k - 1) ** 2) / (k * 8.0 * kappa)
        total = total + term
        if np.all(np.abs(term) < 1e-18 * np.abs(total)):
            break
    return total / total[0]


def bessel_ratios(n_max: int, kappa: float) -> np.ndarray:
    """Vector of ``I_n(kappa)/I_0(kappa)`` for ``n = 0..n_max``."""
    n_max = int(n_max)
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0:
        raise ValueError(f"kappa must be finite and nonnegative, got {kappa}")
    out = np.zeros(n_max + 1)
    out[0] = 1.0
    if n_max == 0 or kappa == 0.0:
        return out
    if kappa <= _SERIES_MAX_KAPPA:
        logs = _series_log_bessel(n_max, kappa)
        return np.exp(logs - logs[0])
    if kappa >= _ASYMPTOTIC_FACTOR * n_max**2:
        return _asymptotic_ratios(n_max, kappa)
    # downward recurrence: r_n = 1 / (2n/kappa + r_{n+1})
    r = np.empty(n_max + 1)
    r[n_max] = _lentz_ratio(n_max, kappa)
    two_over = 2.0 / kappa
    for n in range(n_max - 1, 0, -1):
        r[n] = 1.0 / (n * two_over + r[n + 1])
    out[1:] = np.exp(np.cumsum(np.log(r[1:])))
    return out


def bessel_ratio(n: int, kappa: float) -> float:
    """``I_n(kappa) / I_0(kappa)`` for a single nonnegative integer order."""
    n = int(n)
    if n < 0:
        raise ValueError("order must be nonnegative")
    return float(bessel_ratios(n, kappa)[n])


# ---------------------------------------------------------------------------
# Moments


def von_mises_moment(params: VonMisesParams, n: int) -> complex:
    """Circular moment ``E[e^{j n w}]`` of a von Mises variable."""
    return bessel_ratio(n, params.kappa) * complex(np.exp(1j * n * params.mu))


def expected_steering(params: VonMisesParams, exponents) -> np.ndarray:
    """Elementwise expectation of ``exp(j g_i w)`` under ``w ~ VM(mu, kappa)``.

    This is the von Mises-averaged phase vector: the point-mass steering vector
    ``exp(j g mu)`` with each entry contracted by ``d_{g_i}(kappa)``.
    """
    g = np.asarray(exponents, dtype=np.int64)
    if g.size == 0:
        return np.zeros(0, dtype=complex)
    ratios = bessel_ratios(int(g.max()), params.kappa)
    return ratios[g] * np.exp(1j * g * params.mu)


# ---------------------------------------------------------------------------
# Laplace fit of a log-linear circular density


def _derivatives(b: np.ndarray, g: np.ndarray, omega: float):
    e = b * np.exp(1j * g * omega)
    f = e.sum().real
    f1 = -(g * e).sum().imag
    f2 = -(g * g * e).sum().real
    return f, f1, f2


def fit_von_mises(
    density: LogLinearCircularDensity,
    prior: Optional[VonMisesParams] = None,
    newton_steps: int = 8,
) -> VonMisesParams:
    """Approximate ``exp(f(w))`` by a von Mises density centred at its mode.

    The mode is located on a zero-padded FFT grid and polished with undamped
    Newton steps; the concentration is the negated curvature at the mode,
    clamped to ``[KAPPA_MIN, KAPPA_MAX]``. A von Mises ``prior`` adds
    ``kappa_p cos(w - mu_p)`` to the log density.
    """
    b = density.aggregated()
    if prior is not None and prior.kappa > 0:
        if b.size < 2:
            b = np.concatenate([b, np.zeros(2 - b.size, dtype=complex)])
        b = b.copy()
        b[1] += prior.kappa * np.exp(-1j * prior.mu)
    if not np.any(b[1:] != 0):
        raise AllZeroCoefficients("density has no angle-dependent coefficient")

    g_max = b.size - 1
    n_grid = max(4 * (g_max + 1), 512)
    grid_vals = (n_grid * np.fft.ifft(b, n_grid)).real
    k_best = int(np.argmax(grid_vals))
    step = 2.0 * np.pi / n_grid
    omega0 = k_best * step

    g = np.arange(b.size, dtype=float)
    best_omega = omega0
    best_f, f1, f2 = _derivatives(b, g, omega0)
    omega = omega0
    for _ in range(newton_steps):
        if f2 >= 0.0:
            break
        delta = -f1 / f2
        new = omega + delta
        if abs(new - omega0) > step:
            break
        f_new, f1_new, f2_new = _derivatives(b, g, new)
        if f_new < best_f:
            break
        omega, f1, f2 = new, f1_new, f2_new
        best_omega, best_f = new, f_new
        if abs(delta) < 1e-12:
            break

    _, _, curv = _derivatives(b, g, best_omega)
    kappa = min(max(-curv, KAPPA_MIN), KAPPA_MAX)
    return VonMisesParams(mu=best_omega, kappa=kappa)
