"""Near-field array geometry, steering vectors and scene generation.

Both geometries are written in the separable form used by the estimator: a
channel path is the elementwise product of unit-modulus *steering factors*
``exp(sign * j * g_i * x)`` with integer exponent vectors ``g``.

ULA (elements at ``(0, delta_n, 0)``, ``delta_n = (2n - N + 1) d / 2``)::

    h = sum_l nu_l * a(omega_l) * c(s_l)
    a: g_n = n,            c: g_n = n (N - 1 - n)

UPA (elements at ``(0, m_i Delta, n_i Delta)``, row-major)::

    h = sum_l alpha_l * a(omega_l) * c(psi_l) * d(s_l)
    a: g_i = m_i,  c: g_i = n_i,  d: g_i = m_i^2 + n_i^2 with sign -1
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class InvalidConfig(ValueError):
    pass


class OutOfPrincipalRange(ValueError):
    """A spatial frequency maps outside the visible region (|sin| > 1)."""


class ArrayKind(str, enum.Enum):
    ULA = "ula"
    UPA = "upa"


class ChannelMode(str, enum.Enum):
    EXACT = "exact"
    FRESNEL = "fresnel"


@dataclass(frozen=True)
class ArrayGeometry:
    kind: ArrayKind
    n_h: int
    n_v: int = 1
    carrier_hz: float = 100e9
    spacing_in_wavelengths: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", ArrayKind(self.kind))
        if self.n_h < 1 or self.n_v < 1:
            raise InvalidConfig("antenna counts must be positive")
        if self.kind is ArrayKind.ULA and self.n_v != 1:
            raise InvalidConfig("a ULA has n_v = 1")
        if self.carrier_hz <= 0 or self.spacing_in_wavelengths <= 0:
            raise InvalidConfig("carrier and spacing must be positive")

    @classmethod
    def ula(cls, n: int, carrier_hz: float = 100e9, spacing_in_wavelengths: float = 0.5):
        return cls(ArrayKind.ULA, n, 1, carrier_hz, spacing_in_wavelengths)

    @classmethod
    def upa(cls, n_h: int, n_v: int, carrier_hz: float = 3e9, spacing_in_wavelengths: float = 0.5):
        return cls(ArrayKind.UPA, n_h, n_v, carrier_hz, spacing_in_wavelengths)

    @property
    def n_total(self) -> int:
        return self.n_h * self.n_v

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def spacing(self) -> float:
        return self.spacing_in_wavelengths * self.wavelength

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    @property
    def kd(self) -> float:
        return self.wavenumber * self.spacing

    @property
    def index_h(self) -> np.ndarray:
        """Horizontal index m_i (ULA: element index n)."""
        i = np.arange(self.n_total)
        return i % self.n_h

    @property
    def index_v(self) -> np.ndarray:
        i = np.arange(self.n_total)
        return i // self.n_h

    @property
    def aperture(self) -> float:
        if self.kind is ArrayKind.ULA:
            return self.n_h * self.spacing
        return self.spacing * math.hypot(self.n_h, self.n_v)

    def s_from_r(self, r):
        """Curvature phase for distance r (both geometries: k d^2 / (2 r))."""
        return self.kd * self.spacing / (2.0 * np.asarray(r, dtype=float))

    def r_from_s(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(s > 0, self.kd * self.spacing / (2.0 * np.where(s > 0, s, 1.0)), np.inf)


@dataclass(frozen=True)
class SteeringFactor:
    """Unit-modulus phase vector ``exp(sign * j * g * x)``."""

    exponents: np.ndarray
    sign: int = 1

    def __call__(self, x: float) -> np.ndarray:
        return np.exp(1j * self.sign * self.exponents * x)

    def matrix(self, xs) -> np.ndarray:
        """N x K matrix with column k equal to ``self(xs[k])``."""
        return np.exp(1j * self.sign * np.multiply.outer(self.exponents, np.asarray(xs, dtype=float)))


def frequency_factors(geom: ArrayGeometry) -> List[SteeringFactor]:
    """Linear-phase factors: [a(omega)] for ULA, [a(omega), c(psi)] for UPA."""
    if geom.kind is ArrayKind.ULA:
        return [SteeringFactor(np.arange(geom.n_total), 1)]
    return [SteeringFactor(geom.index_h, 1), SteeringFactor(geom.index_v, 1)]


def curvature_factor(geom: ArrayGeometry) -> SteeringFactor:
    if geom.kind is ArrayKind.ULA:
        n = np.arange(geom.n_total)
        return SteeringFactor(n * (geom.n_total - 1 - n), 1)
    m, v = geom.index_h, geom.index_v
    return SteeringFactor(m * m + v * v, -1)


# ---------------------------------------------------------------------------
# Scene description


@dataclass(frozen=True)
class Scatterer:
    r: float
    theta: float
    alpha: complex
    phi: float = 0.0

    def position(self, geom: ArrayGeometry) -> np.ndarray:
        if geom.kind is ArrayKind.ULA:
            return np.array([self.r * np.cos(self.theta), self.r * np.sin(self.theta), 0.0])
        ct = np.cos(self.theta)
        return self.r * np.array([ct * np.cos(self.phi), ct * np.sin(self.phi), np.sin(self.theta)])


@dataclass(frozen=True)
class PathParams:
    omega: float
    s: float
    gain: complex
    psi: float = 0.0

    @property
    def freqs(self) -> Tuple[float, ...]:
        return (self.omega, self.psi)


@dataclass
class Scene:
    scatterers: List[Scatterer] = field(default_factory=list)

    def __len__(self):
        return len(self.scatterers)

    @property
    def r(self) -> np.ndarray:
        return np.array([sc.r for sc in self.scatterers])

    @property
    def theta(self) -> np.ndarray:
        return np.array([sc.theta for sc in self.scatterers])

    @property
    def phi(self) -> np.ndarray:
        return np.array([sc.phi for sc in self.scatterers])

    @property
    def alpha(self) -> np.ndarray:
        return np.array([sc.alpha for sc in self.scatterers], dtype=complex)


# ---------------------------------------------------------------------------
# Geometry


def element_positions(geom: ArrayGeometry) -> np.ndarray:
    """N x 3 array of element coordinates in meters."""
    pos = np.zeros((geom.n_total, 3))
    if geom.kind is ArrayKind.ULA:
        n = np.arange(geom.n_total)
        pos[:, 1] = (2 * n - geom.n_total + 1) * geom.spacing / 2.0
    else:
        pos[:, 1] = geom.index_h * geom.spacing
        pos[:, 2] = geom.index_v * geom.spacing
    return pos


def exact_distance(geom: ArrayGeometry, scatterer: Scatterer, element_index=None):
    """Euclidean scatterer-to-element distance (all elements if index is None)."""
    pos = element_positions(geom)
    if element_index is not None:
        pos = pos[element_index]
    return np.linalg.norm(scatterer.position(geom) - pos, axis=-1)


def fresnel_distance(geom: ArrayGeometry, scatterer: Scatterer, element_index=None):
    """Second-order expansion of ``exact_distance`` in aperture / r."""
    r, th = scatterer.r, scatterer.theta
    if geom.kind is ArrayKind.ULA:
        delta = element_positions(geom)[:, 1]
        out = r + delta**2 / (2.0 * r) - delta * np.sin(th)
    else:
        m, v, D = geom.index_h, geom.index_v, geom.spacing
        lin = m * np.cos(th) * np.sin(scatterer.phi) + v * np.sin(th)
        out = r - D * lin + D**2 * (m * m + v * v) / (2.0 * r)
    return out if element_index is None else out[element_index]


def rayleigh_distance(geom: ArrayGeometry) -> float:
    return 2.0 * geom.aperture**2 / geom.wavelength


# ---------------------------------------------------------------------------
# Re-parameterization


def _ula_phase_offset(geom: ArrayGeometry, theta: float, r: float) -> complex:
    n, kd, d = geom.n_total, geom.kd, geom.spacing
    return np.exp(-1j * (n - 1) / 2.0 * kd * (np.sin(theta) + (n - 1) * d / (4.0 * r)))


def to_path_params(geom: ArrayGeometry, scatterer: Scatterer) -> PathParams:
    s = float(geom.s_from_r(scatterer.r))
    if geom.kind is ArrayKind.ULA:
        omega = geom.kd * np.sin(scatterer.theta)
        nu = scatterer.alpha * _ula_phase_offset(geom, scatterer.theta, scatterer.r)
        return PathParams(omega=float(omega), s=s, gain=complex(nu))
    omega = geom.kd * np.cos(scatterer.theta) * np.sin(scatterer.phi)
    psi = geom.kd * np.sin(scatterer.theta)
    return PathParams(omega=float(omega), s=s, gain=complex(scatterer.alpha), psi=float(psi))


def _arcsin_checked(x: float, clamp: bool) -> float:
    if abs(x) > 1.0:
        if not clamp:
            raise OutOfPrincipalRange(f"|sin| = {abs(x):.6g} exceeds 1")
        x = math.copysign(1.0, x)
    return math.asin(x)


def from_path_params(geom: ArrayGeometry, params: PathParams, clamp: bool = False):
    """Invert the re-parameterization: returns ``(theta, phi, r)``.

    ``r`` is ``inf`` when ``s == 0``; ``phi`` is 0 for a ULA. With ``clamp``
    an unphysical frequency is mapped to endfire instead of raising.
    """
    r = float(geom.r_from_s(params.s))
    if geom.kind is ArrayKind.ULA:
        return _arcsin_checked(params.omega / geom.kd, clamp), 0.0, r
    theta = _arcsin_checked(params.psi / geom.kd, clamp)
    ct = math.cos(theta)
    phi = _arcsin_checked(params.omega / (geom.kd * ct) if ct > 0 else math.inf, clamp)
    return theta, phi, r


def steering_reparam(geom: ArrayGeometry, params: PathParams) -> np.ndarray:
    """Unit-gain path vector in the separable form (without the gain)."""
    out = curvature_factor(geom)(params.s)
    for factor, x in zip(frequency_factors(geom), params.freqs):
        out = out * factor(x)
    return out


# ---------------------------------------------------------------------------
# Channel synthesis


def steering_vector(geom: ArrayGeometry, scatterer: Scatterer, mode=ChannelMode.EXACT) -> np.ndarray:
    """``b`` with entries ``exp(j k (r - d_i))``."""
    mode = ChannelMode(mode)
    dist = exact_distance(geom, scatterer) if mode is ChannelMode.EXACT else fresnel_distance(geom, scatterer)
    return np.exp(1j * geom.wavenumber * (scatterer.r - dist))


def synthesize_channel(geom: ArrayGeometry, scene: Scene, mode=ChannelMode.EXACT) -> np.ndarray:
    h = np.zeros(geom.n_total, dtype=complex)
    for sc in scene.scatterers:
        h += sc.alpha * steering_vector(geom, sc, mode)
    return h


# ---------------------------------------------------------------------------
# Random scenes


@dataclass(frozen=True)
class SceneConfig:
    l_paths: int = 6
    r_min: float = 3.0
    r_max: float = 90.0
    theta_range_deg: Tuple[float, float] = (-60.0, 60.0)
    phi_range_deg: Tuple[float, float] = (-80.0, 80.0)
    min_angle_sep_deg: float = 0.0
    fixed_r: Optional[float] = None

    def validate(self):
        if self.l_paths < 1:
            raise InvalidConfig("l_paths must be >= 1")
        if self.r_min <= 0 or self.r_min > self.r_max:
            raise InvalidConfig(f"invalid distance range [{self.r_min}, {self.r_max}]")
        if self.fixed_r is not None and self.fixed_r <= 0:
            raise InvalidConfig("fixed_r must be positive")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_scene(geom: ArrayGeometry, config: SceneConfig, rng_seed) -> Scene:
    """Draw L scatterers: r ~ U[r_min, r_max], angles uniform, alpha ~ CN(0, 1)."""
    config.validate()
    rng = _rng(rng_seed)
    th_lo, th_hi = np.deg2rad(config.theta_range_deg)
    ph_lo, ph_hi = np.deg2rad(config.phi_range_deg)
    sep = np.deg2rad(config.min_angle_sep_deg)
    scatterers: List[Scatterer] = []
    attempts = 0
    while len(scatterers) < config.l_paths:
        attempts += 1
        if attempts > 10_000 * config.l_paths:
            raise InvalidConfig("min_angle_sep_deg too large for the angle range")
        r = config.fixed_r if config.fixed_r is not None else rng.uniform(config.r_min, config.r_max)
        theta = rng.uniform(th_lo, th_hi)
        phi = rng.uniform(ph_lo, ph_hi) if geom.kind is ArrayKind.UPA else 0.0
        alpha = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2.0)
        if sep > 0 and any(
            math.hypot(theta - o.theta, phi - o.phi) < sep for o in scatterers
        ):
            continue
        scatterers.append(Scatterer(r=float(r), theta=float(theta), alpha=complex(alpha), phi=float(phi)))
    return Scene(scatterers)


def add_noise(h: np.ndarray, snr: float, l_paths: int, rng_seed):
    """Add CN(0, N0 I) noise with ``N0 = L / snr`` (snr linear)."""
    if snr <= 0:
        raise InvalidConfig("snr must be positive (linear scale)")
    rng = _rng(rng_seed)
    n0 = l_paths / snr
    noise = np.sqrt(n0 / 2.0) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return h + noise, n0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)
