"""Experiment configuration: a flat ``section.key = value`` text format.

Example::

    defaults ula-table2
    # comments start with '#'
    sweep.variable = snr
    sweep.values = 0, 10, 20
    trials = 50
    sgvb.max_iters = 100

A ``defaults <preset>`` line loads a preset first; later keys override it.
Every error is raised as :class:`InvalidConfig` carrying the offending line.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from .baselines import SblConfig
from .channel import ArrayGeometry, ChannelMode, InvalidConfig, SceneConfig
from .sgvb import SgvbConfig

ESTIMATORS = ("sgvb", "ls", "oracle_ls", "p_somp", "sbl")
SWEEP_VARIABLES = ("snr", "distance", "grid_size")


@dataclass
class GeometryBlock:
    kind: str = "ula"
    n: int = 256
    n_h: int = 16
    n_v: int = 16
    carrier_hz: float = 100e9
    spacing_in_wavelengths: float = 0.5

    def build(self) -> ArrayGeometry:
        if self.kind == "ula":
            return ArrayGeometry.ula(self.n, self.carrier_hz, self.spacing_in_wavelengths)
        return ArrayGeometry.upa(self.n_h, self.n_v, self.carrier_hz, self.spacing_in_wavelengths)


@dataclass
class SceneBlock:
    l_paths: int = 6
    r_min: float = 3.0
    r_max: float = 90.0
    theta_range_deg: Tuple[float, float] = (-60.0, 60.0)
    phi_range_deg: Tuple[float, float] = (-80.0, 80.0)
    min_angle_sep_deg: float = 0.0
    channel_mode: str = "exact"

    def scene_config(self, fixed_r: Optional[float] = None) -> SceneConfig:
        return SceneConfig(
            l_paths=self.l_paths,
            r_min=self.r_min,
            r_max=self.r_max,
            theta_range_deg=tuple(self.theta_range_deg),
            phi_range_deg=tuple(self.phi_range_deg),
            min_angle_sep_deg=self.min_angle_sep_deg,
            fixed_r=fixed_r,
        )


@dataclass
class SweepBlock:
    variable: str = "snr"
    values: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    # SNR used when the sweep variable is not snr
    snr_db: float = 20.0


@dataclass
class CodebookBlock:
    angular_factor: float = 3.0
    coherence_param: float = 0.5
    cache_dir: str = ""


@dataclass
class MetricsBlock:
    angles_in_degrees: bool = False
    normalize: bool = False


@dataclass
class ExperimentConfig:
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    scene: SceneBlock = field(default_factory=SceneBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    estimators: Tuple[str, ...] = ESTIMATORS
    sgvb: Dict[str, Any] = field(default_factory=dict)
    sbl: Dict[str, Any] = field(default_factory=dict)
    codebook: CodebookBlock = field(default_factory=CodebookBlock)
    metrics: MetricsBlock = field(default_factory=MetricsBlock)
    trials: int = 100
    master_seed: int = 0
    output_dir: str = "results"
    inline_timing: bool = False

    def validate(self) -> "ExperimentConfig":
        g, sc, sw = self.geometry, self.scene, self.sweep
        if g.kind not in ("ula", "upa"):
            raise InvalidConfig(f"geometry.kind must be ula or upa, got {g.kind!r}")
        try:
            geom = g.build()
        except ValueError as exc:
            raise InvalidConfig(f"geometry: {exc}") from None
        try:
            ChannelMode(sc.channel_mode)
        except ValueError:
            raise InvalidConfig(f"scene.channel_mode must be exact or fresnel, got {sc.channel_mode!r}") from None
        sc.scene_config().validate()
        if sc.l_paths > geom.n_total:
            raise InvalidConfig("scene.l_paths exceeds the number of antennas")
        if sw.variable not in SWEEP_VARIABLES:
            raise InvalidConfig(f"sweep.variable must be one of {', '.join(SWEEP_VARIABLES)}")
        if not sw.values:
            raise InvalidConfig("sweep.values must be nonempty")
        if any(b <= a for a, b in zip(sw.values, sw.values[1:])):
            raise InvalidConfig("sweep.values must be strictly increasing")
        if sw.variable == "distance" and min(sw.values) <= 0:
            raise InvalidConfig("distance sweep values must be positive")
        if sw.variable == "grid_size" and min(sw.values) < 1:
            raise InvalidConfig("grid_size sweep values are multiples of N and must be >= 1")
        if self.trials < 1:
            raise InvalidConfig("trials must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise InvalidConfig("master_seed must be a 64-bit unsigned integer")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown or not self.estimators:
            raise InvalidConfig(f"estimators.enabled must list some of {', '.join(ESTIMATORS)}")
        try:
            self.sgvb_config()
            self.sbl_config()
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from None
        if self.codebook.angular_factor < 1:
            raise InvalidConfig("codebook.angular_factor must be >= 1")
        return self

    def sgvb_config(self) -> SgvbConfig:
        kw = dict(l_paths=self.scene.l_paths, r_min=self.scene.r_min, r_max=self.scene.r_max)
        kw.update(self.sgvb)
        return SgvbConfig.for_geometry(self.geometry.build(), **kw)

    def sbl_config(self) -> SblConfig:
        return SblConfig(**self.sbl)

    def to_text(self) -> str:
        """Canonical serialization; parsing it reproduces this config."""
        return "".join(f"{k} = {v}\n" for k, v in _flatten(self))

    def codebook_key(self, angular_factor: Optional[float] = None) -> str:
        g = self.geometry
        dims = f"{g.n}" if g.kind == "ula" else f"{g.n_h}x{g.n_v}"
        factor = self.codebook.angular_factor if angular_factor is None else angular_factor
        text = "|".join(
            _fmt(v)
            for v in (
                g.kind, dims, g.carrier_hz, g.spacing_in_wavelengths,
                self.scene.r_min, self.scene.r_max, factor, self.codebook.coherence_param,
            )
        )
        return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Value parsing


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _to_int(s: str) -> int:
    return int(s.strip().replace("_", ""), 0)


def _to_float(s: str) -> float:
    return float(s.strip())


def _float_list(s: str) -> Tuple[float, ...]:
    return tuple(_to_float(x) for x in s.split(",") if x.strip())


def _pair(s: str) -> Tuple[float, float]:
    vals = _float_list(s)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise ValueError(f"expected 'low, high', got {s!r}")
    return vals


def _name_list(s: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


_CONVERTERS: Dict[type, Callable[[str], Any]] = {
    int: _to_int,
    float: _to_float,
    bool: _to_bool,
    str: lambda s: s.strip(),
}

_BLOCKS = {
    "geometry": GeometryBlock,
    "scene": SceneBlock,
    "sweep": SweepBlock,
    "codebook": CodebookBlock,
    "metrics": MetricsBlock,
}

_SPECIAL = {
    "scene.theta_range_deg": _pair,
    "scene.phi_range_deg": _pair,
    "sweep.values": _float_list,
}

_TOP = {
    "trials": _to_int,
    "master_seed": _to_int,
    "output_dir": lambda s: s.strip(),
    "estimators.enabled": _name_list,
    "output.inline_timing": _to_bool,
}


def _field_types(cls) -> Dict[str, type]:
    hints = {f.name: f.default for f in dataclasses.fields(cls)}
    return {name: type(default) for name, default in hints.items()}


def _flatten(cfg: ExperimentConfig) -> List[Tuple[str, str]]:
    out: List[Tuple[str, str]] = []
    for name in _BLOCKS:
        block = getattr(cfg, name)
        for f in dataclasses.fields(block):
            out.append((f"{name}.{f.name}", _fmt(getattr(block, f.name))))
    out.append(("estimators.enabled", _fmt(tuple(cfg.estimators))))
    for k in sorted(cfg.sgvb):
        out.append((f"sgvb.{k}", _fmt(cfg.sgvb[k])))
    for k in sorted(cfg.sbl):
        out.append((f"sbl.{k}", _fmt(cfg.sbl[k])))
    out += [
        ("trials", str(cfg.trials)),
        ("master_seed", str(cfg.master_seed)),
        ("output_dir", cfg.output_dir),
        ("output.inline_timing", _fmt(cfg.inline_timing)),
    ]
    return out


def _apply(cfg: ExperimentConfig, key: str, raw: str) -> None:
    section, _, name = key.partition(".")
    if key in _TOP:
        value = _TOP[key](raw)
        attr = {"estimators.enabled": "estimators", "output.inline_timing": "inline_timing"}.get(key, key)
        setattr(cfg, attr, value)
        return
    if section in ("sgvb", "sbl") and name:
        target = SgvbConfig if section == "sgvb" else SblConfig
        types = {f.name: f for f in dataclasses.fields(target)}
        if name not in types or name == "l_paths":
            raise KeyError(key)
        default = types[name].default
        if default is None or isinstance(default, float):
            value = None if raw.strip().lower() == "none" else _to_float(raw)
        else:
            value = _CONVERTERS[type(default)](raw)
        getattr(cfg, section)[name] = value
        return
    if section in _BLOCKS and name:
        block = getattr(cfg, section)
        types = _field_types(type(block))
        if name not in types:
            raise KeyError(key)
        conv = _SPECIAL.get(key) or _CONVERTERS[types[name]]
        setattr(block, name, conv(raw))
        return
    raise KeyError(key)


# ---------------------------------------------------------------------------
# Presets

PRESETS: Dict[str, str] = {
    "ula-table2": """\
geometry.kind = ula
geometry.n = 256
geometry.carrier_hz = 100e9
geometry.spacing_in_wavelengths = 0.5
scene.l_paths = 6
scene.r_min = 3
scene.r_max = 90
scene.theta_range_deg = -60, 60
scene.channel_mode = fresnel
sweep.variable = snr
sweep.values = 0, 5, 10, 15, 20, 25, 30
sgvb.max_iters = 150
codebook.angular_factor = 3
trials = 100
""",
    "upa-table3": """\
geometry.kind = upa
geometry.n_h = 16
geometry.n_v = 16
geometry.carrier_hz = 3e9
geometry.spacing_in_wavelengths = 0.5
scene.l_paths = 3
scene.r_min = 5
scene.r_max = 25
scene.theta_range_deg = -60, 60
scene.phi_range_deg = -80, 80
scene.channel_mode = fresnel
sweep.variable = snr
sweep.values = 0, 5, 10, 15, 20, 25, 30
sgvb.max_iters = 200
codebook.angular_factor = 3
trials = 100
""",
}


def _lines(text: str):
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            yield no, stripped


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen: Dict[str, int] = {}
    for no, line in _lines(text):
        where = f"{source}:{no}"
        if line.startswith("defaults"):
            parts = line.split()
            if len(parts) != 2 or parts[1] not in PRESETS:
                raise InvalidConfig(f"{where}: unknown preset in {line!r}; choose from {', '.join(PRESETS)}")
            if seen:
                raise InvalidConfig(f"{where}: 'defaults' must precede all keys")
            cfg = parse_config(PRESETS[parts[1]], f"preset {parts[1]}")
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"{where}: expected 'key = value', got {line!r}")
        if key in seen:
            raise InvalidConfig(f"{where}: duplicate key '{key}' (first set on line {seen[key]})")
        seen[key] = no
        try:
            _apply(cfg, key, raw)
        except KeyError:
            raise InvalidConfig(f"{where}: unknown config key '{key}'") from None
        except ValueError as exc:
            raise InvalidConfig(f"{where}: bad value for '{key}': {exc}") from None
    try:
        return cfg.validate()
    except InvalidConfig as exc:
        raise InvalidConfig(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}")
    return parse_config(PRESETS[name], f"preset {name}")
