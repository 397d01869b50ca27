"""Deterministic Monte-Carlo sweeps over SNR, distance or codebook size.

Each (sweep value, trial) pair owns a seed derived from the master seed, so a
trial's draws never depend on the trial count or on scheduling. Trials run in
a process pool and are written back in (sweep value, trial) order, with BLAS
pinned to one thread so that floating-point results do not depend on the
worker count either.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import platform
import struct
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import sgvb as sgvb_mod
from .baselines import PolarCodebook, build_polar_codebook, ls_estimate, oracle_ls_estimate, p_somp, sbl_estimate
from .channel import (
    ArrayGeometry,
    ArrayKind,
    PathParams,
    Scene,
    add_noise,
    db_to_linear,
    from_path_params,
    generate_scene,
    synthesize_channel,
    to_path_params,
)
from .config import ExperimentConfig
from .metrics import NoMatches, match_paths, mse_angles, nmse_channel, nmse_distance

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "sweep_value", "trial", "estimator", "nmse_ch_db", "mse_angle_db", "nmse_r_db", "iters", "wall_ms", "converged",
)
WORKERS_ENV = "NF_SGVB_WORKERS"

# purpose tags for the per-trial child streams
_SCENE, _NOISE, _ESTIMATOR = 0, 1, 2


@dataclass
class TrialRecord:
    sweep_value: float
    trial_index: int
    estimator: str
    nmse_channel_db: float
    mse_angle_db: float
    nmse_distance_db: float
    iterations: int
    wall_ms: float
    converged: bool
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class SweepResult:
    records: List[TrialRecord]
    output_dir: Optional[Path]

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.records)

    def values(self, estimator: str, column: str, sweep_value: Optional[float] = None) -> np.ndarray:
        return np.array(
            [
                getattr(r, column)
                for r in self.records
                if r.estimator == estimator and (sweep_value is None or r.sweep_value == sweep_value)
            ],
            dtype=float,
        )


# ---------------------------------------------------------------------------
# Seeds


def _value_words(value: float) -> List[int]:
    bits = struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return [bits & 0xFFFFFFFF, bits >> 32]


def trial_seed(master_seed: int, sweep_value: float, trial: int) -> np.random.SeedSequence:
    """Root seed of one trial: a hash of (master seed, sweep value, trial index)."""
    words = [master_seed & 0xFFFFFFFF, (master_seed >> 32) & 0xFFFFFFFF, *_value_words(sweep_value), int(trial)]
    return np.random.SeedSequence(words)


def trial_rng(master_seed: int, sweep_value: float, trial: int, purpose: int) -> np.random.Generator:
    root = trial_seed(master_seed, sweep_value, trial)
    return np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(purpose,)))


# ---------------------------------------------------------------------------
# Codebook cache

_CODEBOOKS: Dict[str, PolarCodebook] = {}


def _codebook_fields(cb: PolarCodebook) -> Dict[str, np.ndarray]:
    return dict(
        atoms=cb.atoms,
        angle_grid=cb.angle_grid,
        rings=cb.s_grid_per_angle[0],
        omega=cb.omega,
        psi=cb.psi,
        s=cb.s,
        angle_index=cb.angle_index,
    )


def load_or_build_codebook(config: ExperimentConfig, angular_factor: float, cache_dir: Optional[Path]) -> PolarCodebook:
    """Codebook for ``angular_factor * N`` angles, cached in memory and on disk.

    The cache file is keyed by a SHA-256 of the codebook-relevant settings and
    stores the key itself; a file whose key does not match is rebuilt.
    """
    key = config.codebook_key(angular_factor)
    path = cache_dir / f"codebook-{key[:16]}.npz" if cache_dir else None
    cb = _CODEBOOKS.get(key)
    on_disk = path is not None and path.exists() and _stored_key(path) == key
    if cb is None and on_disk:
        cb = _load_codebook(path)
        on_disk = cb is not None
    if cb is None:
        geom = config.geometry.build()
        cb = build_polar_codebook(
            geom,
            config.scene.r_min,
            config.scene.r_max,
            angular_size=int(round(angular_factor * geom.n_total)),
            coherence_param=config.codebook.coherence_param,
        )
    if path is not None and not on_disk:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{os.getpid()}.tmp.npz")
        np.savez(tmp, key=np.array(key), **_codebook_fields(cb))
        os.replace(tmp, path)
    _CODEBOOKS[key] = cb
    return cb


def _stored_key(path: Path) -> Optional[str]:
    try:
        with np.load(path) as z:
            return str(z["key"])
    except (OSError, KeyError, ValueError):
        return None


def _load_codebook(path: Path) -> Optional[PolarCodebook]:
    try:
        with np.load(path) as z:
            rings = z["rings"]
            return PolarCodebook(
                atoms=z["atoms"],
                angle_grid=z["angle_grid"],
                s_grid_per_angle=tuple(rings for _ in range(z["angle_grid"].shape[0])),
                omega=z["omega"],
                psi=z["psi"],
                s=z["s"],
                angle_index=z["angle_index"],
            )
    except (OSError, KeyError, ValueError):
        log.warning("ignoring unreadable codebook cache %s", path)
        return None


# ---------------------------------------------------------------------------
# One trial


@dataclass
class Observation:
    geom: ArrayGeometry
    scene: Scene
    h: np.ndarray
    y: np.ndarray
    n0: float


def make_observation(config: ExperimentConfig, sweep_value: float, trial: int) -> Observation:
    geom = config.geometry.build()
    sw = config.sweep
    fixed_r = sweep_value if sw.variable == "distance" else None
    snr_db = sweep_value if sw.variable == "snr" else sw.snr_db
    scene = generate_scene(geom, config.scene.scene_config(fixed_r), trial_rng(config.master_seed, sweep_value, trial, _SCENE))
    h = synthesize_channel(geom, scene, config.scene.channel_mode)
    y, n0 = add_noise(h, float(db_to_linear(snr_db)), config.scene.l_paths, trial_rng(config.master_seed, sweep_value, trial, _NOISE))
    return Observation(geom, scene, h, y, n0)


def _freqs(params: Sequence[PathParams], geom: ArrayGeometry) -> np.ndarray:
    if geom.kind is ArrayKind.ULA:
        return np.array([p.omega for p in params])
    return np.array([[p.omega, p.psi] for p in params]).reshape(-1, 2)


def _path_metrics(config: ExperimentConfig, obs: Observation, est: Sequence[PathParams]) -> Tuple[float, float]:
    truth = [to_path_params(obs.geom, sc) for sc in obs.scene.scatterers]
    pairs = match_paths(_freqs(truth, obs.geom), _freqs(est, obs.geom))
    est_theta, est_r = [], []
    for p in est:
        theta, _, r = from_path_params(obs.geom, p, clamp=True)
        est_theta.append(theta)
        est_r.append(r)
    try:
        angle = mse_angles(
            pairs,
            obs.scene.theta,
            est_theta,
            normalize=config.metrics.normalize,
            in_degrees=config.metrics.angles_in_degrees,
        )
        dist = nmse_distance(pairs, obs.scene.r, est_r, config.scene.r_max)
    except NoMatches:
        return math.nan, math.nan
    return angle, dist


def _run_estimator(name: str, config: ExperimentConfig, obs: Observation, codebook_factor: float, cache_dir, sweep_value, trial):
    """Returns (h_hat, path estimates or None, iterations, converged)."""
    if name == "ls":
        return ls_estimate(obs.y), None, 0, True
    if name == "oracle_ls":
        return oracle_ls_estimate(obs.y, obs.geom, obs.scene, config.scene.channel_mode), None, 0, True
    if name == "sgvb":
        rng = trial_rng(config.master_seed, sweep_value, trial, _ESTIMATOR)
        res = sgvb_mod.run(obs.y, obs.geom, config.sgvb_config(), rng_seed=rng)
        params = [p for p, a in zip(res.path_params(), res.active) if a]
        return res.h_hat, params, res.iterations, res.converged
    cb = load_or_build_codebook(config, codebook_factor, cache_dir)
    if name == "p_somp":
        res = p_somp(obs.y, cb, config.scene.l_paths)
        return res.h_hat, [cb.lookup(i) for i in res.selected], len(res.selected), True
    if name == "sbl":
        res = sbl_estimate(obs.y, cb, config.sbl_config())
        order = np.argsort(-np.abs(res.weights), kind="stable")[: config.scene.l_paths]
        params = [cb.lookup(int(i)) for i in order if res.weights[i] != 0]
        return res.h_hat, params, res.iterations, res.converged
    raise ValueError(f"unknown estimator {name!r}")


def run_trial(config: ExperimentConfig, sweep_value: float, trial: int, cache_dir: Optional[Path] = None) -> List[TrialRecord]:
    """All enabled estimators on one shared observation."""
    with threadpool_limits(limits=1):
        obs = make_observation(config, sweep_value, trial)
        factor = sweep_value if config.sweep.variable == "grid_size" else config.codebook.angular_factor
        records = []
        for name in config.estimators:
            t0 = time.perf_counter()
            try:
                h_hat, params, iters, conv = _run_estimator(name, config, obs, factor, cache_dir, sweep_value, trial)
                wall = (time.perf_counter() - t0) * 1e3
                nmse = nmse_channel(obs.h, h_hat)
                angle, dist = _path_metrics(config, obs, params) if params is not None else (math.nan, math.nan)
                records.append(TrialRecord(sweep_value, trial, name, nmse, angle, dist, int(iters), wall, bool(conv)))
            except Exception as exc:  # a failing estimator must not abort the sweep
                wall = (time.perf_counter() - t0) * 1e3
                msg = f"{type(exc).__name__}: {exc}"
                log.error("trial %s/%d %s failed: %s\n%s", sweep_value, trial, name, msg, traceback.format_exc())
                records.append(TrialRecord(sweep_value, trial, name, math.nan, math.nan, math.nan, 0, wall, False, msg))
        return records


def _run_task(args):
    config, value, trial, cache_dir = args
    return run_trial(config, value, trial, cache_dir)


# ---------------------------------------------------------------------------
# Output


def _num(x: float) -> str:
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return f"{x:.10g}"


def write_results(path: Path, records: Sequence[TrialRecord], inline_timing: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow(
                [
                    _num(r.sweep_value), r.trial_index, r.estimator,
                    _num(r.nmse_channel_db), _num(r.mse_angle_db), _num(r.nmse_distance_db),
                    r.iterations, _num(r.wall_ms) if inline_timing else "nan", int(r.converged),
                ]
            )


def write_timings(path: Path, records: Sequence[TrialRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep_value", "trial", "estimator", "wall_ms", "error"])
        for r in records:
            w.writerow([_num(r.sweep_value), r.trial_index, r.estimator, f"{r.wall_ms:.3f}", r.error])


def summarize(records: Sequence[TrialRecord]) -> List[dict]:
    groups: Dict[Tuple[float, str], List[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.sweep_value, r.estimator), []).append(r)
    rows = []
    for (value, name), rs in groups.items():
        row = {"sweep_value": value, "estimator": name, "trials": len(rs), "failures": sum(r.failed for r in rs)}
        for col, attr in (("nmse_ch_db", "nmse_channel_db"), ("mse_angle_db", "mse_angle_db"), ("nmse_r_db", "nmse_distance_db")):
            vals = np.array([getattr(r, attr) for r in rs], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[f"{col}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{col}_median"] = float(np.median(vals)) if vals.size else math.nan
        row["converged_frac"] = float(np.mean([r.converged for r in rs]))
        rows.append(row)
    return rows


def write_summary(path: Path, records: Sequence[TrialRecord]) -> None:
    rows = summarize(records)
    cols = list(rows[0]) if rows else ["sweep_value", "estimator"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, float) else v for v in row.values()])


def write_manifest(path: Path, config: ExperimentConfig, workers: int, failures: int, wall_s: float) -> None:
    lines = [
        f"nf_sgvb {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"scipy {scipy.__version__}",
        f"master_seed {config.master_seed}",
        f"workers {workers}",
        f"failed_rows {failures}",
        f"wall_seconds {wall_s:.3f}",
        "",
        "[config]",
        config.to_text().rstrip("\n"),
        "",
    ]
    path.write_text("\n".join(lines))


def resolve_workers(requested: Optional[int] = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", WORKERS_ENV, env)
    return max(1, int(requested or 1))


def run_sweep(config: ExperimentConfig, workers: Optional[int] = None, output_dir=None, write: bool = True) -> SweepResult:
    """Run every (sweep value, trial) and write results.csv, summary.csv, manifest.txt and timings.csv."""
    config.validate()
    workers = resolve_workers(workers)
    out = Path(output_dir if output_dir is not None else config.output_dir) if write else None
    cache_dir = None
    if config.codebook.cache_dir:
        cache_dir = Path(config.codebook.cache_dir)
    elif out is not None:
        cache_dir = out / "cache"
    needs_codebook = any(e in ("p_somp", "sbl") for e in config.estimators)
    if needs_codebook:
        factors = config.sweep.values if config.sweep.variable == "grid_size" else [config.codebook.angular_factor]
        for f in factors:  # build once up front so workers only load
            load_or_build_codebook(config, f, cache_dir)

    tasks = [(config, v, t, cache_dir) for v in config.sweep.values for t in range(config.trials)]
    t0 = time.perf_counter()
    if workers == 1:
        batches = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    records = [r for batch in batches for r in batch]
    wall = time.perf_counter() - t0
    result = SweepResult(records, out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / "results.csv", records, config.inline_timing)
        write_timings(out / "timings.csv", records)
        write_summary(out / "summary.csv", records)
        write_manifest(out / "manifest.txt", config, workers, result.failures, wall)
    return result


# ---------------------------------------------------------------------------
# Single-trial diagnostics


@dataclass
class SingleReport:
    records: List[TrialRecord]
    sgvb: Optional[sgvb_mod.SgvbResult]
    observation: Observation
    trace_path: Optional[Path]


def write_trace(path: Path, result: sgvb_mod.SgvbResult) -> None:
    hist = result.state.history
    L = result.nu.size
    has_psi = result.state.mu.shape[1] > 1
    header = ["iter", "residual_norm", "gamma"]
    for l in range(L):
        header += [f"omega_{l}"] + ([f"psi_{l}"] if has_psi else []) + [f"s_{l}", f"nu_abs_{l}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for h in hist:
            row = [h["iter"], _num(h["residual_norm"]), _num(h["gamma"])]
            for l in range(L):
                row.append(_num(float(h["omega"][l])))
                if has_psi:
                    row.append(_num(float(h["psi"][l])))
                row += [_num(float(h["s"][l])), _num(float(h["nu_abs"][l]))]
            w.writerow(row)


def run_single(config: ExperimentConfig, dump_state: bool = False, output_dir=None, trial: int = 0) -> SingleReport:
    """One trial at the first sweep value, with an SG-VB iteration trace.

    ``dump_state`` runs all ``max_iters`` sweeps and writes ``trace.csv``.
    """
    config.validate()
    value = config.sweep.values[0]
    out = Path(output_dir if output_dir is not None else config.output_dir)
    with threadpool_limits(limits=1):
        records = run_trial(config, value, trial, out / "cache")
        obs = make_observation(config, value, trial)
        res = None
        trace = None
        if "sgvb" in config.estimators:
            rng = trial_rng(config.master_seed, value, trial, _ESTIMATOR)
            res = sgvb_mod.run(obs.y, obs.geom, config.sgvb_config(), rng_seed=rng, stop_early=not dump_state)
            if dump_state:
                out.mkdir(parents=True, exist_ok=True)
                trace = out / "trace.csv"
                write_trace(trace, res)
    return SingleReport(records, res, obs, trace)
