import csv
import math
from pathlib import Path

import numpy as np
import pytest

from nf_sgvb import cli, harness
from nf_sgvb.channel import InvalidConfig
from nf_sgvb.config import ExperimentConfig, parse_config, preset
from nf_sgvb.harness import (
    RESULT_COLUMNS,
    WORKERS_ENV,
    load_or_build_codebook,
    make_observation,
    resolve_workers,
    run_single,
    run_sweep,
    run_trial,
    trial_rng,
)
from nf_sgvb.metrics import nmse_channel

SMALL = """\
geometry.kind = ula
geometry.n = 32
scene.l_paths = 2
scene.channel_mode = fresnel
sweep.variable = snr
sweep.values = 0, 20
sbl.max_em_iters = 30
sgvb.max_iters = 30
trials = 3
master_seed = 7
"""


def small(extra: str = "") -> ExperimentConfig:
    """SMALL with the keys of ``extra`` replaced."""
    override = {line.split("=")[0].strip() for line in extra.splitlines() if "=" in line}
    base = [line for line in SMALL.splitlines() if line.split("=")[0].strip() not in override]
    return parse_config("\n".join(base) + "\n" + extra)


# ---------------------------------------------------------------------------
# config parsing


def test_parse_example_and_defaults():
    cfg = parse_config("defaults ula-table2\n# comment\nsweep.values = 0, 10, 20  # trailing\ntrials = 50\nsgvb.max_iters = 100\n")
    assert cfg.geometry.n == 256 and cfg.scene.l_paths == 6
    assert cfg.sweep.values == (0.0, 10.0, 20.0)
    assert cfg.trials == 50
    assert cfg.sgvb_config().max_iters == 100
    assert cfg.sgvb_config().l_paths == 6


def test_preset_values():
    ula = preset("ula-table2")
    g = ula.geometry.build()
    assert (g.n_total, g.carrier_hz, g.spacing_in_wavelengths) == (256, 100e9, 0.5)
    assert (ula.scene.l_paths, ula.scene.r_min, ula.scene.r_max) == (6, 3.0, 90.0)
    assert ula.codebook.angular_factor == 3 and ula.sgvb_config().max_iters == 150
    upa = preset("upa-table3")
    g = upa.geometry.build()
    assert (g.n_h, g.n_v, g.carrier_hz) == (16, 16, 3e9)
    assert (upa.scene.l_paths, upa.scene.r_min, upa.scene.r_max) == (3, 5.0, 25.0)
    assert upa.sgvb_config().max_iters == 200


def test_round_trip_text():
    cfg = small("estimators.enabled = sgvb, ls\nmetrics.angles_in_degrees = true\n")
    again = parse_config(cfg.to_text())
    assert again == cfg


@pytest.mark.parametrize(
    "text,needle",
    [
        ("trials = 3\nbogus.key = 1\n", "cfg.txt:2:"),
        ("trials = 3\nbogus.key = 1\n", "bogus.key"),
        ("trials = 3\ntrials = 4\n", "duplicate key 'trials'"),
        ("trials = 3\ndefaults ula-table2\n", "must precede"),
        ("defaults nope\n", "unknown preset"),
        ("trials = many\n", "trials"),
        ("sweep.values = 10, 5\n", "strictly increasing"),
        ("trials = 0\n", "trials"),
        ("sgvb.l_paths = 3\n", "sgvb.l_paths"),
        ("sgvb.nonsense = 3\n", "sgvb.nonsense"),
        ("estimators.enabled = sgvb, magic\n", "estimators"),
        ("scene.channel_mode = ray\n", "channel_mode"),
        ("just words\n", "key = value"),
    ],
)
def test_parse_errors(text, needle):
    with pytest.raises(InvalidConfig) as exc:
        parse_config(text, "cfg.txt")
    assert needle in str(exc.value)


def test_unknown_key_message_names_key_and_line():
    with pytest.raises(InvalidConfig, match=r"cfg.txt:3: unknown config key 'scene.colour'"):
        parse_config("trials = 1\n\nscene.colour = red\n", "cfg.txt")


def test_codebook_key():
    a = preset("ula-table2")
    assert a.codebook_key() == preset("ula-table2").codebook_key()
    assert a.codebook_key(2) != a.codebook_key(3)
    b = parse_config("defaults ula-table2\nscene.r_min = 4\n")
    assert a.codebook_key() != b.codebook_key()
    c = parse_config("defaults ula-table2\ntrials = 3\n")
    assert a.codebook_key() == c.codebook_key()


# ---------------------------------------------------------------------------
# seeds and observations


def test_trial_streams_are_distinct():
    draws = {
        (v, t, p): trial_rng(0, v, t, p).standard_normal()
        for v in (0.0, 10.0) for t in range(3) for p in range(3)
    }
    assert len(set(draws.values())) == len(draws)
    assert trial_rng(0, 10.0, 2, 1).standard_normal() == draws[(10.0, 2, 1)]
    assert trial_rng(1, 10.0, 2, 1).standard_normal() != draws[(10.0, 2, 1)]


def test_distance_sweep_pins_distances():
    cfg = parse_config(
        "defaults ula-table2\nsweep.variable = distance\nsweep.values = "
        + ", ".join(str(v) for v in range(5, 136, 10))
        + "\n"
    )
    assert len(cfg.sweep.values) == 14
    assert cfg.sweep.values[0] == 5 and cfg.sweep.values[-1] == 135
    obs = make_observation(cfg, 45.0, 0)
    assert np.all(obs.scene.r == 45.0)
    assert obs.n0 == pytest.approx(6 / 100.0)  # snr_db default 20


def test_shared_observation():
    cfg = small()
    obs = make_observation(cfg, 20.0, 1)
    recs = {r.estimator: r for r in run_trial(cfg, 20.0, 1)}
    assert recs["ls"].nmse_channel_db == pytest.approx(nmse_channel(obs.h, obs.y), abs=1e-12)
    assert set(recs) == {"sgvb", "ls", "oracle_ls", "p_somp", "sbl"}
    assert recs["oracle_ls"].nmse_channel_db < recs["ls"].nmse_channel_db
    assert math.isnan(recs["ls"].mse_angle_db)
    assert math.isfinite(recs["sgvb"].mse_angle_db)


# ---------------------------------------------------------------------------
# sweeps


def _read(path: Path) -> bytes:
    return path.read_bytes()


def test_sweep_outputs_and_determinism(tmp_path):
    cfg = small()
    a = run_sweep(cfg, workers=1, output_dir=tmp_path / "a")
    b = run_sweep(small(), workers=1, output_dir=tmp_path / "b")
    for name in ("results.csv", "summary.csv", "manifest.txt", "timings.csv"):
        assert (tmp_path / "a" / name).exists()
    assert _read(tmp_path / "a" / "results.csv") == _read(tmp_path / "b" / "results.csv")
    with open(tmp_path / "a" / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert len(rows) == 1 + 2 * 3 * 5
    assert [r[:3] for r in rows[1:6]] == [["0", "0", e] for e in cfg.estimators]
    assert a.failures == 0
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "master_seed 7" in manifest and "trials = 3" in manifest
    assert list((tmp_path / "a" / "cache").glob("codebook-*.npz"))


def test_results_invariant_to_worker_count(tmp_path):
    run_sweep(small(), workers=1, output_dir=tmp_path / "one")
    run_sweep(small(), workers=3, output_dir=tmp_path / "three")
    assert _read(tmp_path / "one" / "results.csv") == _read(tmp_path / "three" / "results.csv")


def test_trial_count_does_not_change_earlier_trials():
    few = run_sweep(small(), write=False)
    more = run_sweep(small("trials = 5\n"), write=False)
    head = [r for r in more.records if r.trial_index < 3]
    assert [(r.sweep_value, r.trial_index, r.estimator, r.nmse_channel_db) for r in few.records] == [
        (r.sweep_value, r.trial_index, r.estimator, r.nmse_channel_db) for r in head
    ]


def test_inline_timing_flag(tmp_path):
    run_sweep(small("output.inline_timing = true\nestimators.enabled = ls\n"), output_dir=tmp_path)
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(math.isfinite(float(r["wall_ms"])) for r in rows)


def test_codebook_cache_roundtrip(tmp_path):
    cfg = small()
    cb = load_or_build_codebook(cfg, 2.0, tmp_path)
    harness._CODEBOOKS.clear()
    again = load_or_build_codebook(cfg, 2.0, tmp_path)
    np.testing.assert_array_equal(cb.atoms, again.atoms)
    np.testing.assert_array_equal(cb.s, again.s)
    # a file whose stored key disagrees is rebuilt
    harness._CODEBOOKS.clear()
    path = next(tmp_path.glob("codebook-*.npz"))
    with np.load(path) as z:
        fields = {k: z[k] for k in z.files}
    fields["key"] = np.array("stale")
    fields["atoms"] = np.zeros_like(fields["atoms"])
    np.savez(path, **fields)
    rebuilt = load_or_build_codebook(cfg, 2.0, tmp_path)
    np.testing.assert_array_equal(rebuilt.atoms, cb.atoms)


def test_estimator_failure_is_recorded(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(harness.sgvb_mod, "run", boom)
    res = run_sweep(small("estimators.enabled = sgvb, ls\n"), write=False)
    assert res.failures == 6
    bad = [r for r in res.records if r.estimator == "sgvb"]
    assert all(r.failed and "diverged" in r.error and math.isnan(r.nmse_channel_db) for r in bad)
    assert all(not r.failed for r in res.records if r.estimator == "ls")


def test_grid_size_sweep():
    res = run_sweep(small("sweep.variable = grid_size\nsweep.values = 1, 2\nestimators.enabled = p_somp\n"), write=False)
    assert len(res.records) == 6


def test_resolve_workers(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers(4) == 4
    assert resolve_workers(None) == 1
    monkeypatch.setenv(WORKERS_ENV, "2")
    assert resolve_workers(8) == 2


# ---------------------------------------------------------------------------
# single-trial diagnostics


def test_dump_state_trace(tmp_path):
    cfg = small("estimators.enabled = sgvb\nsgvb.max_iters = 12\n")
    rep = run_single(cfg, dump_state=True, output_dir=tmp_path)
    with open(rep.trace_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert [int(r["iter"]) for r in rows] == list(range(1, 13))
    assert {"residual_norm", "gamma", "omega_0", "s_1", "nu_abs_1"} <= set(rows[0])


def test_single_noiseless_residual(tmp_path):
    cfg = parse_config(
        "geometry.n = 64\nscene.l_paths = 1\nscene.channel_mode = fresnel\n"
        "sweep.values = inf\nestimators.enabled = sgvb\n"
    )
    rep = run_single(cfg, output_dir=tmp_path)
    assert rep.observation.n0 == 0.0
    y = rep.observation.y
    assert np.linalg.norm(rep.sgvb.state.residual) < 1e-6 * np.linalg.norm(y)


# ---------------------------------------------------------------------------
# command line


def _write_cfg(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return str(p)


def test_cli_sweep_ok(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL + "estimators.enabled = ls, oracle_ls\n")
    code = cli.main(["sweep", "--config", cfg, "--trials", "2", "--seed", "3", "--out", str(tmp_path / "out")])
    assert code == 0
    assert (tmp_path / "out" / "results.csv").exists()
    assert "master_seed 3" in (tmp_path / "out" / "manifest.txt").read_text()


def test_cli_config_error(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "trials = 2\nwhat.is.this = 1\n")
    assert cli.main(["sweep", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "what.is.this" in err and ":2:" in err
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_partial_failure(tmp_path, monkeypatch):
    monkeypatch.setattr(harness.sgvb_mod, "run", lambda *a, **k: 1 / 0)
    cfg = _write_cfg(tmp_path, SMALL + "estimators.enabled = sgvb, ls\n")
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_cli_single_and_presets(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL + "estimators.enabled = sgvb, ls\n")
    assert cli.main(["single", "--config", cfg, "--dump-state", "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "trace.csv").exists()
    assert cli.main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert "ula-table2" in out and "upa-table3" in out
    assert cli.main(["presets", "show", "upa-table3"]) == 0
    shown = capsys.readouterr().out
    assert parse_config(shown) == preset("upa-table3")
    assert cli.main(["presets", "show", "nope"]) == 2
