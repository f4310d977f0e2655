import json
import math

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings, strategies as st

from fpukdv.harness_cli import (
    EXIT_OK,
    ConvergenceReport,
    ExperimentConfig,
    data_norm,
    eval_fraction,
    fit_rate,
    generate_hs_data,
    kdv_soliton,
    main,
    run_continuum_limit,
    run_decoupling,
    run_suite,
    small_amplitude_error,
    soliton_data,
    write_report,
)
from fpukdv.lattice_fourier import LatticeGrid
from fpukdv.spectral_solvers import load_trajectory, split_initial_data

HS = [2.0 ** -k for k in range(2, 7)]
SMALL = dict(L=8.0, T=0.25, h_list=(0.25, 0.125, 0.0625, 0.03125), n_samples=4)


def test_fit_rate_exact_power_laws():
    slope, icpt, res = fit_rate([(h, 3 * h ** 2) for h in HS])
    assert slope == pytest.approx(2.0, abs=1e-12) and icpt == pytest.approx(math.log(3)) and res < 1e-12
    assert fit_rate([(h, h ** 0.4) for h in HS])[0] == pytest.approx(0.4, abs=1e-12)


def test_fit_rate_noise_and_exclusions():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pts = [(h, h ** 0.4 * (1 + rng.uniform(-0.05, 0.05))) for h in HS]
        assert abs(fit_rate(pts)[0] - 0.4) <= 0.05
    ex = []
    slope, _, _ = fit_rate([(h, h) for h in HS] + [(2.0 ** -8, 0.0)], ex)
    assert slope == pytest.approx(1.0) and ex[0]["h"] == 2.0 ** -8
    with pytest.raises(ValueError):
        fit_rate([(h, h) for h in HS[:3]])


@settings(max_examples=40, deadline=None)
@given(c=st.floats(1e-6, 1e6), p=st.floats(0.1, 3.0))
def test_fit_rate_scale_invariance(c, p):
    base = fit_rate([(h, h ** p * (1 + 0.01 * i)) for i, h in enumerate(HS)])
    scaled = fit_rate([(h, c * h ** p * (1 + 0.01 * i)) for i, h in enumerate(HS)])
    assert scaled[0] == pytest.approx(base[0], abs=1e-9)
    assert scaled[1] - base[1] == pytest.approx(math.log(c), abs=1e-8)


def test_config_validation_and_round_trip():
    cfg = ExperimentConfig(h_list=[0.25, 0.125])
    assert cfg.h_list == (0.25, 0.125)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    bad = [dict(kind="wave"), dict(h_list=(0.3,)), dict(h_list=(0.125, 0.25)), dict(s=1.5),
           dict(kind="continuum_limit", s=0.5), dict(T="soon"), dict(T=-1.0), dict(R=-1.0),
           dict(potential="quadratic:1"), dict(data="noise")]
    for kw in bad:
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})
    ExperimentConfig(kind="decoupling", s=0.5)


def test_hs_data_normalization_and_determinism():
    norms = []
    for h in [2.0 ** -k for k in range(3, 8)]:
        g = LatticeGrid.from_period(h, 64.0)
        r0, r1 = generate_hs_data(g, 1.0, 1.7, 4)
        assert data_norm(r0, r1, 1.0) == pytest.approx(1.7, rel=1e-12)
        assert abs(np.mean(r1.values)) < 1e-12 * np.max(np.abs(r1.values))
        a0, a1 = generate_hs_data(g, 1.0, 1.7, 4)
        assert np.array_equal(a0.values, r0.values) and np.array_equal(a1.values, r1.values)
        norms.append(data_norm(r0, r1, 1.0))
    assert 0.99 * 1.7 <= max(norms) <= 1.7 * (1 + 1e-12)
    g = LatticeGrid.from_period(0.125, 64.0)
    assert not np.array_equal(generate_hs_data(g, 1.0, 1.0, 5)[0].values, generate_hs_data(g, 1.0, 1.0, 4)[0].values)
    with pytest.raises(ValueError):
        generate_hs_data(g, 0.0, 1.0, 0)


def test_coarse_grid_shares_low_modes():
    c = [np.fft.rfft(generate_hs_data(LatticeGrid.from_period(h, 16.0), 1.0, 1.0, 2)[0].values) * h
         for h in (0.25, 0.125)]
    # same phases on shared modes; amplitudes differ only by the grid-dependent normalization
    k = slice(1, 20)
    ratio = c[1][k] / c[0][k]
    assert np.max(np.abs(ratio - ratio[0])) < 1e-10


def test_soliton_data_is_one_directional():
    g = LatticeGrid.from_period(0.125, 32.0)
    r0, r1 = soliton_data(g, 0.5)
    s = split_initial_data(r0, r1)
    # only the Nyquist mode, where nabla_h has no real lattice form, survives in u^-
    c = np.fft.rfft(r0.values)
    c[:-1] = 0
    nyq = np.fft.irfft(c, n=g.n) / 2
    assert np.max(np.abs(s.u_minus.values - nyq)) < 1e-14 * np.max(np.abs(s.u_plus.values))
    assert s.u_minus.norm() < 1e-8 * s.u_plus.norm()
    x = np.linspace(0, 32, 513)
    assert np.max(kdv_soliton(x, 0.5, 32.0)) == pytest.approx(3.0, rel=1e-3)


def test_small_amplitude_rescaling_is_identity_at_unit_spacing():
    assert small_amplitude_error(1.0, 0.37) == 0.37
    assert small_amplitude_error(0.25, 1.0) == pytest.approx(0.125)


def test_zero_data_report_is_degenerate():
    rep = run_continuum_limit(ExperimentConfig(kind="continuum_limit", R=0.0, **SMALL))
    assert rep.status == "degenerate" and rep.slope is None
    assert rep.exit_code() == EXIT_OK
    assert all(r["error"] == 0.0 for r in rep.records)


def test_small_decoupling_sweep_and_reproducible_report(tmp_path):
    cfg = ExperimentConfig(kind="decoupling", **SMALL)
    rep = run_decoupling(cfg)
    assert rep.passed and rep.slope >= 0.85
    assert rep.config["T"] == 0.25 and rep.config["kind"] == "decoupling"
    a = write_report(rep, tmp_path / "a")
    b = write_report(run_decoupling(cfg), tmp_path / "b")
    ja, jb = json.loads(a.read_text()), json.loads(b.read_text())
    ja.pop("run_info"), jb.pop("run_info")
    assert json.dumps(ja, sort_keys=True) == json.dumps(jb, sort_keys=True)
    assert (tmp_path / "a" / "series.csv").read_text() == (tmp_path / "b" / "series.csv").read_text()
    assert ja["schema_version"] == 1 and "artifact_version" in ja


def test_report_exit_codes():
    rep = ConvergenceReport("decoupling", {})
    for status, code in [("passed", 0), ("degenerate", 0), ("partial", 2), ("failed", 1), ("pending", 1)]:
        rep.status = status
        assert rep.exit_code() == code


def test_run_suite_empty_and_isolation(tmp_path):
    assert run_suite([])["status"] == "passed"
    bad = ExperimentConfig(kind="decoupling", L=8.0, T=0.25, h_list=(0.25,), potential="lennard_jones:1,1")
    good = ExperimentConfig(kind="decoupling", **SMALL)
    bundle = run_suite([bad, good], tmp_path)
    assert [r["status"] for r in bundle["runs"]][1] == "passed"
    assert bundle["status"] in ("partial", "passed")
    assert bundle["runs"][0]["status"] != "passed"
    idx = json.loads((tmp_path / "index.json").read_text())
    assert idx["runs"][1]["report"].endswith("report.json")


def test_eval_fraction():
    assert eval_fraction("1/8") == 0.125
    assert eval_fraction(" 2^-3 ") == 0.125
    assert eval_fraction("0.25") == 0.25


def test_cli_commands(tmp_path):
    runner = CliRunner()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"L": 8.0, "T": 0.25, "n_samples": 4}))
    out = tmp_path / "dec"
    res = runner.invoke(main, ["converge", "--kind", "decoupling", "--config", str(cfg), "--out", str(out),
                               "--h-list", "1/4,1/8,1/16,1/32"])
    assert res.exit_code == 0, res.output
    assert json.loads((out / "report.json").read_text())["status"] == "passed"
    # too few points for a fit: partial
    res = runner.invoke(main, ["converge", "--kind", "decoupling", "--config", str(cfg), "--out", str(tmp_path / "p"),
                               "--h-list", "1/4,1/8"])
    assert res.exit_code == 2
    res = runner.invoke(main, ["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim"), "--h-list", "1/4"])
    assert res.exit_code == 0, res.output
    tr = load_trajectory(tmp_path / "sim" / "trajectory.bin")
    assert tr.metadata["config"]["L"] == 8.0 and len(tr.times) == 9
    res = runner.invoke(main, ["conserve", "--out", str(tmp_path / "cons"),
                               "--h-list", "1/4", "--potential", "toda:1,2"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["xsb-failure", "--out", str(tmp_path / "x"), "--h-list", "1/4,1/8,1/16"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["converge", "--kind", "decoupling", "--h-list", "1/3", "--out", str(tmp_path / "bad")])
    assert res.exit_code != 0
