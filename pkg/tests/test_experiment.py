import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakloc import cli
from leakloc.config import PRESETS, ConfigError, ExperimentConfig, dumps, load_config, loads
from leakloc.experiment import compute_metrics, read_log, read_sources, run
from leakloc.forward import read_snapshot
from leakloc.measure import DiracMeasure
from leakloc.optimizer import OptimizerError

FILES = ["log.csv", "sources.csv", "metrics.csv", "config.yaml"] + [
    f"{kind}_t{t:.2f}.txt" for kind in ("truth", "recon") for t in (0.0, 0.2, 0.5, 0.7, 1.0)
]


def quick(iters=0, **kw):
    cfg = PRESETS["experiment1"]
    return replace(cfg, optimizer=replace(cfg.optimizer, max_outer=iters), **kw)


# -- config ------------------------------------------------------------------------

def test_experiment_one_preset():
    cfg = PRESETS["experiment1"]
    assert cfg.truth.spikes == ((0.1, 0.3, 0.08), (0.4, 0.25, 0.05), (0.25, 0.13, 0.06))
    assert cfg.truth.k0 == 0.01
    np.testing.assert_allclose(cfg.truth.c, 0.5 * np.array([np.cos(np.pi / 6), np.sin(np.pi / 6)]))
    assert cfg.lasers.sources == ((0.1, 0.1), (0.1, 0.4), (0.4, 0.1), (0.4, 0.4))
    assert (cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.extent) == (32, 32, (0.5, 0.5))
    assert (cfg.time.T, cfg.time.n_t) == (1.0, 50)
    assert (cfg.noise.data, cfg.noise.k, cfg.noise.c) == (0.01, 0.02, 0.2)
    reg = cfg.regularization
    assert (reg.alpha, reg.k_weight, reg.c_weight) == (1.5e-6, 3.0, 0.0005)
    assert (reg.k_box, reg.c_box) == ((0.001, 1.0), (-1.0, 1.0))
    assert cfg.optimizer.max_outer == 5000 and cfg.optimizer.merge_radius == 0.1


def test_experiment_two_preset():
    cfg = PRESETS["experiment2"]
    assert cfg.truth.spikes == ((0.2, 0.3, 0.15), (0.4, 0.1, 0.04))
    assert cfg.truth.k0 == 0.02
    np.testing.assert_allclose(cfg.truth.c, 0.1 * np.array([np.cos(2 * np.pi / 3), np.sin(2 * np.pi / 3)]))
    assert (0.4, 0.1) in cfg.lasers.sources


def test_empty_file_is_experiment_one(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    assert load_config(p) == PRESETS["experiment1"]


def test_preset_name_and_overrides():
    cfg = loads("preset: experiment2\noptimizer:\n  max_outer: 7\nrng_seed: 3\n")
    assert cfg.truth == PRESETS["experiment2"].truth
    assert cfg.optimizer.max_outer == 7 and cfg.rng_seed == 3
    assert load_config("experiment2") == PRESETS["experiment2"]


def test_parse_error_has_line():
    with pytest.raises(ConfigError, match="line 3"):
        loads("mesh:\n  nx: 32\n\tny: 3\n")


@pytest.mark.parametrize("text,field", [
    ("mesh:\n  nx: 1\n", "mesh.nx"),
    ("time:\n  n_t: 0\n", "time.n_t"),
    ("optimizer:\n  thetta: 3\n", "optimizer.thetta"),
    ("optimizer:\n  theta: fast\n", "optimizer.theta"),
    ("truth:\n  spikes: [[0.1, 0.2]]\n", "truth.spikes[0]"),
    ("truth:\n  spikes: [[0.1, 0.2, -1.0]]\n", "truth.spikes[0]"),
    ("lasers:\n  sources: [[0.0, 0.2]]\n", "lasers.sources[0]"),
    ("variant: fancy\n", "variant"),
    ("colour: red\n", "colour"),
    ("noise:\n  data: -0.1\n", "noise.data"),
])
def test_validation_names_field(text, field):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert str(exc.value).startswith(field)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_round_trip(name):
    assert loads(dumps(PRESETS[name])) == PRESETS[name]


@given(
    alpha=st.floats(1e-9, 1e-3),
    theta=st.floats(0.01, 1000),
    seed=st.integers(0, 2**31),
    k0=st.floats(0.001, 1),
    c=st.tuples(st.floats(-1, 1), st.floats(-1, 1)),
    tau=st.one_of(st.none(), st.floats(1e-4, 1.0)),
    spikes=st.lists(st.tuples(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 1)), max_size=4),
)
@settings(max_examples=60, deadline=None)
def test_round_trip_is_lossless(alpha, theta, seed, k0, c, tau, spikes):
    base = PRESETS["experiment1"]
    cfg = replace(
        base,
        regularization=replace(base.regularization, alpha=alpha),
        optimizer=replace(base.optimizer, theta=theta, tau=tau),
        truth=replace(base.truth, k0=k0, c=c, spikes=tuple(spikes)),
        rng_seed=seed,
    )
    assert loads(dumps(cfg)) == cfg


# -- metrics ----------------------------------------------------------------------

def test_metrics_perfect():
    truth = PRESETS["experiment1"].truth.measure()
    m = compute_metrics(truth, truth)
    assert len(m.pairs) == 3 and not m.unmatched_true and not m.unmatched_reported
    assert m.max_distance == 0 and m.max_rate_error == 0 and m.total_mass_error == 0


def test_metrics_empty_reported():
    truth = PRESETS["experiment1"].truth.measure()
    m = compute_metrics(DiracMeasure(), truth)
    assert m.pairs == [] and m.unmatched_true == [0, 1, 2]


def test_metrics_tie_goes_to_lower_index():
    truth = DiracMeasure([(0.2, 0.2), (0.3, 0.2)], [1.0, 1.0])
    m = compute_metrics(DiracMeasure([(0.25, 0.2)], [1.0]), truth)
    assert [(p.true_index, p.reported_index) for p in m.pairs] == [(0, 0)]
    assert m.unmatched_true == [1]


def test_metrics_radius_and_greedy_order():
    truth = DiracMeasure([(0.1, 0.1), (0.3, 0.3)], [1.0, 2.0])
    rep = DiracMeasure([(0.12, 0.1), (0.105, 0.1), (0.45, 0.45)], [0.5, 0.9, 2.0])
    m = compute_metrics(rep, truth)
    assert [(p.true_index, p.reported_index) for p in m.pairs] == [(0, 1)]
    assert m.pairs[0].distance == pytest.approx(0.005)
    assert m.pairs[0].rate_error == pytest.approx(0.1)
    assert sorted(m.unmatched_reported) == [0, 2]
    assert m.unmatched_true == [1]
    assert all(p.distance >= 0 for p in m.pairs)


# -- runs ------------------------------------------------------------------------

def test_zero_iteration_run(tmp_path):
    out = run(quick(0), outdir=tmp_path)
    assert out.status == 0
    for name in FILES:
        assert (tmp_path / name).exists(), name
    assert len(read_sources(tmp_path / "sources.csv")) == 0
    log = read_log(tmp_path / "log.csv")
    assert len(log) == 1
    assert list(log[0]) == ["iter", "value", "cpu_time", "n_spikes", "inner_iters", "k0", "c1", "c2", "slide", "merged"]
    assert (tmp_path / "sources.csv").read_text() == "x,y,rate\n"


def test_variants_share_first_log_row(tmp_path):
    a = run(quick(2), "basic", tmp_path / "a")
    b = run(quick(2), "sliding", tmp_path / "b")
    assert a.status == b.status == 0
    first = lambda p: (p / "log.csv").read_text().splitlines()[:2]
    assert first(tmp_path / "a") == first(tmp_path / "b")


def _without_cpu(path):
    rows = read_log(path)
    return [{k: v for k, v in r.items() if k != "cpu_time"} for r in rows]


def test_reruns_are_byte_identical(tmp_path):
    cfg = quick(12)
    run(cfg, outdir=tmp_path / "a")
    run(cfg, outdir=tmp_path / "b")
    for name in FILES:
        if name == "config.yaml":
            continue
        if name == "log.csv":
            assert _without_cpu(tmp_path / "a" / name) == _without_cpu(tmp_path / "b" / name)
        else:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_config_echo_reproduces_run(tmp_path):
    cfg = quick(5, rng_seed=9)
    run(cfg, outdir=tmp_path / "a")
    echoed = load_config(tmp_path / "a" / "config.yaml")
    assert echoed == replace(cfg, output=str(tmp_path / "a"))
    run(echoed, outdir=tmp_path / "b")
    assert (tmp_path / "a" / "sources.csv").read_bytes() == (tmp_path / "b" / "sources.csv").read_bytes()


def test_snapshots_round_trip(tmp_path):
    from leakloc.experiment import build_setup
    cfg = quick(0)
    run(cfg, outdir=tmp_path)
    setup = build_setup(cfg)
    head, vals = read_snapshot(tmp_path / "truth_t0.50.txt")
    assert head["t"] == pytest.approx(0.5)
    np.testing.assert_array_equal(vals, setup.truth_traj.coarse[:, 25])


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    import leakloc.experiment as ex

    def boom(*a, **k):
        raise OptimizerError("non-finite objective at iteration 3")
    monkeypatch.setattr(ex, "run_optimizer", boom)
    out = run(quick(5), outdir=tmp_path)
    assert out.status == 2
    assert "non-finite" in (tmp_path / "diagnostic.txt").read_text()


# -- command line ---------------------------------------------------------------------

def test_cli_run(tmp_path, capsys):
    code = cli.main(["run", "--config", "experiment2", "--variant", "basic", "--iterations", "3",
                     "--seed", "4", "--out", str(tmp_path)])
    assert code == 0
    echoed = load_config(tmp_path / "config.yaml")
    assert echoed.variant == "basic" and echoed.rng_seed == 4 and echoed.optimizer.max_outer == 3
    assert echoed.truth == PRESETS["experiment2"].truth
    assert len(read_log(tmp_path / "log.csv")) == 4


def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mesh:\n  nx: 1\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "mesh.nx" in capsys.readouterr().err


def test_cli_solver_failure(tmp_path, monkeypatch):
    import leakloc.experiment as ex
    monkeypatch.setattr(ex, "run_optimizer", lambda *a, **k: (_ for _ in ()).throw(OptimizerError("nan")))
    assert cli.main(["run", "--iterations", "2", "--out", str(tmp_path)]) == 2
    assert (tmp_path / "diagnostic.txt").exists()


def test_cli_simulate_and_metrics(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path)]) == 0
    assert np.loadtxt(tmp_path / "data.csv", delimiter=",").shape == (160, 50)
    src = tmp_path / "sources.csv"
    src.write_text("x,y,rate\n0.1,0.3,0.08\n0.4,0.25,0.05\n0.25,0.13,0.06\n")
    assert cli.main(["metrics", str(src), "--out", str(tmp_path / "m.csv")]) == 0
    text = (tmp_path / "m.csv").read_text()
    assert "n_matched,3" in text and "total_mass_error,0.0" in text


def test_cli_check(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
