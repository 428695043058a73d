import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trigflow.harness import checkpoint as ckpt
from trigflow.harness.cli import bench_attention, main
from trigflow.harness.config import RunConfig, config_hash, dump_config, load_config, parse_config
from trigflow.harness.datasets import get_dataset, mixture_centers
from trigflow.harness.experiment import CSV_COLUMNS, CKPT_NAME, restore_state, run_experiment
from trigflow.harness.metrics import (
    distribution_distance, energy_distance, mode_masses, permutation_threshold, sliced_wasserstein,
)

TINY = dict(hidden=16, depth=2, cond_dim=16, batch=32, eval_every=10, eval_samples=200, warmup=5)


# -- datasets ---------------------------------------------------------------


@pytest.mark.parametrize("name,dim", [("gauss1d", 1), ("gauss-nd", 4), ("mixture2d", 2),
                                      ("checkerboard2d", 2), ("tokens8x4", 32)])
def test_dataset_shapes_and_seeding(name, dim):
    ds = get_dataset(name)
    a = ds.sample(100, np.random.default_rng(0))
    assert a.shape == (100, dim)
    assert np.array_equal(a, ds.sample(100, np.random.default_rng(0)))


def test_gaussian_datasets_expose_covariance():
    ds = get_dataset("gauss-nd", dim=3, std=2.0)
    assert ds.analytic
    x = ds.sample(200_000, np.random.default_rng(1))
    np.testing.assert_allclose(x.var(0), ds.cov, rtol=0.02)
    assert not get_dataset("mixture2d").analytic
    with pytest.raises(ValueError):
        get_dataset("swissroll")


def test_mixture_modes_balanced():
    x = get_dataset("mixture2d").sample(80_000, np.random.default_rng(2))
    m = mode_masses(x, mixture_centers())
    np.testing.assert_allclose(m, 1 / 8, atol=0.01)


def test_checkerboard_occupies_even_cells():
    x = get_dataset("checkerboard2d").sample(5000, np.random.default_rng(3))
    cells = np.floor(x + 2).astype(int)
    assert np.all((cells.sum(1) % 2) == 0)


# -- metrics ----------------------------------------------------------------


def test_energy_identical_sets_zero():
    x = np.random.default_rng(4).normal(size=(300, 2))
    assert energy_distance(x, x) == 0.0


def test_energy_point_masses():
    assert energy_distance(np.zeros((5, 1)), np.full((7, 1), 2.5)) == pytest.approx(2.5)
    a = np.zeros((3, 2))
    b = np.tile([3.0, 4.0], (4, 1))
    assert energy_distance(a, b) == pytest.approx(5.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 60), m=st.integers(2, 60))
def test_energy_fast_path_matches_pairwise(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 1)), rng.normal(1, 2, size=(m, 1))

    def mean_abs(u, v):
        return np.abs(u[:, None, 0] - v[None, :, 0]).mean()

    ref = mean_abs(a, b) - 0.5 * mean_abs(a, a) - 0.5 * mean_abs(b, b)
    assert energy_distance(a, b) == pytest.approx(max(ref, 0.0), abs=1e-12)
    # the same set in 2-D with a zero column takes the chunked path
    pad = lambda x: np.column_stack([x, np.zeros(len(x))])  # noqa: E731
    assert energy_distance(pad(a), pad(b)) == pytest.approx(max(ref, 0.0), abs=1e-10)


def test_same_distribution_below_permutation_threshold():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 10_000, 1))
    assert energy_distance(a, b) < permutation_threshold(a, b, n_perm=100)


def test_metric_errors_and_dispatch():
    with pytest.raises(ValueError):
        energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        energy_distance(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        distribution_distance(np.zeros((2, 1)), np.zeros((2, 1)), "fid")
    x = np.random.default_rng(6).normal(size=(500, 2))
    assert sliced_wasserstein(x, x) == 0.0
    assert sliced_wasserstein(x, x + 1.0) > 0.5


# -- config -----------------------------------------------------------------


def test_config_parse_and_dump_round_trip():
    text = "# a run\nmode = scd\nsteps = 12\nlr = 3e-4\nattention = yes\ndataset = tokens8x4\n"
    cfg = parse_config(text)
    assert (cfg.mode, cfg.steps, cfg.lr, cfg.attention) == ("scd", 12, 3e-4, True)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config("[run]\nseed = 4\n").seed == 4


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("stepz = 3")
    with pytest.raises(ValueError, match="mode"):
        parse_config("mode = gan")
    with pytest.raises(ValueError, match="boolean"):
        parse_config("attention = maybe")
    with pytest.raises(ValueError, match="steps"):
        RunConfig(steps=0)
    p = tmp_path / "c.cfg"
    p.write_text("seed = 9\n")
    assert load_config(p).seed == 9


def test_config_hash_tracks_network():
    a = RunConfig().net_config(2, 1.0)
    assert config_hash(a) == config_hash(RunConfig().net_config(2, 1.0))
    assert config_hash(a) != config_hash(RunConfig(hidden=64).net_config(2, 1.0))


# -- checkpoints ------------------------------------------------------------


def _ck():
    rng = np.random.default_rng(7)
    ck = ckpt.Checkpoint("ab" * 32, 42, {"note": "x", "rng": ckpt.rng_state(rng)})
    ck.put("theta", {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=2), "s": np.array(1.5)})
    return ck


def test_checkpoint_byte_round_trip(tmp_path):
    ck = _ck()
    p = tmp_path / "a.trig"
    ckpt.save(p, ck)
    back = ckpt.load(p)
    assert ckpt.to_bytes(back) == p.read_bytes()
    assert back.iteration == 42 and back.meta["note"] == "x"
    np.testing.assert_array_equal(back.group("theta")["W"], ck.sections["theta/W"])
    assert back.group("theta")["s"].shape == ()


def test_checkpoint_rejects_bad_input(tmp_path):
    buf = ckpt.to_bytes(_ck())
    with pytest.raises(ckpt.CheckpointError, match="hash"):
        ckpt.from_bytes(buf, expect_hash="cd" * 32)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.from_bytes(b"NOTACKPT" + buf[8:])
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.from_bytes(buf + b"\0")
    with pytest.raises(OSError, match="missing.trig"):
        ckpt.load(tmp_path / "missing.trig")


def test_rng_state_round_trip():
    rng = np.random.default_rng(8)
    rng.normal(size=3)
    clone = ckpt.rng_from_state(json.loads(json.dumps(ckpt.rng_state(rng))))
    assert np.array_equal(rng.normal(size=5), clone.normal(size=5))


# -- experiments ------------------------------------------------------------


def test_run_is_deterministic_and_persisted(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = RunConfig(mode="diffusion", steps=20, out=str(tmp_path / name), **TINY)
        res = run_experiment(cfg)
        outs.append(res)
    a, b = (open(tmp_path / n / "metrics.csv").read() for n in ("a", "b"))
    assert a == b
    rows = list(csv.reader(a.splitlines()))
    assert rows[0] == CSV_COLUMNS and len(rows) == 3
    ca, cb = (ckpt.load(tmp_path / n / CKPT_NAME) for n in ("a", "b"))
    assert ca.sections.keys() == cb.sections.keys()
    assert all(np.array_equal(ca.sections[k], cb.sections[k]) for k in ca.sections)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config"]["steps"] == 20 and man["csv_columns"] == CSV_COLUMNS
    # save -> load -> save is byte-identical and the training state comes back
    path = tmp_path / "a" / CKPT_NAME
    ck = ckpt.load(path, expect_hash=man["config_hash"])
    assert ckpt.to_bytes(ck) == path.read_bytes()
    st = restore_state(ck)
    run = outs[0]["run"]
    for k in run.state.theta:
        assert np.array_equal(st.theta[k], run.state.theta[k])
    assert st.opt.count == run.state.opt.count and st.iteration == 20
    assert np.array_equal(st.rng.normal(size=3), run.state.rng.normal(size=3))


def test_distillation_modes_run(tmp_path):
    teach = RunConfig(mode="diffusion", steps=10, out=str(tmp_path / "t"), **TINY)
    run_experiment(teach)
    tpath = str(tmp_path / "t" / CKPT_NAME)
    for mode in ("scd", "dscd", "vsd", "scd-vsd"):
        cfg = RunConfig(mode=mode, steps=10, out=str(tmp_path / mode), teacher=tpath, dscd_n=4, **TINY)
        rows = run_experiment(cfg)["rows"]
        assert rows[-1]["iter"] == 10 and np.isfinite(rows[-1]["dist_2step"])
    cfg = RunConfig(mode="sct", steps=10, out=str(tmp_path / "sct"), **TINY)
    assert run_experiment(cfg)["rows"][-1]["g_norm_max"] < 1


def test_teacher_errors(tmp_path):
    with pytest.raises(ValueError, match="teacher"):
        run_experiment(RunConfig(mode="scd", steps=1, out=str(tmp_path / "x"), **TINY))
    with pytest.raises(ValueError, match="analytic"):
        run_experiment(RunConfig(mode="scd", teacher="analytic", steps=1, out=str(tmp_path / "y"), **TINY))
    teach = RunConfig(mode="diffusion", steps=1, out=str(tmp_path / "t"), **TINY)
    run_experiment(teach)
    other = dict(TINY, hidden=8)
    with pytest.raises(ValueError, match="differs"):
        run_experiment(RunConfig(mode="scd", steps=1, out=str(tmp_path / "z"),
                                 teacher=str(tmp_path / "t" / CKPT_NAME), **other))


def test_analytic_teacher_on_gaussian(tmp_path):
    cfg = RunConfig(mode="scd", dataset="gauss-nd", data_dim=3, teacher="analytic", steps=10,
                    out=str(tmp_path / "g"), **TINY)
    assert run_experiment(cfg)["run"].dim == 3


def test_attention_dataset_runs(tmp_path):
    cfg = RunConfig(mode="sct", dataset="tokens8x4", attention=True, steps=4,
                    out=str(tmp_path / "tok"), **dict(TINY, eval_every=4, eval_samples=50))
    assert run_experiment(cfg)["rows"][-1]["iter"] == 4


def test_unwritable_output_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        run_experiment(RunConfig(steps=1, out=str(blocker / "sub"), **TINY))


# -- CLI --------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TRIGFLOW_THREADS", "1")
    conf = tmp_path / "run.cfg"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    teacher = tmp_path / "teacher"
    main(["train-diffusion", "--config", str(conf), "--steps", "10", "--out", str(teacher)])
    tck = str(teacher / CKPT_NAME)
    main(["train-scd", "--config", str(conf), "--steps", "10", "--out", str(tmp_path / "cm"),
          "--ckpt", tck, "--seed", "3"])
    cm = str(tmp_path / "cm" / CKPT_NAME)
    for method in ("cm1", "cm2"):
        out = tmp_path / f"{method}.csv"
        main(["sample", "--ckpt", cm, "--method", method, "-n", "50", "--out", str(out)])
        assert np.loadtxt(out, delimiter=",").shape == (50, 2)
    a, b = tmp_path / "s1.csv", tmp_path / "s2.csv"
    for p in (a, b):
        main(["sample", "--ckpt", tck, "--method", "dpm2", "--steps", "4", "-n", "20", "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()
    capsys.readouterr()
    main(["eval", "--ckpt", cm, "-n", "100"])
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(res) == {"energy", "sliced_w"}
    main(["print-config"])
    assert parse_config(capsys.readouterr().out) == RunConfig()


@pytest.mark.parametrize("sched", ["flow_matching", "trigflow", "edm"])
def test_cli_convert_schedule_round_trip(tmp_path, sched):
    rng = np.random.default_rng(9)
    u = rng.uniform(0.05, 0.9, 12) if sched != "edm" else rng.uniform(0.01, 20, 12)
    rows = np.column_stack([u, rng.normal(size=(12, 3))])
    src, mid, back = (tmp_path / n for n in ("in.csv", "mid.csv", "back.csv"))
    np.savetxt(src, rows, delimiter=",", fmt="%.17g")
    main(["convert-schedule", str(src), "--schedule", sched, "--out", str(mid)])
    main(["convert-schedule", str(mid), "--schedule", sched, "--inverse", "--out", str(back)])
    np.testing.assert_allclose(np.loadtxt(back, delimiter=","), rows, rtol=1e-12, atol=1e-12)


def test_cli_bench_and_errors(capsys):
    rows = bench_attention([16, 64], block=8)
    assert all(r["max_abs_err"] < 1e-10 for r in rows)
    assert rows[1]["stream_peak_bytes"] < rows[1]["dense_peak_bytes"]
    main(["bench-attn-jvp", "--steps", "2", "--block", "16"])
    out = [json.loads(s) for s in capsys.readouterr().out.splitlines()]
    assert [r["L"] for r in out] == [64, 128]
    with pytest.raises(SystemExit):
        main(["sample"])
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_cli_selfcheck(capsys):
    main(["selfcheck"])
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(s.startswith("PASS") for s in lines)
