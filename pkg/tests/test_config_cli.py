import csv
import hashlib
import json
import zlib
from pathlib import Path

import numpy as np
import pytest

from qosclust import cli
from qosclust import config as cfgmod
from qosclust import datagen as dg
from qosclust.errors import ConfigError, InvariantError
from qosclust.predictor import load_checkpoint

REFERENCE_TOML = Path(__file__).resolve().parents[1] / "configs" / "reference.toml"

SMALL_TOML = """
seed = 1

[scenario]
duration = 14400
row_stride = 120

[arch]
hidden = [32, 16]

[pretrain]
epochs = 3

[solver]
max_iters = 30

[gap]
cells = [0, 2, 4, 6]
"""


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_config(tmp_path, text=SMALL_TOML, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(stage, config, out, *extra):
    return cli.main([stage, "--config", config, "--out", str(out), *extra])


def run_all(config, out, *extra):
    for stage in ("generate", "pretrain", "solve", "evaluate", "gap", "report"):
        assert run(stage, config, out, *extra) == cli.EXIT_OK, stage


# -- configuration -------------------------------------------------------------------


def test_reference_file_matches_defaults():
    a, b = cfgmod.load(REFERENCE_TOML, environ={}), cfgmod.load(environ={})
    assert a.solver == b.solver and a.arch.get("hidden") == (256, 256, 128)
    assert a.whitening_floor == b.whitening_floor and a.gap_cells == b.gap_cells
    assert a.scenario == b.scenario and a.pretrain == b.pretrain


@pytest.mark.parametrize("raw, path", [
    ({"solver": {"lamda": 0.1}}, "solver.lamda"),
    ({"solver": {"lam": -1.0}}, "solver.lam"),
    ({"solver": {"beta": "big"}}, "solver.beta"),
    ({"arch": {"hidden": []}}, "arch.hidden"),
    ({"arch": {"activation": "tanh"}}, "arch.activation"),
    ({"mode": "grpc"}, "mode"),
    ({"gap": {"cells": [0, 0, 1]}}, "gap.cells"),
    ({"gap": {"cells": list(range(9))}}, "gap.cells"),
    ({"scenario": {"n_cells": 4}}, "scenario.n_cells"),
    ({"bogus": 1}, "bogus"),
])
def test_config_errors_name_the_field(raw, path):
    with pytest.raises(ConfigError) as exc:
        cfgmod.from_mapping(raw, environ={})
    assert exc.value.path == path and str(exc.value).startswith(path)


def test_env_overrides():
    env = {"QOSCL_SOLVER__LAM": "0.01", "QOSCL_SEED": "3", "QOSCL_ARCH__HIDDEN": "[8, 4]", "HOME": "/x"}
    cfg = cfgmod.load(environ=env)
    assert cfg.solver.lam == 0.01 and cfg.seed == 3 and cfg.arch["hidden"] == (8, 4)
    # explicit arguments win over the environment
    assert cfgmod.load(environ=env, seed=5).seed == 5
    with pytest.raises(ConfigError):
        cfgmod.load(environ={"QOSCL_SOLVER__BETA": "zero"})


def test_stage_seeds():
    seeds = {s: cfgmod.stage_seed(7, s) for s in cfgmod.STAGES}
    assert len(set(seeds.values())) == len(seeds)
    ss = np.random.SeedSequence([7, zlib.crc32(b"solver")])
    assert seeds["solver"] == int(ss.generate_state(1, dtype=np.uint32)[0])
    assert cfgmod.stage_seed(7, "solver") != cfgmod.stage_seed(8, "solver")
    with pytest.raises(InvariantError):
        cfgmod.stage_seed(0, "plotting")


def test_config_hash_ignores_key_order():
    a = cfgmod.config_hash({"seed": 1, "solver": {"lam": 0.1, "beta": 0.2}})
    b = cfgmod.config_hash({"solver": {"beta": 0.2, "lam": 0.1}, "seed": 1})
    assert a == b and a != cfgmod.config_hash({"seed": 2})


# -- exit codes ----------------------------------------------------------------------


def test_exit_code_config_error(tmp_path, capsys):
    bad = write_config(tmp_path, SMALL_TOML.replace("max_iters = 30", "max_iters = -3"))
    assert run("generate", bad, tmp_path / "o") == cli.EXIT_CONFIG
    assert "solver.max_iters" in capsys.readouterr().err
    broken = write_config(tmp_path, "seed = [", "broken.toml")
    assert run("generate", broken, tmp_path / "o") == cli.EXIT_CONFIG


def test_exit_code_missing_input(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("solve", cfg, tmp_path / "empty") == cli.EXIT_MISSING
    assert "dataset.csv" in capsys.readouterr().err
    assert run("generate", str(tmp_path / "nope.toml"), tmp_path / "o") == cli.EXIT_MISSING


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_exit_code_numerical_failure(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "o"
    assert run("generate", cfg, out) == cli.EXIT_OK
    ds = dg.read_csv(out / "dataset.csv")
    ds.Y *= 1e300
    dg.write_csv(ds, out / "dataset.csv")
    assert run("pretrain", cfg, out) == cli.EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "stage pretrain" in err and "epoch" in err


# -- pipeline --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    outs = [root / "a", root / "b"]
    for o in outs:
        run_all(cfg, o)
    return cfg, outs


def test_pipeline_outputs(pipeline_dirs):
    cfg_path, (out, _) = pipeline_dirs
    cfg = cfgmod.load(cfg_path, environ={})
    ds = dg.read_csv(out / "dataset.csv")
    s = cfg.scenario
    usable = (s.duration - s.window_ticks - s.horizon_ticks) // s.row_stride + 1
    assert ds.X.shape[0] == s.n_cells * usable
    clusters = json.loads((out / "clusters.json").read_text())
    with open(out / "trace.csv") as fh:
        trace = list(csv.DictReader(fh))
    assert len(trace) == min(cfg.solver.max_iters, clusters["iterations"])
    with open(out / "cluster_evolution.csv") as fh:
        evo = list(csv.reader(fh))
    assert len(evo) == 1 + clusters["iterations"] + 1  # header, the initial identity, one row per iteration
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["wall_time"]) == set(cli.COMMANDS)
    assert man["files"]["report.json"]["sha256"] == sha(out / "report.json")
    report = json.loads((out / "report.json").read_text())
    assert report["clusters"]["n_clusters"] == clusters["n_clusters"]
    assert len(report["cluster_count_trajectory"]) == clusters["iterations"] + 1


def test_pipeline_deterministic(pipeline_dirs):
    _, (a, b) = pipeline_dirs
    for name in ("dataset.csv", "pretrain.npz", "trace.csv", "metrics.csv", "gap.json", "report.json"):
        assert sha(a / name) == sha(b / name), name


def test_report_reads_only_declared_files(pipeline_dirs, tmp_path):
    cfg, (out, _) = pipeline_dirs
    before = sha(out / "report.json")
    for name in ("solve.npz", "pretrain.npz", "dataset.csv", "metrics.csv"):
        (out / name).rename(tmp_path / name)
    try:
        assert run("report", cfg, out) == cli.EXIT_OK
        assert sha(out / "report.json") == before
    finally:
        for name in ("solve.npz", "pretrain.npz", "dataset.csv", "metrics.csv"):
            (tmp_path / name).rename(out / name)


def test_harness_mode_matches_monolithic(pipeline_dirs, tmp_path):
    cfg, (out, _) = pipeline_dirs
    h = tmp_path / "h"
    h.mkdir()
    for name in ("dataset.csv", "pretrain.npz"):
        (h / name).write_bytes((out / name).read_bytes())
    assert run("solve", cfg, h, "--mode", "harness") == cli.EXIT_OK
    _, heads_h, extra_h = load_checkpoint(h / "solve.npz")
    _, heads_m, extra_m = load_checkpoint(out / "solve.npz")
    assert np.abs(heads_h - heads_m).max() <= 1e-12
    assert np.abs(extra_h["assignment"] - extra_m["assignment"]).max() <= 1e-12
    summary = json.loads((h / "comm_summary.json").read_text())
    assert summary["observed"]["uplink_model"] > 0
    with open(h / "ledger.csv") as fh:
        assert next(csv.reader(fh)) == ["round", "node_id", "direction", "bytes", "kind"]
