import json
import subprocess
import sys

import numpy as np
import pytest

from relaxcomm import cli
from relaxcomm.runner import ABLATION_GRID, ConfigError, dump_config, load_config, parse_axes, \
    parse_config, read_params, run_sim

BASE = {"algorithm": {"name": "allreduce", "lr": 0.5}, "model": "logistic", "d": 8, "N": 256,
        "n_workers": 4, "epochs": 2, "batch_size": 16, "network": {"latency": 1e-4, "bandwidth": 1e8}}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps({**data, "output": str(tmp_path / "out")}))
    return str(p)


def test_run_writes_outputs(tmp_path, capsys):
    path = write(tmp_path, BASE)
    assert cli.main(["run", path]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert set(summary) >= {"final_loss", "epoch_virtual_time", "bytes_per_epoch", "replica_spread_final"}
    header = (tmp_path / "out" / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,worker,loss,grad_norm,replica_spread,staleness,bytes_sent,virtual_time"
    assert len(read_params(tmp_path / "out" / "params.bin", 4)) == 4


def test_run_is_byte_deterministic(tmp_path):
    path = write(tmp_path, {**BASE, "algorithm": {"name": "qsgd8", "lr": 0.5}})
    cli.main(["run", path, "--output", str(tmp_path / "a")])
    cli.main(["run", path, "--output", str(tmp_path / "b")])
    for f in ("metrics.csv", "summary.json", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_qsgd_bytes_quarter_of_allreduce():
    cfg = parse_config({**BASE, "model": "mlp", "d": 32, "hidden": 64})
    full = run_sim(cfg, collect=False).summary["bytes_per_epoch"]
    q = run_sim(cfg.replace(algorithm={"name": "qsgd8"}), collect=False).summary["bytes_per_epoch"]
    assert q / full == pytest.approx(0.25, abs=0.01)


def test_unknown_key_named(tmp_path, capsys):
    path = write(tmp_path, {**BASE, "lerning_rate": 1})
    assert cli.main(["run", path]) == 2
    assert "lerning_rate" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="network.jitter"):
        parse_config({**BASE, "network": {"jitter": 1}})
    with pytest.raises(ConfigError, match="algorithm.momentum"):
        parse_config({**BASE, "algorithm": {"name": "allreduce", "momentum": 0.9}})


def test_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({**BASE, "backend": "mpi"})
    with pytest.raises(ConfigError):
        parse_config({**BASE, "algorithm": {"name": "nope"}})
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_round_trip(tmp_path):
    cfg = parse_config(BASE)
    again = parse_config(json.loads(dump_config(cfg)))
    assert again == cfg
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_divergence_exit_code(tmp_path):
    path = write(tmp_path, {**BASE, "model": "quadratic", "algorithm": {"name": "allreduce", "lr": 1e30}})
    assert cli.main(["run", path]) == 3
    assert "diverged" in json.loads((tmp_path / "out" / "summary.json").read_text())


def test_parse_axes():
    assert parse_axes("bandwidth=1e8:1e10,algorithm=allreduce:qsgd8") == {
        "bandwidth": [1e8, 1e10], "algorithm": ["allreduce", "qsgd8"]}
    with pytest.raises(ConfigError):
        parse_axes("colour=red")
    with pytest.raises(ConfigError):
        parse_axes("bandwidth")


def test_sweep_command(tmp_path, capsys):
    path = write(tmp_path, {**BASE, "epochs": 1})
    assert cli.main(["sweep", path, "--axis", "bandwidth=1e7:1e9,algorithm=allreduce:qsgd8"]) == 0
    lines = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("algorithm,bandwidth,latency,straggler,epoch_time")
    assert len(lines) == 5


def test_ablate_command(tmp_path):
    path = write(tmp_path, {**BASE, "epochs": 1, "nodes": 2})
    assert cli.main(["ablate", path]) == 0
    lines = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("O,F,H,epoch_time")
    assert len(lines) == 1 + len(ABLATION_GRID) == 9


def test_tcp_backend_subprocesses(tmp_path):
    cfg = {**BASE, "backend": "tcp", "epochs": 1}
    path = write(tmp_path, cfg)
    r = subprocess.run([sys.executable, "-m", "relaxcomm", "run", path], capture_output=True, text=True,
                       timeout=120)
    assert r.returncode == 0, r.stderr
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["epoch_virtual_time"] is None
    sim = run_sim(parse_config({**BASE, "epochs": 1}), collect=False)
    tcp = read_params(tmp_path / "out" / "params.bin", 4)
    assert all(np.array_equal(a, b) for a, b in zip(sim.params, tcp))


def test_rank_flags_require_peers(tmp_path, capsys):
    path = write(tmp_path, BASE)
    assert cli.main(["run", path, "--rank", "0"]) == 2
