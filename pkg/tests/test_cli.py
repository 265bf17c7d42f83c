import csv
import io
import json
import subprocess
import sys

import pytest

from gaugelab import cli

HEADER = "delta,eps,a_gap_inf,k_gap,C_eq113,C_sec5,bound_pass,n_boundary,n_theta,wall_ms"


def _config(tmp_path, **changes):
    cfg = cli.default_config()
    cfg["grids"].update({"n_boundary": 8, "n_theta": 8})
    cfg["experiment"]["sweep"]["deltas"] = [0.0, 0.05]
    for key, value in changes.items():
        node = cfg
        *head, last = key.split(".")
        for h in head:
            node = node[h]
        node[last] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(tmp_path, command, cfg_path, *extra):
    return cli.main([command, "--config", str(cfg_path), "--out", str(tmp_path / "out"),
                     *extra])


def test_shipped_config_is_valid():
    cfg = cli.load_config(None)
    assert cfg["schema"] == cli.SCHEMA_VERSION


def test_malformed_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run(tmp_path, "sweep", bad) == 2
    assert "config error" in capsys.readouterr().err


def test_schema_violation_exits_2(tmp_path):
    assert _run(tmp_path, "sweep", _config(tmp_path, schema="gaugelab.config/0")) == 2
    assert _run(tmp_path, "sweep", _config(tmp_path, **{"grids.n_boundary": 0})) == 2
    cfg = _config(tmp_path)
    d = json.loads(cfg.read_text())
    d["unexpected"] = 1
    cfg.write_text(json.dumps(d))
    assert _run(tmp_path, "sweep", cfg) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert _run(tmp_path, "suite", tmp_path / "nope.json") == 2


def test_supercritical_exits_1(tmp_path, capsys):
    cfg = _config(tmp_path, **{"pair_a.k": {"kind": "constant", "value": 0.3}})
    assert _run(tmp_path, "albedo", cfg) == 1
    assert "subcritical violated" in capsys.readouterr().err


def test_seed_and_threads_validation(tmp_path):
    cfg = _config(tmp_path)
    for flags in (["--seed", "-1"], ["--seed", str(2 ** 64)], ["--threads", "0"]):
        with pytest.raises(SystemExit) as exc:
            _run(tmp_path, "sweep", cfg, *flags)
        assert exc.value.code == 2
    assert cli.build_parser().parse_args(["suite", "--seed", str(2 ** 64 - 1)]).seed \
        == 2 ** 64 - 1


def test_sweep_csv_header_and_determinism(tmp_path):
    cfg = _config(tmp_path)
    outs = []
    for threads in ("1", "2"):
        assert _run(tmp_path, "sweep", cfg, "--threads", threads) == 0
        outs.append((tmp_path / "out" / "sweep.csv").read_text())
    assert outs[0].splitlines()[0] == HEADER
    rows = [list(csv.DictReader(io.StringIO(t))) for t in outs]
    assert len(rows[0]) == 2
    for ra, rb in zip(*rows):
        ra.pop("wall_ms"), rb.pop("wall_ms")
        assert ra == rb
    assert all(r["bound_pass"] == "true" for r in rows[0])


def test_suite_report(tmp_path):
    cfg = _config(tmp_path, **{"grids.n_boundary": 16, "grids.n_theta": 16})
    assert _run(tmp_path, "suite", cfg, "--seed", "7") == 0
    report = json.loads((tmp_path / "out" / "suite_report.json").read_text())
    assert report["checks"]
    for c in report["checks"]:
        assert {"name", "measured", "threshold", "pass"} <= set(c)
        assert c["pass"] is True


@pytest.mark.parametrize("command", ["albedo", "decompose", "gauge-align", "distance"])
def test_other_subcommands_succeed(tmp_path, command):
    assert _run(tmp_path, command, _config(tmp_path)) == 0
    assert any((tmp_path / "out").iterdir())


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gaugelab.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("suite", "sweep", "albedo", "decompose", "gauge-align", "distance",
                 "isometry"):
        assert name in proc.stdout
