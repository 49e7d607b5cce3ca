import csv
import hashlib
import json
import subprocess
import sys

import pytest
import yaml

from bdsde.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_NUMERIC, EXIT_OK, OUTPUT_ROOT_ENV, main
from bdsde.config import DEFAULTS, ConfigError, emit_config, parse_config


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


SMALL = """
solver: {M: 200}
forward: {horizon: 0.5}
solve: {horizon: 0.5}
grid: {h: 0.05}
"""


def test_config_round_trip():
    cfg = parse_config(SMALL)
    assert parse_config(emit_config(cfg)) == cfg
    assert cfg["solver"]["M"] == 200 and cfg["solver"]["degree"] == DEFAULTS["solver"]["degree"]


def test_config_error_names_line_and_field():
    text = "seed: 1\nsolver:\n  M: 10\n  degree: -1\n"
    with pytest.raises(ConfigError, match=r"cfg:4: field solver\.degree"):
        parse_config(text, "cfg")
    with pytest.raises(ConfigError, match=r"cfg:2: field solver: Additional properties"):
        parse_config("seed: 1\nsolver: {Mx: 3}\n", "cfg")


def test_dimension_mismatch_is_a_config_error():
    with pytest.raises(ConfigError, match="x_grid"):
        parse_config("constants: {d: 2}\n")


def test_bad_config_exits_2(tmp_path, capsys):
    assert main(["check", "--config", write(tmp_path, "grid: {h: -1}\n"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "field grid.h" in capsys.readouterr().err
    assert main(["check", "--config", write(tmp_path, "model: {name: heat}\n"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["check", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["check", "--seed", "-3", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_dump_config(tmp_path, capsys):
    assert main(["solve", "--config", write(tmp_path, SMALL), "--seed", "5",
                 "--dump-config"]) == EXIT_OK
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["seed"] == 5 and cfg["solver"]["M"] == 200


def test_check_passes_and_fails(tmp_path):
    out = tmp_path / "ok"
    assert main(["check", "--out", str(out)]) == EXIT_OK
    assert {r["condition"] for r in rows(out / "assumptions.csv")} >= {"p>d+2", "K<K'<2K"}
    assert rows(out / "probes.csv")[0]["status"] == "unfalsified"
    bad = write(tmp_path, "constants: {K: 1.0, Kprime: 3.0}\n")
    assert main(["check", "--config", bad, "--out", str(tmp_path / "bad")]) == EXIT_FAILED


def test_solve_martingale_benchmark(tmp_path):
    out = tmp_path / "solve"
    cfg = write(tmp_path, "solver: {M: 2000}\ngrid: {h: 0.02}\nsolve: {horizon: 1.0}\n")
    assert main(["solve", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert all(r["passed"] == "1" for r in rows(out / "errors.csv"))
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) == {"coefficients.csv", "solution_manifest.json",
                                   "solution_nodes.csv", "errors.csv"}
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert {"command", "version", "config_hash", "seeds", "wall_clock_seconds"} <= set(man)


@pytest.mark.parametrize("bench", ["scalar-ode", "telescoping"])
def test_solve_other_benchmarks(tmp_path, bench):
    h = 1e-3 if bench == "scalar-ode" else 0.05
    cfg = write(tmp_path, f"solver: {{M: 20}}\ngrid: {{h: {h}}}\nsolve: {{benchmark: {bench}}}\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / bench)]) == EXIT_OK


def test_same_seed_same_bytes_and_isolation(tmp_path):
    cfg = write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["forward", "--config", cfg, "--seed", "3", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in a.iterdir()) == ["forward_checks.csv", "forward_summary.csv",
                                                   "manifest.json"]
    for name in ("forward_checks.csv", "forward_summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((p / "manifest.json").read_text()) for p in (a, b))
    assert ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]
    c = tmp_path / "c"
    main(["forward", "--config", cfg, "--seed", "4", "--out", str(c)])
    assert (a / "forward_summary.csv").read_bytes() != (c / "forward_summary.csv").read_bytes()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["check"]) == EXIT_OK
    assert (tmp_path / "root" / "check" / "manifest.json").exists()


def test_numeric_failure_exits_3(tmp_path):
    cfg = write(tmp_path, """
solver: {M: 10, degree: 0}
grid: {h: 0.05, T: 1.0, t_grid: [0.0, 0.5], x_grid: [[0.0]]}
epsilon: 0.01
doss: {y_grid: {min: -0.1, max: 0.1, n: 3}}
""")
    assert main(["doss", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_NUMERIC


def test_stationary_and_doss_runs(tmp_path):
    cfg = write(tmp_path, """
model: {name: ou, params: {g0: 0.5, mu: 1.0, kappa: 1.0, diffusion: 0.1}}
solver: {M: 10, degree: 0}
grid: {h: 0.05, T: 1.0, t_grid: [0.0, 0.5, 1.0], x_grid: [[-0.5], [0.0], [0.5]]}
environments: 3
epsilon: 0.01
""")
    st = tmp_path / "st"
    assert main(["stationary", "--config", cfg, "--out", str(st)]) == EXIT_OK
    assert len(rows(st / "field.csv")) == 3 * 3 * 3
    ds = tmp_path / "ds"
    assert main(["doss", "--config", cfg, "--out", str(ds)]) == EXIT_OK
    assert {p.name for p in ds.iterdir()} == {"flow.csv", "field.csv", "transformed.csv",
                                              "residual.csv", "manifest.json"}


def test_test_stationarity_small(tmp_path, capsys):
    cfg = write(tmp_path, """
model: {name: ou, params: {g0: 1.0, mu: 1.0}}
solver: {M: 10, degree: 0}
grid: {h: 0.05, T: 2.0}
environments: 3
stationarity: {r_steps: [0, 10], x: [0.0], calibration_runs: 2}
""")
    out = tmp_path / "ts"
    assert main(["test-stationarity", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert [r["test"] for r in rows(out / "reports.csv")] == ["shift_r0", "shift_r0.5"]
    assert "shift_r0.5" in capsys.readouterr().out


def test_bench_quick_subset(tmp_path):
    cfg = write(tmp_path, "bench: {criteria: [1, 8]}\n")
    out = tmp_path / "bench"
    assert main(["bench", "--config", cfg, "--profile", "quick", "--out", str(out)]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"criterion_01_assumption_gate.csv", "criterion_08_shift_algebra.csv",
            "bench_summary.csv", "manifest.json"} <= names


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bdsde.cli", "check", "--out",
                          str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0
