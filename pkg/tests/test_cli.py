import json
import logging
from pathlib import Path

import pytest

from parcap.cache import SolveCache, atomic_write, content_hash
from parcap.cli import EXIT_FAIL, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main

BASE = """
[grid]
p = "3"
h = 0.03125
tau = 0.0078125
T = 0.5

[sets.cyl]
kind = "cylinder"
center = [0.5]
t = 0.25
radius = 0.2

[sets.dust]
kind = "dyadic-fractal"
origin = [0.25]
t0 = 0.125
r0 = 0.5
depth = 1
keep = 3
"""

TINY_EXPERIMENTS = """
[experiment.params.cylinder_scaling]
r_list = [0.08, 0.16, 0.24]
levels = [[32, 256]]
[experiment.params.capacity_equivalence]
levels = [[16, 64], [32, 256]]
maxiter = 30
[experiment.params.lebesgue_bound]
r_list = [0.08, 0.16, 0.24]
level = [32, 256]
[experiment.params.balayage_equivalence]
dust = {level = [64, 1024], depth = 2}
[experiment.params.polar_construction]
level = [64, 2048]
m_max = 3
[experiment.params.removability]
levels = [[16, 32], [32, 128]]
[experiment.params.hausdorff_dichotomy]
dust = {level = [64, 1024], depth = 2}
[experiment.params.class_dichotomy]
levels = [[32, 64], [64, 256]]
[experiment.params.level_set]
level = [32, 128]
[experiment.params.solver_verification]
mms_levels = [[8, 8], [16, 16]]
barenblatt_cells = 64
barenblatt_levels = 128
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("PARCAP_CACHE", str(tmp_path / "cache"))
    cfg = tmp_path / "run.toml"
    cfg.write_text(BASE)
    return tmp_path, cfg


def _cache_files(root: Path):
    return sorted(p for p in root.rglob("*") if p.is_file())


def test_capacity_repeat_run_hits_cache(workdir, caplog):
    tmp, cfg = workdir
    out = tmp / "out"
    args = ["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(out), "-v"]
    assert main(args) == EXIT_OK
    first = (out / "capacity.json").read_bytes()
    files = _cache_files(tmp / "cache")
    assert files
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="parcap"):
        assert main(args) == EXIT_OK  # identical output is not an overwrite
    assert (out / "capacity.json").read_bytes() == first
    assert "cache hits 1 misses 0" in caplog.text
    assert _cache_files(tmp / "cache") == files


def test_corrupted_cache_entry_is_recomputed(workdir, caplog):
    tmp, cfg = workdir
    out = tmp / "out"
    args = ["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(out), "-v"]
    assert main(args) == EXIT_OK
    first = (out / "capacity.json").read_bytes()
    entry = _cache_files(tmp / "cache")[0]
    raw = entry.read_text()
    entry.write_text(raw.replace('"value":', '"value":1e3+', 1) if '"value":' in raw else raw[:-5])
    caplog.clear()
    with caplog.at_level(logging.INFO):
        assert main(args + ["--force"]) == EXIT_OK
    assert "corrupted" in caplog.text
    assert (out / "capacity.json").read_bytes() == first


def test_no_silent_overwrite(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    assert main(["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    (out / "capacity.json").write_text("{}")
    assert main(["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(out)]) == EXIT_USAGE
    assert (out / "capacity.json").read_text() == "{}"
    assert main(["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(out), "--force"]) == EXIT_OK
    assert json.loads((out / "capacity.json").read_text())["estimates"]["balayage"]["value"] > 0


def test_solver_failure_writes_marker(workdir):
    tmp, cfg = workdir
    cfg.write_text(BASE + "\n[solver]\nmax_iter = 1\nnewton_tol = 1e-14\n[problem]\nmass = 50.0\nsource_t = 0.1\n")
    out = tmp / "out"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_SOLVER
    assert (out / ".failed").exists()


def test_config_errors_exit_usage(workdir, capsys):
    tmp, cfg = workdir
    cfg.write_text('[grid]\np = "2"\nh = -1\n')
    assert main(["solve", "--config", str(cfg), "--out", str(tmp / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "p must exceed 2" in err and "grid.h" in err
    assert main(["capacity", "--set", "missing", "--config", str(workdir[1]), "--out", str(tmp / "o")]) == EXIT_USAGE


def test_solve_obstacle_hausdorff(workdir):
    tmp, cfg = workdir
    cfg.write_text(BASE)
    out = tmp / "out"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "solution.npz").exists()
    assert main(["obstacle", "--set", "cyl", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    info = json.loads((out / "obstacle.json").read_text())
    assert info["riesz_mass"] > 0
    fine = BASE.replace("h = 0.03125", "h = 0.0078125").replace("tau = 0.0078125", "tau = 0.0009765625")
    cfg.write_text(fine)
    assert main(["hausdorff", "--set", "dust", "--s", "1.0", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    h = json.loads((out / "hausdorff.json").read_text())
    assert h["certificate_ok"] and h["upper"] >= h["exact"] - 1e-12


def test_flags_after_subcommand_and_before(workdir):
    tmp, cfg = workdir
    a = tmp / "a"
    b = tmp / "b"
    assert main(["--config", str(cfg), "--out", str(a), "capacity", "--set", "cyl"]) == EXIT_OK
    assert main(["capacity", "--set", "cyl", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    assert (a / "capacity.json").read_bytes() == (b / "capacity.json").read_bytes()


def test_experiment_all_writes_summary(workdir):
    tmp, cfg = workdir
    cfg.write_text(BASE + TINY_EXPERIMENTS)
    out = tmp / "out"
    code = main(["experiment", "all", "--config", str(cfg), "--out", str(out)])
    assert code in (EXIT_OK, EXIT_FAIL)
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary) == 10
    for eid, row in summary.items():
        assert "error" not in row, eid
        rep = json.loads((out / eid / "report.json").read_text())
        assert rep["tables"] and all("tolerance" in c for c in rep["criteria"])
        assert list((out / eid / "tables").glob("*.csv"))
    # rerun from cache reproduces every report byte for byte
    before = {p: p.read_bytes() for p in out.rglob("report.json")}
    code2 = main(["experiment", "all", "--config", str(cfg), "--out", str(out)])
    assert code2 == code
    assert {p: p.read_bytes() for p in out.rglob("report.json")} == before


def test_cache_primitives(tmp_path):
    c = SolveCache(tmp_path)
    key = content_hash("k", 1)
    assert c.get(key) is None
    assert c.get_or_compute(key, lambda: {"a": (1, 2)}) == {"a": [1, 2]}
    assert c.get_or_compute(key, lambda: {"a": "other"}) == {"a": [1, 2]}
    c.put(key, {"a": "late writer"})  # first writer wins
    assert c.get(key) == {"a": [1, 2]}
    p = atomic_write(tmp_path / "f.txt", "x")
    with pytest.raises(FileExistsError):
        atomic_write(p, "y", force=False)
    atomic_write(p, "x", force=False)
