import json
import math

import numpy as np
import pytest

from parcap import experiments as X
from parcap.ptgrid import DyadicRoot


def test_dust_dimension_values():
    root = DyadicRoot((0.25,), 0.25, 0.5, 3, 1)
    # 16 children per rectangle, spatial refinement by 2 per generation
    assert X.dust_dimension((16,), root) == pytest.approx(4.0)
    assert X.dust_dimension((2, 1), root) == pytest.approx(0.5)
    assert X.dust_dimension((6,), root) == pytest.approx(math.log2(6))


def test_dust_levels_nested_and_counted():
    root = DyadicRoot((0.25,), 0.25, 0.5, 3, 1)
    gens = X.dust_levels(root, (2, 1), 4, np.random.default_rng(0))
    assert [len(g) for g in gens] == [2, 2, 4, 4]
    for coarse, fine in zip(gens, gens[1:]):
        parents = {r.parent().index for r in fine}
        assert parents <= {r.index for r in coarse}


def test_trace_definitions():
    assert X._trace_to_zero([1.0, 0.6, 0.4])
    assert not X._trace_to_zero([1.0, 0.6, 0.7])
    assert not X._trace_to_zero([1.0, 0.9, 0.8])
    assert X._trace_bounded_below([1.0, 0.7, 0.6])
    assert not X._trace_bounded_below([1.0, 0.4])


def test_report_emission_is_deterministic(tmp_path):
    rep = X.ExperimentReport("demo", {"a": 1})
    rep.tables["t"] = [{"x": 1.0, "y": math.inf}, {"x": 2.0, "y": math.nan}]
    rep.fits["slope"] = 1.25
    rep.check("ok", True, 1.25, "within 1 +- 0.3")
    rep.plots.append({"name": "p", "table": "t", "x": "x", "y": "y"})
    rep.runtime = 1.5
    X.write_report(rep, tmp_path / "a")
    rep.runtime = 9.0
    X.write_report(rep, tmp_path / "b")
    for name in ("report.json", "tables/t.csv", "plots/p.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert doc["criteria"][0]["tolerance"] == "within 1 +- 0.3"
    assert "runtime" not in doc
    assert json.loads((tmp_path / "b" / "runtime.json").read_text())["runtime"] == 9.0
    csv = (tmp_path / "a" / "tables" / "t.csv").read_text().splitlines()
    assert csv[0] == "x,y" and csv[1].endswith("inf") and csv[2].endswith("nan")


def test_failed_criteria_still_emit_tables(tmp_path):
    rep = X.ExperimentReport("demo", {})
    rep.tables["t"] = [{"x": 1}]
    rep.check("bad", False, 3.0, "< 2")
    assert not rep.passed
    X.write_report(rep, tmp_path)
    assert (tmp_path / "tables" / "t.csv").exists()


def test_cylinder_scaling_small():
    rep = X.exp_cylinder_scaling(r_list=(0.08, 0.16, 0.24), levels=((32, 256), (64, 1024)))
    assert set(rep.tables) and "slope_drift" in {c.name for c in rep.criteria}
    rows = rep.tables[next(iter(rep.tables))]
    caps = [r["cap"] for r in rows if r["level"] == "64x1024"]
    assert all(a < b for a, b in zip(caps, caps[1:]))


def test_class_dichotomy_verdicts():
    rep = X.exp_class_dichotomy(levels=((64, 256), (128, 1024)))
    verdicts = {c.name: c.passed for c in rep.criteria}
    assert verdicts["verdict[dirac]"] and verdicts["verdict[bounded]"] and verdicts["verdict[blowup]"]


def test_run_experiment_rejects_unknown():
    with pytest.raises(ValueError, match="unknown experiment"):
        X.run_experiment("nope")
