"""Command-line behaviour: exit codes, reports, CSV and dumps."""
import csv
import json

import pytest

from transkernel.cli import EXIT_DIVERGENCE, EXIT_FAULT, EXIT_OK, EXIT_USAGE, main
from transkernel.energy import WorkloadProfile, calibrate_dram, energy_ark, energy_native, relative
from transkernel.engine import RunReport


def run_json(tmp_path, *argv):
    out = tmp_path / "r.json"
    code = main(list(argv) + ["--report", str(out)])
    return code, json.loads(out.read_text())


def test_run_with_oracle_matches(tmp_path):
    code, rep = run_json(tmp_path, "run", "suspend_like", "--oracle")
    assert code == EXIT_OK
    assert rep["oracle"]["match"] is True
    assert rep["report"]["guest_instructions"] == rep["oracle"]["guest_instructions"]
    keys = {"guest_instructions", "host_instructions", "expansion_ratio", "dispatcher_entries",
            "blocks_translated", "code_cache_bytes", "idle_ticks", "busy_ticks", "rule_histogram"}
    assert keys <= set(rep["report"])
    assert set(rep["report"]["rule_histogram"]) == {"identity", "amend_side_effect", "amend_constant",
                                                    "amend_shift", "no_counterpart"}


def test_baseline_run_matches_and_expands_more(tmp_path):
    _, opt = run_json(tmp_path, "run", "suspend_like", "--oracle")
    code, base = run_json(tmp_path, "run", "suspend_like", "--oracle", "--mode", "baseline")
    assert code == EXIT_OK and base["oracle"]["match"] is True
    assert base["report"]["expansion_ratio"] > opt["report"]["expansion_ratio"]


def test_energy_block_matches_model_on_the_report(tmp_path):
    _, rep = run_json(tmp_path, "run", "suspend_like")
    r = RunReport(**{k: v for k, v in rep["report"].items() if k != "expansion_ratio"})
    p = calibrate_dram().params
    w = WorkloadProfile.from_report(r)
    c = r.expansion_ratio
    assert rep["energy"]["relative_ark"] == pytest.approx(energy_ark(p, w, c) / energy_native(p, w))
    assert rep["energy"]["relative_ark"] == pytest.approx(relative(p, c, w.usage))


def test_seeded_schedule_and_forced_fallback(tmp_path):
    code, rep = run_json(tmp_path, "run", "loop_100", "--mode", "baseline", "--seed", "3", "--oracle")
    assert code == EXIT_OK and rep["oracle"]["match"]
    pkg = tmp_path / "pkg.json"
    code, rep = run_json(tmp_path, "run", "alloc_fallback", "--fallback-at", "7", "--package", str(pkg))
    assert code == EXIT_OK and rep["report"]["fallback"] == "forced"
    assert json.loads(pkg.read_text())["reason"] == "forced"


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "no_such_workload"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["run"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == EXIT_USAGE
    assert main(["run", "straight_line", "--step-limit", "5", "--report", str(tmp_path / "x")]) == EXIT_FAULT


def test_divergence_exit_code(tmp_path, monkeypatch):
    from transkernel import cli

    real = cli.run_engine

    def broken(*a, **kw):
        res, be = real(*a, **kw)
        res.regs[0] ^= 1
        return res, be

    monkeypatch.setattr(cli, "run_engine", broken)
    code, rep = run_json(tmp_path, "run", "straight_line", "--oracle")
    assert code == EXIT_DIVERGENCE
    assert rep["oracle"]["match"] is False and rep["oracle"]["differences"]


def test_heatmap_csv_spot_check(tmp_path):
    out = tmp_path / "h.csv"
    assert main(["heatmap", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 19 * 10
    p = calibrate_dram().params
    cell = next(r for r in rows if float(r["overhead"]) == 3.5 and float(r["usage"]) == 1.0)
    assert float(cell["relative_energy"]) == pytest.approx(relative(p, 3.5, 1.0), abs=1e-6)


def test_heatmap_with_params_file(tmp_path):
    params = tmp_path / "p.txt"
    params.write_text("dram_bg = 0\n")
    out = tmp_path / "h.csv"
    assert main(["heatmap", "--params", str(params), "--overheads", "2", "--usages", "1",
                 "--out", str(out)]) == EXIT_OK
    row = list(csv.DictReader(out.open()))[0]
    assert float(row["relative_energy"]) == pytest.approx(6 * 2 * 22 / 635, abs=1e-6)


def test_heatmap_empty_range_is_a_usage_error(tmp_path):
    out = tmp_path / "h.csv"
    assert main(["heatmap", "--overheads", "5:1:1", "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()
    assert main(["heatmap", "--usages", "0:2:0.5", "--out", str(out)]) == EXIT_USAGE


def test_translate_sample(tmp_path):
    out = tmp_path / "t.txt"
    assert main(["translate", "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert "# optimized: 3 guest -> 7 host" in text
    assert "# baseline: 3 guest ->" in text
    assert "[amend_shift]" in text


def test_translate_dump(tmp_path):
    stem = tmp_path / "blk"
    assert main(["translate", "rules_mix", "--mode", "optimized", "--dump", str(stem),
                 "--out", str(tmp_path / "t.txt")]) == EXIT_OK
    data = stem.read_bytes()
    assert len(data) > 0 and len(data) % 2 == 0
    assert (tmp_path / "blk.map").read_text().strip()


def test_fuzz_small(tmp_path):
    code, rep = run_json(tmp_path, "fuzz", "--seed", "4", "--count", "300")
    assert code == EXIT_OK
    assert rep["checked"] == 300 and rep["divergences"] == 0
