import csv
import json
import os

import pytest

from skap.cli import main, run
from skap.config import Diagnostic, resolve_config, validate_config


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- validation ------------------------------------------------------------------


def test_validate_empty_dt_grid():
    cfg = resolve_config("strong-rate", {"n_steps_grid": []})
    msgs = [d.message for d in validate_config("strong-rate", cfg) if d.severity == "error"]
    assert any("grid empty" in m for m in msgs)


def test_validate_unknown_scheme_lists_valid_names():
    cfg = resolve_config("strong-rate", {"schemes": ["milstein"]})
    msgs = [d.message for d in validate_config("strong-rate", cfg) if d.severity == "error"]
    assert any("milstein" in m and "semi-implicit" in m and "exponential" in m
               for m in msgs)


def test_validate_refine_ratio_one_warns_about_bias():
    cfg = resolve_config("strong-rate", {"refine_ratio": 1})
    diags = validate_config("strong-rate", cfg)
    assert any(d.severity == "warning" and "bias" in d.message for d in diags)
    assert not any(d.severity == "error" for d in diags)


def test_validate_missing_seed():
    cfg = resolve_config("sk-limit", {})
    del cfg["seed"]
    msgs = [d.message for d in validate_config("sk-limit", cfg) if d.severity == "error"]
    assert any("seed" in m for m in msgs)


def test_validate_unknown_test_function():
    cfg = resolve_config("weak-rate", {"test_functions": ["indicator"]})
    msgs = [d.message for d in validate_config("weak-rate", cfg) if d.severity == "error"]
    assert any("indicator" in m for m in msgs)


def test_validate_cli_entry(tmp_path, capsys):
    cfg = write_config(tmp_path, {"n_steps_grid": []})
    assert main(["validate", "strong-rate", "--config", cfg]) == 2
    ok = write_config(tmp_path, {"samples": 50}, name="ok.json")
    assert main(["validate", "strong-rate", "--config", ok]) == 0


# -- command execution -------------------------------------------------------------


def test_inequalities_command(tmp_path):
    code = run("inequalities", overrides={"out_dir": str(tmp_path)})
    assert code == 0
    summary = (tmp_path / "summary.txt").read_text()
    assert "[PASS]" in summary and "[FAIL]" not in summary


def test_simulate_writes_trajectory(tmp_path):
    code = run("simulate", overrides={"out_dir": str(tmp_path)})
    assert code == 0
    rows = read_rows(tmp_path / "trajectory.csv")
    assert len(rows) == 101
    assert set(rows[0]) == {"t", "q0", "p0"}


def test_simulate_emit_paths_binary_dump(tmp_path):
    cfg = write_config(tmp_path, {"emit_paths": True, "n_steps": 20})
    assert run("simulate", cfg, {"out_dir": str(tmp_path)}) == 0
    from skap import load_path
    path = load_path(str(tmp_path / "path.bin"))
    assert path.n_steps == 20 and path.dimension == 1


def test_ap_check_all_builtins(tmp_path):
    code = run("ap-check", overrides={"out_dir": str(tmp_path), "paths": 50})
    assert code == 0
    summary = (tmp_path / "summary.txt").read_text()
    # four built-in models x two schemes
    assert summary.count("[PASS]") == 8


def test_strong_rate_small_config_and_thread_invariance(tmp_path):
    cfg = {
        "eps_grid": [0.01],
        "n_steps_grid": [8, 16, 32],
        "refine_ratio": 8,
        "samples": 400,
        "assertions": {"slope_min": 0.2, "slope_max": 1.2, "envelope_factor": 99.0},
    }
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    path = write_config(tmp_path, cfg)
    assert run("strong-rate", path, {"out_dir": str(out1)}) == 0
    assert run("strong-rate", path, {"out_dir": str(out2), "threads": 2}) == 0
    assert (out1 / "errors.csv").read_bytes() == (out2 / "errors.csv").read_bytes()
    assert (out1 / "rates.csv").read_bytes() == (out2 / "rates.csv").read_bytes()
    rows = read_rows(out1 / "errors.csv")
    assert len(rows) == 6  # 2 schemes x 3 dt
    assert {r["estimator"] for r in rows} == {"strong-L2"}
    fits = read_rows(out1 / "rates.csv")
    assert all(0.2 <= float(r["slope"]) <= 1.2 for r in fits)


def test_sk_limit_command_small(tmp_path):
    cfg = {
        "eps_grid": [0.5, 0.25, 0.125, 0.0625],
        "n_steps": 128,
        "samples": 300,
        "assertions": {"slope_min": 0.6, "slope_max": 1.4},
    }
    path = write_config(tmp_path, cfg)
    assert run("sk-limit", path, {"out_dir": str(tmp_path)}) == 0
    fits = read_rows(tmp_path / "rates.csv")
    assert fits[0]["group"] == "vs-eps"


def test_moments_command_small(tmp_path):
    cfg = {"eps_grid": [1.0, 1e-3, 1e-6], "samples": 200,
           "assertions": {"moment_ratio": 2.0}}
    path = write_config(tmp_path, cfg)
    code = run("moments", path, {"out_dir": str(tmp_path)})
    assert code == 0
    rows = read_rows(tmp_path / "errors.csv")
    assert {r["test_function"] for r in rows} == {"max-q2", "max-p2"}


def test_weak_rate_command_small(tmp_path):
    cfg = {
        "n_steps_grid": [8, 16, 32],
        "refine_ratio": 4,
        "samples": 3000,
        "assertions": {"slope_min": 0.2, "slope_max": 2.0, "stderr_fraction": 0.9},
    }
    path = write_config(tmp_path, cfg)
    code = run("weak-rate", path, {"out_dir": str(tmp_path)})
    assert code in (0, 3)  # tiny-sample stderr check may legitimately fail
    rows = read_rows(tmp_path / "errors.csv")
    assert {r["test_function"] for r in rows} == {"tanh"}
    assert {r["estimator"] for r in rows} == {"weak"}


def test_exit_code_assertion_failure(tmp_path):
    cfg = {
        "eps_grid": [0.01],
        "n_steps_grid": [8, 16, 32],
        "refine_ratio": 8,
        "samples": 300,
        "assertions": {"slope_min": 5.0, "slope_max": 6.0},
    }
    path = write_config(tmp_path, cfg)
    assert run("strong-rate", path, {"out_dir": str(tmp_path)}) == 3
    assert "[FAIL]" in (tmp_path / "summary.txt").read_text()


def test_exit_code_blowup(tmp_path):
    # dt = 100 on the limiting scheme diverges -> exit 4
    cfg = {"scheme": "euler-maruyama", "model": {"name": "linear"},
           "eps_grid": [1.0], "t_end": 20000.0, "n_steps": 200, "samples": 8}
    path = write_config(tmp_path, cfg)
    import numpy as np
    with np.errstate(over="ignore", invalid="ignore"):
        assert run("sk-limit", path, {"out_dir": str(tmp_path)}) == 4


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("strong-rate", str(bad)) == 2
    assert run("strong-rate", write_config(tmp_path, {"model": {"name": "nope"}})) == 2


def test_main_rejects_bogus_command():
    with pytest.raises(SystemExit) as exc:
        main(["bogus-command"])
    assert exc.value.code == 2


def test_errors_csv_rows_are_regenerable(tmp_path):
    cfg = {"eps_grid": [0.05], "n_steps_grid": [8, 16, 32], "refine_ratio": 4,
           "samples": 200, "assertions": {}}
    path = write_config(tmp_path, cfg)
    assert run("strong-rate", path, {"out_dir": str(tmp_path)}) == 0
    rows = read_rows(tmp_path / "errors.csv")
    row = rows[0]
    import numpy as np
    from skap import make_model, strong_error
    from skap.models import InitialCondition
    model = make_model(row["model"])
    ic = InitialCondition(np.array([1.0]), np.array([1.0]))
    again = strong_error(model, row["scheme"], ic, float(row["eps"]), 1.0,
                         round(1.0 / float(row["dt"])), 4, int(row["samples"]),
                         seed=int(row["seed"]))
    assert repr(again.value) == row["value"]
    assert repr(again.mc_std_error) == row["mc_std_error"]
