import json
import os

import numpy as np
import pytest

from lpvmpc import import_request, load_dataset, load_trace, solve
from lpvmpc.cli import (
    _InputError,
    _normalize_config,
    build_bound,
    build_plant,
    main,
    run_experiment,
)

from helpers import preset_bound, preset_plant


def make_cfg(tmp_path, name="cfg.json", **sections):
    """Write a small but feasible config file, returning its path."""
    cfg = {"schema": 1,
           "data": {"T": 6, "seed": 3},
           "run": {"steps": 4, "seeds": [0]}}
    cfg.update(sections)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfig:
    def test_defaults_and_json_round_trip(self):
        norm = _normalize_config({"schema": 1})
        assert norm["data"] == {"T": 20, "seed": 0}
        assert norm["run"] == {"steps": 100, "seeds": [0]}
        assert norm["plant"] == {"preset": "angular_positioning"}
        assert norm["bound"] == {"kind": "c_scaled", "c": 1.0}
        assert norm["sweep"] is None
        assert json.loads(json.dumps(norm)) == norm

    def test_schema_required(self):
        with pytest.raises(_InputError, match="schema"):
            _normalize_config({})
        with pytest.raises(_InputError, match="schema"):
            _normalize_config({"schema": 2})

    def test_unknown_keys_rejected(self):
        with pytest.raises(_InputError, match="plants"):
            _normalize_config({"schema": 1, "plants": {}})

    def test_sweep_section_validated(self):
        with pytest.raises(_InputError, match="axis"):
            _normalize_config({"schema": 1,
                               "sweep": {"axis": "q", "values": [1]}})
        with pytest.raises(_InputError, match="values"):
            _normalize_config({"schema": 1,
                               "sweep": {"axis": "c", "values": []}})

    def test_invalid_json_exits_4(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        code = main(["solve-step", "--config", str(bad),
                     "--out", str(tmp_path / "o")])
        assert code == 4
        assert "invalid JSON" in capsys.readouterr().err

    def test_missing_argument_exits_4(self, tmp_path, capsys):
        code = main(["simulate", "--config", make_cfg(tmp_path)])
        assert code == 4
        assert "error:" in capsys.readouterr().err


class TestBuilders:
    def test_preset_matches_library_helpers(self):
        bound, interval = build_bound({"kind": "c_scaled", "c": 1.0})
        ref = preset_bound(1.0)
        np.testing.assert_array_equal(bound.g11, ref.g11)
        np.testing.assert_array_equal(bound.g12, ref.g12)
        np.testing.assert_array_equal(bound.g22, ref.g22)
        assert interval == (0.05, 0.10)
        plant = build_plant({"preset": "angular_positioning"}, bound)
        ref_plant = preset_plant(ref)
        np.testing.assert_array_equal(plant.A_s, ref_plant.A_s)
        np.testing.assert_array_equal(plant.B_s, ref_plant.B_s)
        np.testing.assert_array_equal(plant.C, ref_plant.C)
        np.testing.assert_array_equal(plant.D, ref_plant.D)

    def test_interval_and_blocks_kinds(self):
        bound, interval = build_bound({"kind": "interval", "low": 0.1,
                                       "high": 0.3, "scale": 50.0,
                                       "size": 2})
        assert interval == (0.1, 0.3)
        spec = {"kind": "blocks", "g11": bound.g11.tolist(),
                "g12": bound.g12.tolist(), "g22": bound.g22.tolist()}
        again, interval2 = build_bound(spec)
        assert interval2 is None
        np.testing.assert_array_equal(again.g11, bound.g11)

    def test_bad_specs_rejected(self):
        with pytest.raises(_InputError, match="positive"):
            build_bound({"kind": "c_scaled", "c": -1.0})
        with pytest.raises(_InputError, match="bound kind"):
            build_bound({"kind": "polytope"})
        with pytest.raises(_InputError, match="preset"):
            build_plant({"preset": "quadrotor"}, preset_bound(1.0))
        with pytest.raises(_InputError, match="missing key"):
            build_plant({"A": [[1.0]]}, preset_bound(1.0))


class TestGenerateAndSolve:
    def test_generate_data_deterministic(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert main(["generate-data", "--config", cfg,
                     "--out", str(d1)]) == 0
        out = capsys.readouterr().out
        assert "T=6" in out and "seed=3" in out and "ok=True" in out
        assert main(["generate-data", "--config", cfg,
                     "--out", str(d2)]) == 0
        b1 = (d1 / "dataset.csv").read_bytes()
        assert b1 == (d2 / "dataset.csv").read_bytes()
        ds = load_dataset(str(d1 / "dataset.csv"))
        assert ds.T == 6

    def test_generate_data_seed_override(self, tmp_path):
        cfg = make_cfg(tmp_path)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        main(["generate-data", "--config", cfg, "--out", str(d1)])
        main(["generate-data", "--config", cfg, "--out", str(d2),
              "--seed", "5"])
        assert (d1 / "dataset.csv").read_bytes() \
            != (d2 / "dataset.csv").read_bytes()

    def test_solve_step_optimal(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        out = tmp_path / "sol"
        assert main(["solve-step", "--config", cfg, "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert stdout.startswith("status=optimal gamma=")
        lines = (out / "solution.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].split(",")[1] == "optimal"

    def test_solve_step_infeasible_exits_2(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path, data={"T": 2, "seed": 3})
        code = main(["solve-step", "--config", cfg,
                     "--out", str(tmp_path / "sol")])
        assert code == 2
        assert "status=infeasible" in capsys.readouterr().out

    def test_export_sdp_round_trips(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        out = tmp_path / "prob.sdp"
        assert main(["export-sdp", "--config", cfg, "--out", str(out)]) == 0
        assert "exported 13 variables, 4 PSD blocks" \
            in capsys.readouterr().out
        result = solve(import_request(str(out)))
        assert result.status == "optimal"


class TestSimulateAndVerify:
    def test_simulate_bundle_contents(self, tmp_path):
        cfg = make_cfg(tmp_path)
        out = tmp_path / "sim"
        assert main(["simulate", "--config", cfg, "--out", str(out),
                     "--gnuplot"]) == 0
        for name in ("dataset.csv", "trace_0.csv", "solutions_0.csv",
                     "plot_data.csv", "report.txt", "plot.gp"):
            assert (out / name).exists(), name
        report = (out / "report.txt").read_text()
        assert "seed 0: completed steps=4" in report
        plot = (out / "plot_data.csv").read_text().splitlines()
        assert plot[0] == "seed,t,norm_x,acc_cost"
        assert len(plot) == 6  # 4 applied steps + final state

    def test_simulate_infeasible_exits_2(self, tmp_path):
        cfg = make_cfg(tmp_path, data={"T": 2, "seed": 3})
        out = tmp_path / "sim"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 2
        assert "seed 0: infeasible" in (out / "report.txt").read_text()

    def test_verify_clean_bundle_passes(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        out = tmp_path / "sim"
        main(["simulate", "--config", cfg, "--out", str(out)])
        capsys.readouterr()
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "overall: pass" in stdout
        report = (out / "verify_report.txt").read_text()
        assert "decrease_inequality" in report
        assert "cost_upper_bound" in report
        assert "step certificates" in report

    def test_verify_tampered_state_fails(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        out = tmp_path / "sim"
        main(["simulate", "--config", cfg, "--out", str(out)])
        trace_path = out / "trace_0.csv"
        lines = trace_path.read_text().splitlines()
        parts = lines[2].split(",")  # the t=1 row
        parts[1] = "0.9"
        lines[2] = ",".join(parts)
        trace_path.write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_verify_infeasible_bundle_inconclusive(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path, data={"T": 2, "seed": 3})
        out = tmp_path / "sim"
        main(["simulate", "--config", cfg, "--out", str(out)])
        capsys.readouterr()
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 0
        assert "overall: inconclusive" in capsys.readouterr().out

    def test_verify_rejects_non_bundle(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        code = main(["verify", "--config", cfg,
                     "--out", str(tmp_path / "nowhere")])
        assert code == 4
        assert "not a bundle" in capsys.readouterr().err


class TestSweep:
    def test_t_axis_with_infeasible_point(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path, sweep={"axis": "T", "values": [2, 6]})
        out = tmp_path / "sw"
        assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
        plot = (out / "plot_data.csv").read_text().splitlines()
        assert plot[0] == "T,acc_cost"
        assert plot[1] == "2,nan"
        t6_cost = float(plot[2].split(",")[1])
        assert np.isfinite(t6_cost) and t6_cost > 0
        report = (out / "report.txt").read_text()
        assert "T=2: infeasible" in report and "T=6: completed" in report
        for k in (0, 1):
            for stem in ("dataset", "trace", "solutions"):
                assert (out / f"{stem}_point{k}.csv").exists()
        # the feasible point carries the verdict; the empty one is skipped
        capsys.readouterr()
        assert main(["verify", "--config", cfg, "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "T=2: inconclusive" in stdout
        assert "overall: pass" in stdout

    def test_c_axis_parallel_workers(self, tmp_path):
        cfg = make_cfg(tmp_path, sweep={"axis": "c", "values": [0.5, 1.0]},
                       run={"steps": 3, "seeds": [0]})
        out = tmp_path / "sw"
        assert main(["sweep", "--config", cfg, "--out", str(out),
                     "--workers", "2"]) == 0
        plot = (out / "plot_data.csv").read_text().splitlines()
        assert plot[0] == "c,acc_cost"
        assert [ln.split(",")[0] for ln in plot[1:]] == ["0.5", "1.0"]
        assert all(np.isfinite(float(ln.split(",")[1])) for ln in plot[1:])

    def test_sweep_nested_t_prefixes(self, tmp_path):
        cfg = make_cfg(tmp_path, sweep={"axis": "T", "values": [4, 6]})
        out = tmp_path / "sw"
        main(["sweep", "--config", cfg, "--out", str(out)])
        small = load_dataset(str(out / "dataset_point0.csv"))
        big = load_dataset(str(out / "dataset_point1.csv"))
        np.testing.assert_array_equal(small.X, big.X[:, :5])
        np.testing.assert_array_equal(small.U, big.U[:, :4])

    def test_sweep_needs_section(self, tmp_path, capsys):
        cfg = make_cfg(tmp_path)
        code = main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")])
        assert code == 4
        assert "no sweep section" in capsys.readouterr().err


class TestRunExperimentApi:
    def test_simulate_form(self, tmp_path):
        out = str(tmp_path / "exp")
        summary = run_experiment(
            {"schema": 1, "data": {"T": 6, "seed": 3},
             "run": {"steps": 3, "seeds": [0, 1]}}, out)
        assert summary == {"exit_code": 0, "out_dir": out}
        for seed in (0, 1):
            back = load_trace(os.path.join(out, f"trace_{seed}.csv"))
            assert back["X"].shape == (2, 4)

    def test_sweep_form(self, tmp_path):
        out = str(tmp_path / "exp")
        summary = run_experiment(
            {"schema": 1, "data": {"T": 6, "seed": 3},
             "run": {"steps": 2, "seeds": [0]},
             "sweep": {"axis": "c", "values": [1.0]}}, out)
        assert summary["exit_code"] == 0
        assert os.path.exists(os.path.join(out, "plot_data.csv"))
