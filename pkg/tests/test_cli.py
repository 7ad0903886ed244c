import json

import numpy as np
import pytest

from amigo.cli import (
    CSV_COLUMNS,
    METHODS,
    build_config,
    build_noise,
    build_problem,
    cost_to_reach,
    main,
    make_stop_rule,
    rows_to_csv,
    run_checks,
    run_single,
    run_sweep,
)
from amigo.metrics import MetricRow


def quad_spec(**kw):
    spec = {"family": "quadratic", "dx": 24, "dy": 12, "kappa_g": 10.0, "kappa_L": 5.0, "seed": 1}
    spec.update(kw)
    return spec


class TestMethodMapping:
    def test_mapping_table(self):
        # The method names pin down (warm flags x linear solver x driver).
        assert METHODS["amigo-gd"] == dict(
            driver="aid", warm_y=True, warm_z=True, linear_solver="sgd"
        )
        assert METHODS["amigo-cg"]["warm_z"] and METHODS["amigo-cg"]["linear_solver"] == "cg"
        assert not METHODS["aid-gd"]["warm_z"] and METHODS["aid-gd"]["warm_y"]
        assert not METHODS["aid-cg"]["warm_z"]
        assert METHODS["aid-cg-ws"] == dict(
            driver="aid", warm_y=False, warm_z=True, linear_solver="cg"
        )
        assert METHODS["aid-fp"]["linear_solver"] == "fixed_point"
        assert METHODS["aid-n"]["linear_solver"] == "neumann"
        assert METHODS["itd"] == dict(driver="itd", warm_y=True, increasing_T=False)
        assert METHODS["reverse"] == dict(driver="itd", warm_y=True, increasing_T=True)

    def test_mapping_is_bijective(self):
        combos = {
            (m.get("driver"), m.get("warm_y"), m.get("warm_z"), m.get("linear_solver"),
             m.get("increasing_T"))
            for m in METHODS.values()
        }
        assert len(combos) == len(METHODS)

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            build_config(build_problem(quad_spec()), "sgd-magic", {}, build_noise(None))


class TestBuildConfig:
    def test_schedule_defaults_from_problem(self):
        problem = build_problem(quad_spec())
        config = build_config(problem, "amigo-gd", {}, build_noise(None))
        assert config.alpha == pytest.approx(1.0, rel=1e-9)
        assert config.beta == pytest.approx(0.5, rel=1e-9)
        assert config.gamma == pytest.approx(1.0, rel=1e-9)  # exact outer bound is 1
        assert config.T == 10 and config.N == 10

    def test_overrides_win(self):
        problem = build_problem(quad_spec())
        config = build_config(
            problem, "aid-n", {"T": 3, "N": 77, "K": 9, "gamma": 0.25}, build_noise(None)
        )
        assert (config.T, config.N, config.K, config.gamma) == (3, 77, 9, 0.25)
        assert config.linear_solver == "neumann"
        assert not config.warm_z


class TestCsvEmission:
    def row(self, k, cost=0):
        return MetricRow(
            k=k, rel_error=0.5 if k else 1.0, grad_norm_sq=1.25, combined_sc=None,
            avg_grad_norm_sq=1.25, energy_x=None, cost=cost, wall_s=0.123,
        )

    def test_header_and_empty_fields(self):
        text = rows_to_csv([self.row(0)], "amigo-gd", 7)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        cells = lines[1].split(",")
        assert cells[0] == "amigo-gd" and cells[1] == "7"
        assert cells[6] == "" and cells[7] == ""  # combined_sc, energy_x absent
        assert cells[9] == ""  # wall_s empty without --timing

    def test_timing_column_opt_in(self):
        text = rows_to_csv([self.row(0)], "amigo-gd", 7, timing=True)
        assert text.strip().split("\n")[1].split(",")[9] == "0.123"

    def test_cost_to_reach_first_crossing(self):
        rows = [self.row(0, cost=0), self.row(1, cost=10), self.row(2, cost=20)]
        rows[1].rel_error = 0.09
        rows[2].rel_error = 0.01
        assert cost_to_reach(rows, 0.1) == 10
        assert cost_to_reach(rows, 0.01) == 20
        assert cost_to_reach(rows, 1e-9) is None


class TestStopRule:
    def make_row(self, k, rel, cost):
        return MetricRow(k, rel, 0.0, None, 0.0, None, cost, 0.0)

    def test_stops_on_target(self):
        stop = make_stop_rule(1e-3, None)
        assert not stop(self.make_row(1, 1e-2, 10))
        assert stop(self.make_row(2, 1e-4, 20))

    def test_stops_on_cost_cap(self):
        stop = make_stop_rule(None, 100)
        assert not stop(self.make_row(1, 1.0, 99))
        assert stop(self.make_row(2, 1.0, 100))

    def test_stall_detection(self):
        # A flat metric trips the stall rule shortly after the cost floor;
        # a geometrically improving one never does.
        stop = make_stop_rule(1e-12, None, stall_after_cost=1000)
        stalled_at = None
        for k in range(1, 10_000):
            if stop(self.make_row(k, 0.5, 10 * k)):
                stalled_at = 10 * k
                break
        assert stalled_at is not None and stalled_at <= 2000

    def test_geometric_progress_never_stalls(self):
        stop = make_stop_rule(None, 200_000, stall_after_cost=5000)
        for k in range(1, 20_001):
            if stop(self.make_row(k, 0.999**k, 10 * k)):
                break
        assert 10 * k >= 200_000  # only the cost cap fired


class TestRunSingle:
    def test_every_method_runs(self):
        problem = build_problem(quad_spec())
        noise = build_noise(None)
        for method in METHODS:
            config = build_config(problem, method, {"K": 3, "T": 2, "N": 2}, noise)
            record = run_single(problem, method, config, seed=0, noise=noise)
            assert len(record.rows) == 4
            assert np.all(np.isfinite(record.x_final))

    def test_run_deterministic_across_calls(self):
        problem = build_problem(quad_spec())
        noise = build_noise({"sigma_g": 0.5})
        config = build_config(problem, "amigo-gd", {"K": 10}, noise)
        a = run_single(problem, "amigo-gd", config, seed=3, noise=noise)
        b = run_single(problem, "amigo-gd", config, seed=3, noise=noise)
        assert np.array_equal(a.x_final, b.x_final)


class TestSweep:
    def sweep_kwargs(self, workers=1):
        return dict(
            problem_spec=quad_spec(),
            methods=["amigo-gd", "aid-gd"],
            T_grid=[1, 5],
            N_grid=[1, 5],
            seeds=[0],
            K_max=60,
            eps=(1e-1, 1e-2),
            workers=workers,
        )

    def test_best_cell_selection_is_min_over_table(self):
        results, summary = run_sweep(**self.sweep_kwargs())
        for method in ("amigo-gd", "aid-gd"):
            cells = summary[method]["cells"]
            for eps_key, best in summary[method]["best"].items():
                reached = [
                    c["median_cost_to_eps"][eps_key]
                    for c in cells
                    if c["median_cost_to_eps"][eps_key] is not None
                ]
                if best is None:
                    assert not reached
                else:
                    assert best["cost"] == min(reached)

    def test_worker_count_does_not_change_results(self):
        serial, _ = run_sweep(**self.sweep_kwargs(workers=1))
        parallel, _ = run_sweep(**self.sweep_kwargs(workers=2))
        assert len(serial) == len(parallel)
        for a, b in zip(serial, parallel):
            assert a["key"] == b["key"] and a["seed"] == b["seed"]
            assert a["rows"] == b["rows"]

    def test_empty_seed_list_rejected(self):
        kwargs = self.sweep_kwargs()
        kwargs["seeds"] = []
        with pytest.raises(ValueError):
            run_sweep(**kwargs)

    def test_kappa_axis_produces_per_kappa_cells(self):
        results, summary = run_sweep(
            problem_spec=quad_spec(),
            methods=["amigo-gd"],
            T_grid=[5],
            N_grid=[5],
            seeds=[0],
            K_max=40,
            eps=(1e-1,),
            kappa_g_grid=[1.0, 10.0],
        )
        kappas = {r["cell"]["kappa_g"] for r in results}
        assert kappas == {1.0, 10.0}
        assert len(summary["amigo-gd"]["cells"]) == 2


class TestChecks:
    def test_quadratic_checks_pass(self):
        problem = build_problem(quad_spec())
        checks = run_checks(problem, noise=build_noise({"sigma_g": 1.0}), seed=0)
        assert all(c["passed"] for c in checks)
        fd = next(c for c in checks if c["name"] == "finite-difference gradient")
        assert fd["value"] <= 1e-6
        var16 = next(c for c in checks if "b=16" in c["name"])
        assert var16["value"]["variance"] == pytest.approx(1.0 / 16.0, rel=0.2)

    def test_ridge_checks_pass(self):
        problem = build_problem({"family": "ridge", "n_tr": 60, "n_val": 40, "d": 20,
                                 "label_noise": 0.1, "seed": 2})
        checks = run_checks(problem, seed=0)
        assert all(c["passed"] for c in checks)


class TestEndToEnd:
    def test_generate_then_run_from_file(self, tmp_path):
        cfg = {
            "problem": quad_spec(),
            "method": "amigo-cg",
            "seed": 4,
            "solver": {"K": 20},
            "eps": [1e-2],
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        bin_path = tmp_path / "p.bin"
        assert main(["generate", "--config", str(cfg_path), "--out", str(bin_path)]) == 0
        assert bin_path.exists() and (tmp_path / "p.bin.json").exists()

        cfg["problem"] = {"path": str(bin_path)}
        cfg_path.write_text(json.dumps(cfg))
        out_csv = tmp_path / "run.csv"
        assert main(["run", "--config", str(cfg_path), "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 22  # header + K + 1 rows
        summary = json.loads((tmp_path / "run.csv.summary.json").read_text())
        assert summary["method"] == "amigo-cg"
        assert summary["cost_to_eps"]["0.01"] is not None

    def test_repeat_run_is_byte_identical(self, tmp_path):
        cfg = {
            "problem": quad_spec(),
            "noise": {"sigma_g": 0.5, "sigma_f": 0.5},
            "method": "amigo-gd",
            "seed": 9,
            "solver": {"K": 15},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["run", "--config", str(cfg_path), "--out", str(a)])
        main(["run", "--config", str(cfg_path), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_flag_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"problem": quad_spec(), "solver": {"K": 5}}))
        out = tmp_path / "o.csv"
        main(["run", "--config", str(cfg_path), "--out", str(out), "--method", "aid-fp",
              "--seed", "2", "--T", "3", "--N", "4"])
        first_row = out.read_text().strip().split("\n")[1].split(",")
        assert first_row[0] == "aid-fp" and first_row[1] == "2"

    def test_sweep_command(self, tmp_path):
        cfg = {
            "problem": quad_spec(),
            "sweep": {"methods": ["amigo-gd"], "T": [2], "N": [2], "seeds": [0], "K": 20},
            "eps": [1e-1],
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert out.exists() and (tmp_path / "sweep.csv.summary.json").exists()

    def test_check_command(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"problem": quad_spec()}))
        assert main(["check", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_invalid_problem_reports_structured_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"problem": quad_spec(kappa_g=0.5)}))
        code = main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "p.bin")])
        assert code == 2
        assert "error:" in capsys.readouterr().err
