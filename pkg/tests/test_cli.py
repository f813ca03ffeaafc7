import json

import numpy as np
import pytest

from nmargof.cli import (
    RunConfig,
    build_report,
    load_csv,
    main,
    run_config,
    validate_report,
    write_csv,
)
from nmargof.errors import DataFormatError, InvalidInputError
from nmargof.estimation import fit_mle
from nmargof.rng import generator
from nmargof.simulation import draw_joint, get_scenario


def config(path, **kw):
    base = dict(data_path=str(path), outcome_col="y", propensity_cols=["x1", "x2"],
                outcome_cols=["x1", "x2", "x3"], family="normal", method="both", B=20)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = draw_joint(get_scenario(2, "I"), 400, generator(12, "simulation", 0))
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    write_csv(d, path)
    return d, path


class TestLoadCsv:
    def test_counts(self, tmp_path):
        p = tmp_path / "four.csv"
        p.write_text("x1,y\n1.0,2.5\n2.0,\n3.0,NA\n4.0,0.1\n")
        d = load_csv(p, RunConfig(str(p), "y", ["x1"], ["x1"]))
        assert (d.n, d.n_missing, d.missing_rate) == (4, 2, 0.5)
        assert list(d.r) == [1, 0, 0, 1]

    def test_missing_covariate_names_cell(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("x1,x2,y\n1.0,2.0,1\n1.5,,0\n")
        with pytest.raises(DataFormatError) as exc:
            load_csv(p, RunConfig(str(p), "y", ["x1"], ["x2"]))
        assert exc.value.details["line"] == 3 and exc.value.details["column"] == "x2"

    def test_unparseable_cell(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("x1,y\n1.0,abc\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(p, RunConfig(str(p), "y", ["x1"], ["x1"]))

    def test_unknown_column(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x1,y\n1.0,1\n")
        with pytest.raises(InvalidInputError):
            load_csv(p, RunConfig(str(p), "y", ["z"], ["x1"]))

    def test_outcome_as_covariate(self, tmp_path):
        with pytest.raises(InvalidInputError):
            RunConfig(None, "y", ["y"], ["x1"]).validate()

    def test_round_trip(self, sim_csv):
        d, path = sim_csv
        back = load_csv(path, config(path))
        np.testing.assert_array_equal(back.X, d.X)
        np.testing.assert_array_equal(back.r, d.r)
        np.testing.assert_array_equal(back.y, d.y)
        fam = get_scenario(2, "I").outcome
        a, b = fit_mle(d, fam), fit_mle(back, fam)
        assert np.array_equal(a.theta_vector, b.theta_vector)


class TestReport:
    def test_both_methods(self, sim_csv):
        _, path = sim_csv
        rep = run_config(config(path))
        validate_report(rep)
        assert rep["plugin_p"] is not None and rep["boot_p"] is not None
        assert len(rep["fit_table"]) == 9
        assert rep["missing_rate"] == rep["n_missing"] / rep["n"]
        assert rep["reject"] == rep["boot_reject"]

    def test_plugin_only(self, sim_csv):
        _, path = sim_csv
        rep = run_config(config(path, method="plugin"))
        validate_report(rep)
        assert rep["boot_p"] is None and rep["reject"] == rep["plugin_reject"]

    def test_round_trip_gives_same_test(self, sim_csv):
        d, path = sim_csv
        a = run_config(config(path))
        b = run_config(config(path), data=d)
        assert a["t_n"] == b["t_n"] and a["boot_p"] == b["boot_p"]

    def test_non_finite_becomes_null(self, sim_csv):
        d, path = sim_csv
        cfg = config(path, method="fit")
        fit = fit_mle(d, get_scenario(2, "I").outcome)
        fit.loglik = float("nan")
        rep = build_report(cfg, d, fit)
        assert rep["fit"]["loglik"] is None
        assert any("loglik" in w for w in rep["warnings"])
        validate_report(rep)


class TestMain:
    def test_test_command(self, sim_csv, tmp_path, capsys):
        _, path = sim_csv
        out = tmp_path / "r.json"
        code = main(["test", "--data", str(path), "--outcome", "y", "--family", "normal",
                     "--propensity-cols", "x1,x2", "--outcome-cols", "x1,x2,x3",
                     "--boot-reps", "20", "--seed", "1", "--out", str(out)])
        rep = json.loads(out.read_text())
        validate_report(rep)
        assert code == (2 if rep["reject"] else 0)
        assert "T_n" in capsys.readouterr().out

    def test_fit_command(self, sim_csv, tmp_path):
        _, path = sim_csv
        out = tmp_path / "f.json"
        code = main(["fit", "--data", str(path), "--outcome", "y", "--family", "normal",
                     "--propensity-cols", "x1,x2", "--outcome-cols", "x1,x2,x3",
                     "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        validate_report(rep)
        assert rep["t_n"] is None

    def test_zero_replicates_is_usage_error(self, sim_csv, capsys):
        _, path = sim_csv
        code = main(["test", "--data", str(path), "--outcome", "y", "--family", "normal",
                     "--propensity-cols", "x1,x2", "--outcome-cols", "x1,x2,x3",
                     "--boot-reps", "0"])
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"] == "invalid_input"

    def test_missing_file(self, tmp_path, capsys):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"), "--outcome", "y",
                     "--propensity-cols", "x1", "--outcome-cols", "x1"])
        assert code == 1

    def test_bad_scenario(self, capsys):
        assert main(["simulate", "--example", "1", "--scenario", "IX"]) == 1

    def test_simulate_byte_identical(self, tmp_path, capsys):
        args = ["simulate", "--example", "2", "--scenario", "II", "--n", "200", "--reps", "3",
                "--boot-reps", "10", "--seed", "4"]
        assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
