import csv
import io
import json
import subprocess
import sys
from fractions import Fraction

import pytest

from stratshrink import cli


def write_cfg(tmp_path, name="cfg.json", **cfg):
    path = tmp_path / name
    path.write_text(json.dumps({"schema": 1, **cfg}))
    return str(path)


def run(tmp_path, experiment, *extra, **cfg):
    out = tmp_path / "out"
    argv = [experiment, "--config", write_cfg(tmp_path, **cfg), "--out", str(out), *extra]
    return cli.main(argv), out


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# generated ")
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


class TestConditions:
    def test_multi_set_shrinkage(self):
        assert cli.multi_shrink_conditions([5, 5]).ok
        assert not cli.multi_shrink_conditions([4, 4]).ok
        assert not cli.multi_shrink_conditions([6]).ok

    def test_m2_reduces_to_product(self):
        # with m = 2 the inequality is (n - 1)(n - 5) >= 0
        for n in range(4, 12):
            assert cli.multi_shrink_conditions([n, n]).ok == ((n - 1) * (n - 5) >= 0)

    def test_entropy_without_total(self):
        assert cli.entropy_conditions([4, 4], 2, [1.5, 1.5]).ok
        assert not cli.entropy_conditions([4, 4], 2, [2.5, 1.5]).ok
        assert not cli.entropy_conditions([4, 4], 4, [1.5, 1.5]).ok

    def test_entropy_with_total(self):
        rep = cli.entropy_total_conditions([5, 5], 3.5, [2, 2])
        assert rep.ok
        # the sufficient pair quoted alongside the hypotheses
        m, alpha = 2, Fraction(7, 2)
        assert alpha - 1 >= Fraction(9, 4) * (m - 1)
        assert Fraction(3, 2) * (m - 1) <= Fraction(10, 2) - 1
        assert not cli.entropy_total_conditions([5, 4], 3.5, [2, 2]).ok
        assert not cli.entropy_total_conditions([5, 5], 1.2, [2, 2]).ok

    def test_prior_chain(self):
        assert not cli.prior_chain_conditions([2, 3], 2).ok
        assert not cli.prior_chain_conditions([2, 3], 1).ok
        assert cli.prior_chain_conditions([2, 4], 1).ok
        with pytest.raises(cli.ConfigError):
            cli.prior_chain_conditions([2, 3], 3)

    def test_exact_arithmetic(self):
        # 0.1 + 0.2 style inputs must not be perturbed by floating point
        assert cli._q(0.1) == Fraction(1, 10)


class TestExperiments:
    def test_dominance_passes(self, tmp_path):
        code, out = run(tmp_path, "dominance", m=[2, 5], Lambda=[0.5, 20], theta=["uniform"], reps=2000)
        assert code == 0
        rows = read_rows(out / "dominance.csv")
        assert rows[0].keys() == set(cli.CSV_COLUMNS)
        assert all(r["mean"] for r in rows)
        d2 = [float(r["exact"]) for r in rows if r["rule_a"] == "BasicShrinkGB"]
        assert d2 and all(v < 0 for v in d2)
        assert (out / "dominance.svg").read_text().startswith("<svg")

    def test_dominance_single_cell_warns(self, tmp_path, capsys):
        code, out = run(tmp_path, "dominance", m=[1], Lambda=[1.0], reps=0)
        assert code == 0
        assert "warning" in capsys.readouterr().err
        rows = read_rows(out / "dominance.csv")
        assert all(float(r["exact"]) == 0 for r in rows)

    def test_minimax(self, tmp_path):
        code, out = run(tmp_path, "minimax", m=[1, 2])
        assert code == 0
        checks = read_rows(out / "minimax_checks.csv")
        assert any(c["check"].startswith("m=1 flat risk at Lambda=1") and c["passed"] == "True" for c in checks)

    def test_hudson(self, tmp_path):
        code, _ = run(tmp_path, "hudson", lambdas=[0.5, 3.0])
        assert code == 0

    def test_predictive(self, tmp_path):
        code, out = run(tmp_path, "predictive_check", lambdas=[1.3])
        assert code == 0
        assert len(read_rows(out / "predictive_check.csv")) == 2

    def test_multi_refused(self, tmp_path, capsys):
        code, out = run(tmp_path, "multi_dominance", branching=[2, 3], reps=2000)
        assert code == 2
        assert "refused" in capsys.readouterr().err
        assert not (out / "multi_dominance.csv").exists()

    def test_multi_override_marked(self, tmp_path):
        code, out = run(tmp_path, "multi_dominance", "--override-conditions",
                        branching=[2, 4], leaf_rates=[1.0], reps=2000)
        assert code in (0, 1)
        checks = read_rows(out / "multi_dominance_checks.csv")
        assert any(c["check"] == "OVERRIDE" for c in checks)

    def test_hierarchy_skips_refused_prior_chain(self, tmp_path):
        code, out = run(tmp_path, "hierarchy", leaf_rates=[1.0], reps=4000)
        checks = read_rows(out / "hierarchy_checks.csv")
        skipped = [c for c in checks if c["check"].startswith("hypotheses: prior chain")]
        assert skipped and skipped[0]["passed"] == "" and "refused" in skipped[0]["detail"]
        assert code == 0

    def test_blyth_failing_claim_sets_exit_one(self, tmp_path, monkeypatch):
        from stratshrink.risk import ExactValue

        fake = {1: 0.2, 2: 0.3}
        monkeypatch.setattr(cli, "blyth_delta_bound", lambda k, *a: ExactValue(fake[k], 0.0))
        code, out = run(tmp_path, "blyth", k=[1, 2])
        assert code == 1
        assert any(c["passed"] == "False" for c in read_rows(out / "blyth_checks.csv"))


class TestConfig:
    def test_unknown_key(self, tmp_path):
        code, _ = run(tmp_path, "minimax", colour="blue")
        assert code == 2

    def test_schema_version(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"schema": 2}))
        assert cli.main(["minimax", "--config", str(path), "--out", str(tmp_path)]) == 2

    def test_experiment_mismatch(self, tmp_path):
        path = write_cfg(tmp_path, experiment="hudson")
        assert cli.main(["minimax", "--config", path, "--out", str(tmp_path)]) == 2

    def test_small_reps(self, tmp_path):
        code, _ = run(tmp_path, "multi_dominance", reps=10)
        assert code == 2

    def test_empty_grid(self, tmp_path):
        code, _ = run(tmp_path, "dominance", Lambda=[])
        assert code == 2


class TestDeterminism:
    def test_byte_identical(self, tmp_path):
        cfg = dict(m=[2], Lambda=[1.0, 5.0], reps=3000, seed=99)
        outs = []
        for i, workers in enumerate(("1", "2")):
            out = tmp_path / f"o{i}"
            cli.main(["dominance", "--config", write_cfg(tmp_path, **cfg), "--out", str(out), "--workers", workers])
            outs.append((out / "dominance.csv").read_text().splitlines()[1:])
        assert outs[0] == outs[1]

    def test_seed_flag_overrides(self, tmp_path):
        base = dict(m=[2], Lambda=[1.0], theta=["uniform"], reps=3000, seed=1)
        a = cli.run_experiment("dominance", {"schema": 1, **base})
        b = cli.run_experiment("dominance", {"schema": 1, **base}, seed=2)
        assert a.rows[0]["seed"] == "1" and b.rows[0]["seed"] == "2"

    def test_console_entry_point(self, tmp_path):
        res = subprocess.run(
            [sys.executable, "-m", "stratshrink.cli", "hudson", "--out", str(tmp_path)],
            capture_output=True, text=True, check=False,
        )
        assert res.returncode == 0
        assert (tmp_path / "hudson.csv").exists()
