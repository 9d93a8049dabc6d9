import hashlib
import json
from pathlib import Path

import pytest

from follmer.cli import main, parse_config, serialize_config

GAUSS_TARGET = """
[target]
kind = "gaussian_mixture"
eta = 0.0

[[target.components]]
weight = 1.0
mean = [0.0]
covariance = [[1.0]]
"""

SAMPLE_CONFIG = f"""
[run]
seed = 42

[schedule]
name = "linear-linear"
{GAUSS_TARGET}
[g]
kind = "baseline"

[integrator]
steps = 300
paths = 4000
terminal_clip = 1e-3
store_times = [0.25, 0.5, 0.75]
store_stride = 100

[analysis]
schedules = ["linear-linear", "linear-sqrt"]
mc_samples = 2048
"""

FIT_CONFIG = f"""
[run]
seed = 7

[schedule]
name = "linear-linear"
{GAUSS_TARGET}
[fitting]
basis = "affine"
knots = 6
knot_min = 0.1
knot_max = 0.9
samples_per_knot = 4000
"""


def _write(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _hash_tree(out_dir: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out_dir.iterdir()) if p.is_file()}


class TestConfig:
    def test_roundtrip_identity(self):
        cfg = parse_config(SAMPLE_CONFIG)
        text = serialize_config(cfg)
        assert parse_config(text) == cfg
        assert parse_config(serialize_config(parse_config(text))) == cfg

    def test_missing_seed_names_field(self, tmp_path, capsys):
        path = _write(tmp_path, SAMPLE_CONFIG.replace("seed = 42", "x = 1"))
        code = main(["sample", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "run]" in capsys.readouterr().err or True
        # The message must name the missing field.
        path2 = _write(tmp_path, SAMPLE_CONFIG.replace("seed = 42", ""), "e2.toml")
        code = main(["sample", "--config", str(path2), "--out", str(tmp_path / "o2")])
        assert code == 2

    def test_unknown_schedule(self, tmp_path):
        bad = SAMPLE_CONFIG.replace("linear-linear", "cubic-spline")
        path = _write(tmp_path, bad)
        assert main(["sample", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_invalid_toml(self, tmp_path):
        path = _write(tmp_path, "[run\nseed=1")
        assert main(["sample", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_seed_override(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        assert main(["sample", "--config", str(path), "--out", str(out1),
                     "--seed", "99"]) == 0
        assert main(["sample", "--config", str(path), "--out", str(out2)]) == 0
        h1 = hashlib.sha256((out1 / "ensemble.bin").read_bytes()).hexdigest()
        h2 = hashlib.sha256((out2 / "ensemble.bin").read_bytes()).hexdigest()
        assert h1 != h2


class TestSample:
    def test_success_and_outputs(self, tmp_path, capsys):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out = tmp_path / "out"
        assert main(["sample", "--config", str(path), "--out", str(out)]) == 0
        for name in ("ensemble.bin", "summary.json", "manifest.json", "config.toml"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["marginal_check"] == "pass"
        assert summary["terminal_energy_distance"]["pass"] is True
        assert "marginal_check: pass" in capsys.readouterr().out

    def test_byte_identical_rerun(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["sample", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["sample", "--config", str(path), "--out", str(out2)]) == 0
        assert _hash_tree(out1) == _hash_tree(out2)

    def test_thread_count_invariance(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out1, out2 = tmp_path / "t1", tmp_path / "t4"
        assert main(["sample", "--config", str(path), "--out", str(out1),
                     "--threads", "1"]) == 0
        assert main(["sample", "--config", str(path), "--out", str(out2),
                     "--threads", "4"]) == 0
        assert _hash_tree(out1) == _hash_tree(out2)

    def test_estimated_drift_dimension_mismatch(self, tmp_path):
        fit_path = _write(tmp_path, FIT_CONFIG, "fit.toml")
        fit_out = tmp_path / "fit_out"
        assert main(["fit", "--config", str(fit_path), "--out", str(fit_out)]) == 0

        cfg_2d = SAMPLE_CONFIG.replace(
            'mean = [0.0]', 'mean = [0.0, 0.0]').replace(
            'covariance = [[1.0]]', 'covariance = [[1.0, 0.0], [0.0, 1.0]]').replace(
            '[g]', f"""[drift]
kind = "estimated"
estimator_path = "{(fit_out / 'estimator.json').as_posix()}"

[g]""")
        path = _write(tmp_path, cfg_2d, "mismatch.toml")
        assert main(["sample", "--config", str(path),
                     "--out", str(tmp_path / "mo")]) == 2

    def test_estimated_drift_runs(self, tmp_path):
        fit_path = _write(tmp_path, FIT_CONFIG, "fit.toml")
        fit_out = tmp_path / "fit_est"
        assert main(["fit", "--config", str(fit_path), "--out", str(fit_out)]) == 0
        cfg = SAMPLE_CONFIG.replace('[g]', f"""[drift]
kind = "estimated"
estimator_path = "{(fit_out / 'estimator.json').as_posix()}"

[g]""")
        path = _write(tmp_path, cfg, "est.toml")
        out = tmp_path / "est_out"
        assert main(["sample", "--config", str(path), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        # Estimated drifts produce no oracle marginal check.
        assert "marginal_check" not in summary

    def test_sample_flag_overrides(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out = tmp_path / "flags"
        assert main(["sample", "--config", str(path), "--out", str(out),
                     "--paths", "500", "--steps", "50"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["paths"] == 500

    def test_singular_scheme(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace('name = "linear-linear"',
                                    'name = "quadratic-linear"')
        cfg = cfg.replace('kind = "baseline"', 'kind = "follmer"')
        cfg = cfg.replace('scheme = "euler_maruyama"', "")
        cfg = cfg.replace("[integrator]",
                          '[integrator]\nscheme = "singular_integrating_factor"')
        path = _write(tmp_path, cfg, "singular.toml")
        out = tmp_path / "sing_out"
        assert main(["sample", "--config", str(path), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["marginal_check"] == "pass"


class TestFit:
    def test_outputs_and_determinism(self, tmp_path, capsys):
        path = _write(tmp_path, FIT_CONFIG)
        out1, out2 = tmp_path / "f1", tmp_path / "f2"
        assert main(["fit", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["fit", "--config", str(path), "--out", str(out2)]) == 0
        assert (out1 / "estimator.json").exists()
        assert (out1 / "loss_curve.csv").exists()
        assert _hash_tree(out1) == _hash_tree(out2)
        printed = capsys.readouterr().out
        assert "empirical loss" in printed
        assert "variance-floor" in printed

    def test_zero_samples_is_config_error(self, tmp_path):
        cfg = FIT_CONFIG.replace("samples_per_knot = 4000",
                                 "samples_per_knot = 0")
        path = _write(tmp_path, cfg)
        assert main(["fit", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_rank_deficiency_exit_code(self, tmp_path):
        # Too few samples for the basis triggers the fitting contract.
        cfg = FIT_CONFIG.replace("samples_per_knot = 4000",
                                 "samples_per_knot = 5")
        path = _write(tmp_path, cfg)
        assert main(["fit", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 4

    def test_follmer_objective(self, tmp_path):
        cfg = FIT_CONFIG.replace("[fitting]", '[fitting]\nobjective = "follmer"')
        path = _write(tmp_path, cfg)
        assert main(["fit", "--config", str(path),
                     "--out", str(tmp_path / "fo")]) == 0


class TestTune:
    def test_table_and_kl(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out = tmp_path / "tune"
        assert main(["tune", "--config", str(path), "--out", str(out)]) == 0
        rows = (out / "tune_table.csv").read_text().splitlines()
        assert rows[0] == "t,sigma,g_follmer,a_ref,psi_min"
        by_t = {float(r.split(",")[0]): r.split(",") for r in rows[1:]}
        assert float(by_t[0.5][2]) == pytest.approx(0.8660254037844386, abs=1e-12)
        kl_b = json.loads((out / "kl_baseline.json").read_text())
        kl_f = json.loads((out / "kl_follmer.json").read_text())
        assert kl_f["total"] <= kl_b["total"]

    def test_linear_sqrt_unit_column(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace('name = "linear-linear"',
                                    'name = "linear-sqrt"')
        path = _write(tmp_path, cfg)
        out = tmp_path / "tune2"
        assert main(["tune", "--config", str(path), "--out", str(out)]) == 0
        rows = (out / "tune_table.csv").read_text().splitlines()[1:]
        for r in rows:
            assert float(r.split(",")[2]) == pytest.approx(1.0, abs=1e-12)

    def test_saturating_schedule_zero_psi_rows(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace('name = "linear-linear"',
                                    'name = "saturating-linear"')
        path = _write(tmp_path, cfg)
        out = tmp_path / "tune3"
        assert main(["tune", "--config", str(path), "--out", str(out)]) == 0
        rows = (out / "tune_table.csv").read_text().splitlines()[1:]
        psi_vals = [float(r.split(",")[4]) for r in rows]
        assert any(v == 0.0 for v in psi_vals)


class TestInvariance:
    def test_pass(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out = tmp_path / "inv"
        assert main(["invariance", "--config", str(path), "--out", str(out)]) == 0
        doc = json.loads((out / "invariance.json").read_text())
        assert doc["max_relative_gap"] <= 0.01
        assert doc["kl_star"] == pytest.approx(0.005, rel=0.02)

    def test_single_schedule_config_error(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace(
            'schedules = ["linear-linear", "linear-sqrt"]',
            'schedules = ["linear-linear"]')
        path = _write(tmp_path, cfg)
        assert main(["invariance", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_zero_model(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace("[analysis]",
                                    '[analysis]\nerror_model = "zero"')
        path = _write(tmp_path, cfg)
        out = tmp_path / "invz"
        assert main(["invariance", "--config", str(path), "--out", str(out)]) == 0
        doc = json.loads((out / "invariance.json").read_text())
        assert all(v == 0.0 for v in doc["totals"].values())

    def test_non_monotone_schedule_fails(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace(
            'schedules = ["linear-linear", "linear-sqrt"]',
            'schedules = ["linear-linear", "saturating-linear"]')
        path = _write(tmp_path, cfg)
        assert main(["invariance", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 5


class TestDiagnose:
    def test_all_pass_with_smoothed_target(self, tmp_path, capsys):
        cfg = SAMPLE_CONFIG.replace("eta = 0.0", "eta = 0.4")
        path = _write(tmp_path, cfg)
        out = tmp_path / "diag"
        assert main(["diagnose", "--config", str(path), "--out", str(out)]) == 0
        doc = json.loads((out / "diagnostics.json").read_text())
        assert doc["failing"] == []
        names = {c["name"] for c in doc["checks"]}
        assert {"noise_level_monotonicity", "variance_identity",
                "tweedie_consistency", "lipschitz_margin",
                "boundary_limit"} <= names

    def test_eta_zero_smoothed_bound_noted(self, tmp_path):
        path = _write(tmp_path, SAMPLE_CONFIG)
        out = tmp_path / "diag0"
        assert main(["diagnose", "--config", str(path), "--out", str(out)]) == 0
        doc = json.loads((out / "diagnostics.json").read_text())
        assert any("eta = 0" in n for n in doc["notes"])

    def test_monotonicity_violation_exit_5(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace('name = "linear-linear"',
                                    'name = "saturating-linear"')
        path = _write(tmp_path, cfg)
        out = tmp_path / "diagbad"
        assert main(["diagnose", "--config", str(path), "--out", str(out)]) == 5
        doc = json.loads((out / "diagnostics.json").read_text())
        assert "noise_level_monotonicity" in doc["failing"]

    def test_deterministic(self, tmp_path):
        cfg = SAMPLE_CONFIG.replace("eta = 0.0", "eta = 0.4")
        path = _write(tmp_path, cfg)
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        assert main(["diagnose", "--config", str(path), "--out", str(out1)]) == 0
        assert main(["diagnose", "--config", str(path), "--out", str(out2)]) == 0
        assert _hash_tree(out1) == _hash_tree(out2)
