"""Integration tests: end-to-end through the command line entry point."""

import json
import time

import numpy as np
import pytest

import inference
from image_io import load_image, save_image
from models import ConvergenceError, GrayImage, SimMode
from phantom import generate_phantom, shepp_logan_spec
from simharness import BLOCK_CSV, FIELDS_NPY, QQ_CSV, REPLICATES_CSV, REPORT_JSON, SimConfig, run_pipeline
from sparsity_bhm import main, parse_theta


@pytest.fixture
def phantom_csv(tmp_path):
    path = tmp_path / "phantom.csv"
    save_image(generate_phantom(shepp_logan_spec(32, 32, noise_sigma=0.02, seed=1)), path)
    return path


@pytest.fixture
def coeffs_csv(tmp_path, phantom_csv):
    out = tmp_path / "coeffs.csv"
    main(["sparsify", str(phantom_csv), "--out", str(out)])
    return out


def _exit_code(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


class TestSparsify:
    def test_writes_coefficients_and_sidecar(self, tmp_path, coeffs_csv):
        assert coeffs_csv.exists()
        meta = json.loads(coeffs_csv.with_suffix(".json").read_text())
        assert meta["n_pixels"] == 1024
        assert 0 < meta["s"] < 1024
        assert meta["threshold_used"] > 0
        assert load_image(coeffs_csv).data.shape == (32, 32)

    def test_reconstruct(self, tmp_path, phantom_csv):
        denoised = tmp_path / "denoised.pgm"
        main(["sparsify", str(phantom_csv), "--out", str(tmp_path / "c.csv"),
              "--reconstruct", str(denoised)])
        assert load_image(denoised).n1 == 32

    def test_non_dyadic_image(self, tmp_path):
        path = tmp_path / "odd.csv"
        save_image(GrayImage(np.zeros((12, 16))), path)
        assert _exit_code(["sparsify", str(path), "--out", str(tmp_path / "c.csv")]) == 2

    def test_missing_image(self, tmp_path):
        assert _exit_code(["sparsify", str(tmp_path / "none.pgm"), "--out", str(tmp_path / "c.csv")]) == 2

    def test_negative_threshold(self, tmp_path, phantom_csv):
        argv = ["sparsify", str(phantom_csv), "--out", str(tmp_path / "c.csv"), "--threshold", "-1"]
        assert _exit_code(argv) == 2


class TestFit:
    def test_fixed_theta(self, tmp_path, coeffs_csv, capsys):
        stem = tmp_path / "result"
        main(["fit", str(coeffs_csv), "--out", str(stem), "--theta", "0.5,1,10", "--seed", "3"])
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["provenance"] == "fixed"
        assert result["theta_hat"] == {"kappa": 0.5, "sigma2_m": 1.0, "tau_iid": 10.0}
        assert 0 < result["e_hat"] < 1024
        assert result["grad_norm"] <= 1e-8
        assert result["seed"] == 3
        assert (tmp_path / "result_p_mean.csv").exists()
        assert load_image(tmp_path / "result_p_var.csv").data.shape == (32, 32)

        stdout = capsys.readouterr().out
        assert f"E(s) estimate: {result['e_hat']:.3f}" in stdout
        assert "|E(s) - s| * 100 / N:" in stdout

    def test_reproducible(self, tmp_path, coeffs_csv):
        for name in ("a", "b"):
            main(["fit", str(coeffs_csv), "--out", str(tmp_path / name), "--theta", "0.5,1,10"])
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text().replace('"b_p_', '"a_p_')
        assert (tmp_path / "a_p_mean.csv").read_bytes() == (tmp_path / "b_p_mean.csv").read_bytes()

    def test_precision_out(self, tmp_path, coeffs_csv):
        q_path = tmp_path / "q.txt"
        main(["fit", str(coeffs_csv), "--out", str(tmp_path / "r"), "--theta", "0.5,1,10",
              "--precision-out", str(q_path)])
        assert q_path.read_text().startswith("# 1024 ")

    def test_bad_theta(self, tmp_path, coeffs_csv):
        assert _exit_code(["fit", str(coeffs_csv), "--out", str(tmp_path / "r"), "--theta", "1,2"]) == 2
        assert _exit_code(["fit", str(coeffs_csv), "--out", str(tmp_path / "r"), "--theta", "1,-2,3"]) == 2

    def test_non_convergence_exit_code(self, tmp_path, coeffs_csv, monkeypatch, capsys):
        def fail(*args, **kwargs):
            raise ConvergenceError("Newton did not converge", grad_norm=0.5)

        monkeypatch.setattr(inference, "fit_laplace", fail)
        assert _exit_code(["fit", str(coeffs_csv), "--out", str(tmp_path / "r"), "--theta", "0.5,1,10"]) == 3
        assert "gradient norm 0.5" in capsys.readouterr().err

    @pytest.mark.slow
    def test_empirical_bayes(self, tmp_path, coeffs_csv):
        main(["fit", str(coeffs_csv), "--out", str(tmp_path / "eb")])
        result = json.loads((tmp_path / "eb.json").read_text())
        assert result["provenance"] == "empirical-bayes"
        assert result["n_evaluations"] > 1


@pytest.mark.slow
class TestEndToEnd:
    def _sparsify(self, tmp_path, n, seed=0):
        image = tmp_path / f"phantom{n}.csv"
        save_image(generate_phantom(shepp_logan_spec(n, n, seed=seed)), image)
        coeffs = tmp_path / f"coeffs{n}.csv"
        main(["sparsify", str(image), "--out", str(coeffs)])
        return coeffs

    def test_default_phantom_accuracy(self, tmp_path):
        for seed in (0, 1):
            stem = tmp_path / f"fit{seed}"
            main(["fit", str(self._sparsify(tmp_path, 64, seed)), "--out", str(stem)])
            result = json.loads(stem.with_suffix(".json").read_text())
            assert result["provenance"] == "empirical-bayes"
            assert result["abs_diff_percent"] <= 1.0

    def test_pipeline_replicates_accuracy(self):
        cfg = SimConfig(mode=SimMode.PIPELINE, n1=64, n2=64, replicates=2, base_seed=40, theta=None)
        for r in run_pipeline(cfg):
            assert abs(r.e_hat - r.s) * 100 / 4096 <= 1.0

    def test_full_size_fit_time(self, tmp_path):
        coeffs = self._sparsify(tmp_path, 128)
        t0 = time.perf_counter()
        main(["fit", str(coeffs), "--out", str(tmp_path / "big")])
        assert time.perf_counter() - t0 < 300.0
        result = json.loads((tmp_path / "big.json").read_text())
        assert result["n_pixels"] == 128 * 128


class TestSimulateAndDiagnose:
    def _config(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps({
            "mode": "generative", "n1": 16, "n2": 16, "replicates": 2, "base_seed": 11,
            "theta": {"kappa": 0.5, "sigma2_m": 1.0, "tau_iid": 10.0},
            "output_dir": str(tmp_path / "study"),
        }))
        return path

    def test_simulate_writes_directory(self, tmp_path):
        main(["simulate", str(self._config(tmp_path)), "--xlsx"])
        out = tmp_path / "study"
        for name in (REPLICATES_CSV, REPORT_JSON, QQ_CSV, BLOCK_CSV, FIELDS_NPY, "report.xlsx"):
            assert (out / name).exists()
        assert json.loads((out / REPORT_JSON).read_text())["n_replicates"] == 2

    def test_overrides(self, tmp_path):
        other = tmp_path / "other"
        main(["simulate", str(self._config(tmp_path)), "--out", str(other), "--seed", "40"])
        meta = json.loads((other / REPORT_JSON).read_text())
        assert meta["config"]["base_seed"] == 40

    def test_diagnose_round_trip(self, tmp_path):
        main(["simulate", str(self._config(tmp_path))])
        out = tmp_path / "study"
        before = (out / REPORT_JSON).read_bytes()
        main(["diagnose", str(out)])
        assert (out / REPORT_JSON).read_bytes() == before

    def test_phi_not_above_rho(self, tmp_path):
        main(["simulate", str(self._config(tmp_path))])
        assert _exit_code(["diagnose", str(tmp_path / "study"), "--phi", "2", "--rho-star", "2"]) == 2

    def test_bad_config(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps({"mode": "generative", "n1": 16}))
        assert _exit_code(["simulate", str(path)]) == 2

    def test_diagnose_missing_directory(self, tmp_path):
        assert _exit_code(["diagnose", str(tmp_path / "nowhere")]) == 2


class TestArgs:
    def test_parse_theta(self):
        theta = parse_theta("0.5,2,10")
        assert (theta.kappa, theta.sigma2_m, theta.tau_iid) == (0.5, 2.0, 10.0)

    def test_unknown_subcommand(self):
        assert _exit_code(["explode"]) == 2
