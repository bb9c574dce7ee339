"""Tests for simharness.py."""

import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from models import Hyperparams, InputError, ReplicateResult, SimMode
from simharness import (
    BLOCK_CSV,
    FIELDS_NPY,
    QQ_CSV,
    REPLICATES_CSV,
    REPORT_JSON,
    REPORT_XLSX,
    SimConfig,
    aggregate,
    baseline_sparsity,
    diagnose_directory,
    load_sim_config,
    run,
    run_generative,
    run_pipeline,
    run_replicate,
    simulate_indicator,
)

THETA = Hyperparams(kappa=0.5, sigma2_m=1.0, tau_iid=10.0)
THETA_DICT = {"kappa": 0.5, "sigma2_m": 1.0, "tau_iid": 10.0}


def _config(**overrides):
    base = dict(mode=SimMode.GENERATIVE, n1=12, n2=12, replicates=4, base_seed=7, theta=THETA)
    base.update(overrides)
    return SimConfig(**base)


class TestSimConfig:
    def test_from_dict(self):
        cfg = SimConfig.from_dict({
            "mode": "generative", "n1": 16, "n2": 16, "replicates": 3,
            "base_seed": 1, "theta": THETA_DICT, "rho_star": 2,
            "priors": {"mu_precision": 0.5},
        })
        assert cfg.mode == SimMode.GENERATIVE
        assert cfg.theta == THETA
        assert cfg.priors.mu_precision == 0.5
        assert cfg.generating_theta == THETA

    def test_missing_fields_named(self):
        with pytest.raises(InputError, match="replicates, base_seed"):
            SimConfig.from_dict({"mode": "generative", "n1": 16, "n2": 16, "theta": "fit"})

    def test_unknown_field(self):
        raw = {"mode": "generative", "n1": 16, "n2": 16, "replicates": 1, "base_seed": 0,
               "theta": THETA_DICT, "colour": "red"}
        with pytest.raises(InputError, match="colour"):
            SimConfig.from_dict(raw)

    def test_fit_needs_truth_in_generative_mode(self):
        raw = {"mode": "generative", "n1": 16, "n2": 16, "replicates": 1, "base_seed": 0,
               "theta": "fit"}
        with pytest.raises(InputError, match="true_theta"):
            SimConfig.from_dict(raw)
        cfg = SimConfig.from_dict(dict(raw, true_theta=THETA_DICT))
        assert cfg.theta is None
        assert cfg.generating_theta == THETA

    def test_pipeline_needs_dyadic_lattice(self):
        with pytest.raises(InputError):
            _config(mode=SimMode.PIPELINE, n1=12, n2=12)

    def test_bad_values(self):
        with pytest.raises(InputError):
            _config(replicates=0)
        with pytest.raises(InputError):
            _config(workers=0)
        with pytest.raises(InputError):
            SimConfig.from_dict({"mode": "nonsense", "n1": 16, "n2": 16, "replicates": 1,
                                 "base_seed": 0, "theta": THETA_DICT})
        with pytest.raises(InputError, match="integer"):
            SimConfig.from_dict({"mode": "generative", "n1": 16.5, "n2": 16, "replicates": 1,
                                 "base_seed": 0, "theta": THETA_DICT})

    def test_to_dict_round_trip(self):
        cfg = _config(phi=3, baseline_replicates=2)
        assert SimConfig.from_dict(cfg.to_dict()) == cfg

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(_config().to_dict()))
        assert load_sim_config(path) == _config()

    def test_load_errors(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            load_sim_config(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(InputError, match="Malformed"):
            load_sim_config(bad)


class TestReplicates:
    def test_simulate_indicator(self):
        o, p = simulate_indicator(_config(), 3)
        assert o.shape == (12, 12)
        assert set(np.unique(o)) <= {0, 1}
        assert np.all((p > 0) & (p < 1))
        o2, p2 = simulate_indicator(_config(), 3)
        assert np.array_equal(o, o2) and np.array_equal(p, p2)

    def test_replicate_seed(self):
        result = run_replicate(_config(), 2)
        assert result.seed == 9
        assert result.theta_hat == THETA
        assert 0 < result.e_hat < 144
        assert result.sum_p is not None
        assert result.p_mean.shape == (144,)

    def test_replicate_deterministic(self):
        assert run_replicate(_config(), 1) == run_replicate(_config(), 1)

    def test_order_independent(self):
        results = run_generative(_config())
        assert [r.index for r in results] == [0, 1, 2, 3]
        assert results[2] == run_replicate(_config(), 2)

    def test_workers_do_not_change_results(self):
        serial = run_generative(_config())
        parallel = run_generative(_config(workers=2))
        assert [r.e_hat for r in serial] == [r.e_hat for r in parallel]
        assert [r.s for r in serial] == [r.s for r in parallel]

    def test_baseline_seeds_follow_replicates(self):
        cfg = _config(baseline_replicates=2)
        o, _ = simulate_indicator(cfg, cfg.base_seed + cfg.replicates + 1)
        assert baseline_sparsity(cfg, 1) == int(o.sum())

    def test_wrong_runner(self):
        with pytest.raises(InputError):
            run_pipeline(_config())

    def test_pipeline_sparsity_varies(self):
        cfg = _config(mode=SimMode.PIPELINE, n1=32, n2=32, replicates=4)
        results = run_pipeline(cfg)
        assert len({r.s for r in results}) > 1
        assert all(r.threshold > 0 for r in results)
        assert all(r.sum_p is None for r in results)


class TestAggregate:
    def _results(self):
        return [
            ReplicateResult(index=1, seed=1, s=10, e_hat=12.0),
            ReplicateResult(index=0, seed=0, s=14, e_hat=13.0),
            ReplicateResult(index=2, seed=2, s=12, e_hat=11.0),
        ]

    def test_summary_values(self):
        report = aggregate(self._results(), 10, 10)
        assert report.n_replicates == 3
        assert report.e_sim == 12.0
        assert report.mean_e_hat == 12.0
        assert report.var_e_hat == pytest.approx(1.0)
        assert report.abs_diff_sim.tolist() == pytest.approx([1.0, 0.0, 1.0])
        assert report.abs_diff_s_mean == pytest.approx((1.0 + 2.0 + 1.0) / 3)
        assert report.bias_percent == 0.0
        assert report.normality is not None
        assert report.block_stats is None

    def test_baseline_enters_e_sim(self):
        report = aggregate(self._results(), 10, 10, baseline_s=(20, 20, 20))
        assert report.e_sim == pytest.approx((36 + 60) / 6)
        assert report.mean_s == 12.0
        assert report.baseline_s == (20, 20, 20)

    def test_constant_estimates_skip_normality(self):
        results = [ReplicateResult(index=k, seed=k, s=3, e_hat=3.0) for k in range(4)]
        assert aggregate(results, 5, 5).normality is None

    def test_empty(self):
        with pytest.raises(InputError):
            aggregate([], 5, 5)


class TestOutputDirectory:
    def test_run_writes_all_files(self, tmp_path):
        out = tmp_path / "study"
        cfg = _config(output_dir=str(out), xlsx=True)
        report = run(cfg)
        for name in (REPLICATES_CSV, REPORT_JSON, QQ_CSV, BLOCK_CSV, FIELDS_NPY, REPORT_XLSX):
            assert (out / name).exists()

        table = pd.read_csv(out / REPLICATES_CSV)
        assert table["index"].tolist() == [0, 1, 2, 3]
        assert table["seed"].tolist() == [7, 8, 9, 10]

        meta = json.loads((out / REPORT_JSON).read_text())
        assert meta["n_replicates"] == 4
        assert meta["e_sim"] == report.e_sim
        assert meta["config"]["base_seed"] == 7
        assert meta["block_stats"]["phi"] == 3
        assert np.load(out / FIELDS_NPY).shape == (4, 144)

    def test_outputs_reproducible(self, tmp_path):
        for name in ("a", "b"):
            run(_config(output_dir=str(tmp_path / name)))
        for name in (REPLICATES_CSV, REPORT_JSON, QQ_CSV, BLOCK_CSV):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_diagnose_is_idempotent(self, tmp_path):
        out = tmp_path / "study"
        original = run(_config(output_dir=str(out)))
        before = {name: (out / name).read_bytes() for name in (REPLICATES_CSV, REPORT_JSON, BLOCK_CSV)}

        report = diagnose_directory(out)
        assert report.e_sim == original.e_sim
        assert report.mean_e_hat == original.mean_e_hat
        for name, content in before.items():
            assert (out / name).read_bytes() == content

    def test_diagnose_new_partition(self, tmp_path):
        out = tmp_path / "study"
        run(_config(n1=24, n2=24, output_dir=str(out)))
        report = diagnose_directory(out, phi=2, rho_star=1, normality="dagostino-k2")
        assert report.partition.phi == 2
        assert report.partition.rho_star == 1
        meta = json.loads((out / REPORT_JSON).read_text())
        assert meta["block_stats"]["n_sq"] == report.partition.n_sq
        assert meta["config"]["phi"] == 2

    def test_diagnose_rejects_phi_not_above_rho(self, tmp_path):
        out = tmp_path / "study"
        run(_config(output_dir=str(out)))
        with pytest.raises(InputError):
            diagnose_directory(out, phi=2, rho_star=2)

    def test_diagnose_missing_files(self, tmp_path):
        with pytest.raises(InputError, match="missing"):
            diagnose_directory(tmp_path)

    def test_replace_keeps_validation(self):
        with pytest.raises(InputError):
            dataclasses.replace(_config(), workers=0)
