import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from donorselect.app.core.errors import ConfigError, EmptySelectionError
from donorselect.app.core.models import ExperimentConfig, SelectionConfig, SimConfig, SparsePriorConfig
from donorselect.app.core.simulator import simulate
from donorselect.app.services import experiment_service
from donorselect.app.services.experiment_service import (
    procedure_pool,
    run_experiment,
    run_latent_shift_study,
    run_semi_synthetic,
    summarize,
)

SMALL_SIM = SimConfig(n_donors=60, t_pre=40, t_post=10)


def _small_experiment(**overrides):
    settings = dict(sim=SMALL_SIM, replicates=4, master_seed=5)
    settings.update(overrides)
    return ExperimentConfig(**settings)


def test_summarize_skips_failures():
    results = [
        {"All": 1.0, "Valid": None},
        {"All": 3.0, "Valid": 0.5},
        {"All": 2.0, "Valid": None},
    ]
    summary = summarize(results, ["All", "Valid"], label="demo")
    assert summary.replicates == 3
    assert summary.label == "demo"
    assert summary["All"].mean_bias == pytest.approx(2.0)
    assert summary["All"].ci_half_width == pytest.approx(1.96 / math.sqrt(3))
    assert summary["All"].failure_count == 0
    assert summary["Valid"].mean_bias == pytest.approx(0.5)
    assert summary["Valid"].failure_count == 2
    assert summary["Valid"].mc_ci95 == (0.5, 0.5)


def test_summarize_all_failures_is_nan():
    summary = summarize([{"S2": None}, {"S2": None}], ["S2"])
    assert math.isnan(summary["S2"].mean_bias)
    assert summary["S2"].failure_count == 2


def test_procedure_pools():
    trace = simulate(SMALL_SIM)
    selection = SelectionConfig(s1_count=15)
    pool, excluded = procedure_pool(trace, "All", selection)
    assert pool == list(trace.panel.donor_ids) and excluded == []
    pool, excluded = procedure_pool(trace, "Valid", selection)
    assert pool == trace.valid_ids and excluded == []
    pool, excluded = procedure_pool(trace, "S1", selection)
    assert len(pool) == 15 and len(excluded) == 45


def test_results_do_not_depend_on_worker_count():
    serial = run_experiment(_small_experiment(jobs=1))
    again = run_experiment(_small_experiment(jobs=1))
    parallel = run_experiment(_small_experiment(jobs=2))
    for procedure in serial.procedures:
        assert_array_equal(serial[procedure].replicate_biases, again[procedure].replicate_biases)
        assert_allclose(parallel[procedure].replicate_biases, serial[procedure].replicate_biases,
                        rtol=1e-10, atol=1e-12)
        assert parallel[procedure].failure_count == serial[procedure].failure_count


def test_spillover_biases_all_but_not_valid():
    config = ExperimentConfig(sim=SimConfig(n_donors=100), replicates=20, procedures=("All", "Valid"), master_seed=1)
    summary = run_experiment(config)
    assert 1.2 <= summary["All"].mean_bias <= 2.0
    assert abs(summary["Valid"].mean_bias) < 0.2
    assert abs(summary["Valid"].mean_bias) <= abs(summary["All"].mean_bias)


def test_debiased_experiment_runs():
    summary = run_experiment(_small_experiment(procedures=("All", "S1"), debias=True, instrument_cap=10))
    assert summary["All"].failure_count == 0
    assert np.all(np.isfinite(summary["All"].replicate_biases))


def test_null_latent_shift_matches_unshifted_run():
    config = _small_experiment(procedures=("All", "Valid"))
    base = run_experiment(replace(config, sim=replace(SMALL_SIM, zero_first_loading_fraction=0.5)))
    studies = run_latent_shift_study(config, 0.0, [0, 5], zero_first_loading_fraction=0.5)
    for offset in (0, 5):
        for procedure in ("All", "Valid"):
            assert_array_equal(studies[offset][procedure].replicate_biases, base[procedure].replicate_biases)


def test_latent_shift_rejects_negative_offsets():
    with pytest.raises(ConfigError, match="shift_offsets"):
        run_latent_shift_study(_small_experiment(), 0.5, [-1])


def test_empty_selections_are_counted_not_fatal(monkeypatch):
    def empty(panel, config):
        raise EmptySelectionError(None)

    monkeypatch.setattr(experiment_service, "select_donors", empty)
    summary = run_experiment(_small_experiment(procedures=("S1", "All")))
    assert summary["S1"].failure_count == 4
    assert math.isnan(summary["S1"].mean_bias)
    assert summary["All"].failure_count == 0


def _semi_synthetic_panel():
    config = SimConfig(
        n_latents=1, n_donors=8, invalid_fraction=0.0, sigma_u=0.1, tau=5.0,
        sigma_x=0.01, t_pre=40, t_post=10, seed=3,
    )
    return simulate(config).panel


def test_injected_donor_is_flagged_and_attenuates_naive_estimate():
    panel = _semi_synthetic_panel()
    report = run_semi_synthetic(panel, 0.01, SelectionConfig(procedure="S1", s1_count=5), seeds=[0, 1, 2])
    assert len(report.records) == 3
    assert report.flag_rate == 1.0
    assert report.attenuation_rate == 1.0
    for record in report.records:
        assert record.injected_weight > 0.5
        assert record.tau_selected == pytest.approx(5.0, abs=0.5)


def test_exact_copy_absorbs_the_effect():
    panel = _semi_synthetic_panel()
    report = run_semi_synthetic(panel, 0.0, SelectionConfig(procedure="S1", s1_count=5), seeds=[0])
    assert abs(report.records[0].tau_naive) < 0.01


def test_progress_is_logged_per_replicate(caplog):
    caplog.set_level(logging.INFO, logger="donorselect")
    run_experiment(_small_experiment(procedures=("All",)))
    progress = [r.getMessage() for r in caplog.records if "replicates done" in r.getMessage()]
    assert len(progress) == 4
    assert progress[-1].startswith("4/4 replicates done")


def test_selection_removes_spillover_bias_when_spillover_dominates():
    sim = SimConfig(n_donors=100, sigma_u=0.01, sigma_delta=0.01)
    summary = run_experiment(ExperimentConfig(sim=sim, replicates=10, procedures=("All", "S1", "S2"), master_seed=2))
    assert summary["All"].mean_bias > 1.0
    assert abs(summary["S1"].mean_bias) < 0.3
    assert abs(summary["S2"].mean_bias) < 0.3


def test_sparse_and_sampled_all_agree():
    sim = SimConfig(n_donors=100, sigma_u=0.01, sigma_delta=0.01)
    sampled = run_experiment(ExperimentConfig(sim=sim, replicates=12, procedures=("All",), master_seed=4))
    sparse = run_experiment(ExperimentConfig(sim=sim, replicates=12, procedures=("All",), master_seed=4,
                                             sparse=SparsePriorConfig()))
    gap = abs(sparse["All"].mean_bias - sampled["All"].mean_bias)
    assert gap <= sparse["All"].ci_half_width + sampled["All"].ci_half_width + 0.3
    assert sparse["All"].mean_bias > 0.5


@pytest.mark.slow
def test_early_shift_misleads_s1_more_than_late_shift():
    config = ExperimentConfig(sim=SimConfig(n_donors=300), replicates=40, procedures=("S1", "Valid"), master_seed=0)
    studies = run_latent_shift_study(config, 0.5, [0, 3], zero_first_loading_fraction=0.5)
    assert studies[0]["S1"].mean_bias > studies[3]["S1"].mean_bias


def test_semi_synthetic_counts_skipped_seeds(monkeypatch):
    def empty(panel, config):
        raise EmptySelectionError(None)

    monkeypatch.setattr(experiment_service, "select_donors", empty)
    report = run_semi_synthetic(_semi_synthetic_panel(), 0.01, SelectionConfig(procedure="S1", s1_count=5),
                                seeds=[0, 1, 2])
    assert report.records == ()
    assert report.skipped_seeds == (0, 1, 2)
    assert report.failure_count == 3
    assert math.isnan(report.flag_rate)
