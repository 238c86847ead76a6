import pytest

from donorselect.app.core.models import ExperimentConfig
from donorselect.app.services.experiment_service import run_experiment


@pytest.mark.slow
def test_default_study_bias():
    """Default generating process, 200 replicates, sampling 10 donors"""
    summary = run_experiment(ExperimentConfig(procedures=("All", "Valid"), jobs=-1))
    assert 1.45 <= summary["All"].mean_bias <= 1.75
    assert abs(summary["Valid"].mean_bias) < 0.1
    assert abs(summary["Valid"].mean_bias) <= abs(summary["All"].mean_bias)
    assert summary["All"].failure_count == 0
