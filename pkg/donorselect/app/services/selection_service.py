import logging
from dataclasses import replace
from typing import List, Sequence, Tuple

import numpy as np

from donorselect.app.core.errors import ConfigError, EmptySelectionError, PanelError
from donorselect.app.core.models import (
    DonorForecast,
    Panel,
    PredictionInterval,
    SelectionConfig,
    SelectionReport,
)
from donorselect.app.core.panel import normalize, time_average
from donorselect.app.core.regression import (
    fit_ridge,
    fit_ridge_multi,
    interval_half_width,
    predict_interval,
    select_ridge_lambda,
)

logger = logging.getLogger(__name__)


def lagged_design(panel: Panel) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    One-step-ahead training pairs x[t'-1] -> x[t'] for pre-intervention t' >= 1,
    plus the test row x[t*-1] and the labels x[t*].
    """
    if panel.n_pre < 3:
        raise PanelError(f"forecasting needs at least 3 pre-intervention points, got {panel.n_pre}")
    D = panel.donors
    n_pre = panel.n_pre
    X_train = D[:, : n_pre - 1].T
    Y_train = D[:, 1:n_pre].T
    return X_train, Y_train, D[:, n_pre - 1], D[:, n_pre]


def prepare_panel(panel: Panel, config: SelectionConfig) -> Panel:
    """Averaged (if configured), cut after the first post point, normalised"""
    working = panel
    if config.time_average_bucket:
        working = time_average(working, config.time_average_bucket)
    working = working.truncate(working.n_pre + 1)
    working, _ = normalize(working)
    return working


def _shared_lambda(X: np.ndarray, Y: np.ndarray, config: SelectionConfig) -> float:
    if config.ridge_lambda is not None:
        return float(config.ridge_lambda)
    lam, _ = select_ridge_lambda(X, Y, config.lambda_grid)
    logger.info(f"Forecast ridge lambda chosen by LOO: {lam:g}")
    return lam


def forecast_donor(panel: Panel, donor_index: int, config: SelectionConfig) -> Tuple[float, PredictionInterval, float]:
    """Forecast donor i at the intervention from every donor one step earlier (normalised panel)"""
    X, Y, x_test, y_test = lagged_design(panel)
    lam = _shared_lambda(X, Y, config)
    fit = fit_ridge(X, Y[:, donor_index], lam)
    interval = predict_interval(fit, x_test, config.ppi_level)
    return interval.center, interval, float(y_test[donor_index])


def forecast_all(panel: Panel, config: SelectionConfig) -> Tuple[List[DonorForecast], float]:
    """Forecasts of every donor on the prepared panel, sharing one design and lambda"""
    working = prepare_panel(panel, config)
    X, Y, x_test, y_test = lagged_design(working)
    lam = _shared_lambda(X, Y, config)
    fits = fit_ridge_multi(X, Y, lam)

    # one design, one leverage; only the residual variances differ
    leverage = fits[0].leverage(x_test)[0]
    predicted = np.array([f.intercept for f in fits]) + x_test @ np.column_stack([f.coefficients for f in fits])
    halves = [float(interval_half_width(f, leverage, config.ppi_level)) for f in fits]

    forecasts = []
    for i, donor_id in enumerate(working.donor_ids):
        center = float(predicted[i])
        interval = PredictionInterval(
            center=center,
            lower=center - halves[i],
            upper=center + halves[i],
            level=config.ppi_level,
        )
        actual = float(y_test[i])
        forecasts.append(DonorForecast(
            donor_id=donor_id,
            predicted=center,
            actual=actual,
            abs_error=abs(actual - center),
            interval=interval,
            flagged=interval.excludes(actual),
        ))
    return forecasts, lam


def build_report(forecasts: Sequence[DonorForecast], config: SelectionConfig, ridge_lambda: float) -> SelectionReport:
    """Apply S1 (k smallest errors) or S2 (inside the interval) to a set of forecasts"""
    ids = [f.donor_id for f in forecasts]
    if config.procedure == "S1":
        ranked = sorted(range(len(forecasts)), key=lambda i: (forecasts[i].abs_error, ids[i]))
        chosen = set(ranked[: min(config.s1_count, len(forecasts))])
    else:
        chosen = {i for i, f in enumerate(forecasts) if not f.flagged}

    report = SelectionReport(
        procedure=config.procedure,
        forecasts=tuple(forecasts),
        pvd_ids=tuple(ids[i] for i in range(len(ids)) if i in chosen),
        excluded_ids=tuple(ids[i] for i in range(len(ids)) if i not in chosen),
        ridge_lambda=ridge_lambda,
        ppi_level=config.ppi_level,
        time_average_bucket=config.time_average_bucket,
    )
    if report.is_empty:
        logger.warning(f"{config.procedure} flagged every one of {len(ids)} donors")
        raise EmptySelectionError(report)
    logger.info(f"{config.procedure}: {len(report.pvd_ids)}/{len(ids)} potentially valid donors")
    return report


def select_donors(panel: Panel, config: SelectionConfig) -> SelectionReport:
    forecasts, lam = forecast_all(panel, config)
    return build_report(forecasts, config, lam)


def sample_ids(ids: Sequence[str], k: int, seed: int) -> List[str]:
    """Uniform sample of min(k, len(ids)) ids without replacement, in their original order"""
    if k < 1:
        raise ConfigError("k", "must be at least 1")
    ids = list(ids)
    if not ids:
        raise PanelError("nothing to sample from")
    if k >= len(ids):
        return ids
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(ids), size=k, replace=False))
    return [ids[i] for i in picked]


def sample_pvds(report: SelectionReport, k: int, seed: int) -> List[str]:
    if report.is_empty:
        raise EmptySelectionError(report)
    return sample_ids(report.pvd_ids, k, seed)


def with_procedure(config: SelectionConfig, procedure: str) -> SelectionConfig:
    return replace(config, procedure=procedure)
