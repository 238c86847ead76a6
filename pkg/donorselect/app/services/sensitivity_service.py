import logging
from typing import Sequence, Tuple

import numpy as np

from donorselect.app.core.errors import ConfigError
from donorselect.app.core.models import Panel, ScFit, SensitivityReport

logger = logging.getLogger(__name__)

DEFAULT_TAU_SPILL_GRID = tuple(float(v) for v in np.linspace(0.0, 5.0, 21))


def mean_shifts(panel: Panel, donor_ids: Sequence[str]) -> np.ndarray:
    """|mean(pre) - mean(post)| of each named donor, in raw units"""
    if not len(donor_ids):
        return np.empty(0)
    idx = panel.donor_indices(list(donor_ids))
    return np.abs(panel.pre_donors[idx].mean(axis=1) - panel.post_donors[idx].mean(axis=1))


def _max_abs_weight(sc: ScFit) -> float:
    return float(np.max(np.abs(sc.fit.coefficients)))


def ov_bias_bound(panel: Panel, sc: ScFit) -> float:
    """Bias from unobserved donors no more important than the observed ones"""
    n = len(sc.donor_ids)
    return n * _max_abs_weight(sc) * float(np.max(mean_shifts(panel, sc.donor_ids)))


def fp_bias_bound(panel: Panel, sc: ScFit, excluded_ids: Sequence[str]) -> float:
    """Bias from valid donors wrongly excluded; 0 with nothing excluded"""
    if not len(excluded_ids):
        return 0.0
    n = len(sc.donor_ids)
    return n * _max_abs_weight(sc) * float(np.max(mean_shifts(panel, excluded_ids)))


def fn_bias_curve(sc: ScFit, tau_spill_grid: Sequence[float], tau_hat: float) -> Tuple[np.ndarray, float]:
    """
    Bias from invalid donors wrongly included, as a function of the spillover size.

    Returns the bound at every grid value and the spillover magnitude at which
    the bound reaches |tau_hat| (inf when every weight is zero).
    """
    grid = np.asarray(tau_spill_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigError("tau_spill_grid", "must be a non-empty list")
    if np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ConfigError("tau_spill_grid", "values must be finite and non-negative")
    slope = len(sc.donor_ids) * _max_abs_weight(sc)
    sign_flip = abs(tau_hat) / slope if slope > 0 else float("inf")
    return slope * grid, sign_flip


def sensitivity_report(panel: Panel, sc: ScFit, excluded_ids: Sequence[str], tau_hat: float,
                       tau_spill_grid: Sequence[float] = DEFAULT_TAU_SPILL_GRID) -> SensitivityReport:
    used = set(sc.donor_ids)
    excluded_ids = [d for d in excluded_ids if d not in used]
    grid = np.asarray(tau_spill_grid, dtype=float)
    fn_bounds, sign_flip = fn_bias_curve(sc, grid, tau_hat)
    n = len(sc.donor_ids)
    max_w = _max_abs_weight(sc)
    excluded_shift = float(np.max(mean_shifts(panel, excluded_ids))) if excluded_ids else 0.0

    report = SensitivityReport(
        ov_bound=ov_bias_bound(panel, sc),
        fp_bound=fp_bias_bound(panel, sc, excluded_ids),
        fn_bound=n * max_w,
        n_used=n,
        max_abs_weight=max_w,
        max_excluded_shift=excluded_shift,
        max_selected_shift=float(np.max(mean_shifts(panel, sc.donor_ids))),
        tau_spill_grid=grid,
        fn_bounds=fn_bounds,
        sign_flip_tau_spill=sign_flip,
        tau_hat=float(tau_hat),
    )
    logger.info(
        f"Sensitivity: OV {report.ov_bound:.4g}, FP {report.fp_bound:.4g}, "
        f"FN per unit spillover {report.fn_bound:.4g}, sign flip at {sign_flip:.4g}"
    )
    return report
