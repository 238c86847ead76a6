import logging
from typing import List, Sequence, Tuple

import numpy as np

from donorselect.app.core.errors import ProximalError
from donorselect.app.core.models import Panel, ProximalFit
from donorselect.app.core.regression import WEAK_INSTRUMENT_R2, fit_two_stage
from donorselect.app.services.estimation_service import SC_RIDGE_LAMBDA

logger = logging.getLogger(__name__)

MAX_VARIANCE_RATIO = 1e6


def _usable_instruments(Z: np.ndarray, ids: Sequence[str], max_variance_ratio: float) -> Tuple[List[int], List[str]]:
    """Indices of instruments to keep; constant or extreme-variance columns are dropped"""
    var = Z.var(axis=0, ddof=1)
    scale = np.maximum(np.abs(Z.mean(axis=0)), 1.0)
    degenerate = var <= (1e-12 * scale) ** 2
    keep = ~degenerate
    if np.any(keep):
        median = float(np.median(var[keep]))
        keep &= (var <= median * max_variance_ratio) & (var >= median / max_variance_ratio)
    dropped = [ids[j] for j in np.flatnonzero(~keep)]
    if dropped:
        logger.warning(f"Dropped {len(dropped)} instrument(s) with degenerate or extreme variance: {dropped[:5]}")
    return list(np.flatnonzero(keep)), dropped


def fit_proximal_sc(panel: Panel, selected_ids: Sequence[str], excluded_ids: Sequence[str],
                    stage1_lambda: float = 0.0, sc_lambda: float = SC_RIDGE_LAMBDA,
                    max_variance_ratio: float = MAX_VARIANCE_RATIO) -> ProximalFit:
    """
    Debias SC weights with the excluded donors as instruments.

    Only pre-intervention rows enter either stage; the post period is handled by
    estimate_effect on the selected donors.
    """
    selected_ids = list(selected_ids)
    excluded_ids = list(excluded_ids)
    if not selected_ids:
        raise ProximalError("no selected donors to debias")
    if not excluded_ids:
        raise ProximalError("no excluded donors to use as instruments; fall back to fit_sc")
    overlap = sorted(set(selected_ids) & set(excluded_ids))
    if overlap:
        raise ProximalError(f"selected and excluded donors overlap: {overlap[:5]}")
    if panel.n_pre < 2:
        raise ProximalError(f"debiasing needs at least 2 pre-intervention points, got {panel.n_pre}")

    X = panel.pre_donors[panel.donor_indices(selected_ids)].T
    Z = panel.pre_donors[panel.donor_indices(excluded_ids)].T
    keep, dropped = _usable_instruments(Z, excluded_ids, max_variance_ratio)
    if not keep:
        raise ProximalError("every excluded donor was dropped as an instrument; fall back to fit_sc")
    instruments = [excluded_ids[j] for j in keep]
    if stage1_lambda == 0 and len(instruments) >= panel.n_pre - 1:
        raise ProximalError(
            f"{len(instruments)} instruments on {panel.n_pre} pre-intervention rows; "
            f"cap the instrument set or use a positive stage-1 lambda"
        )

    fit = fit_two_stage(panel.pre_target, X, Z[:, keep], stage1_lambda=stage1_lambda, stage2_lambda=sc_lambda)
    weak = bool(np.any(fit.stage1_r2 < WEAK_INSTRUMENT_R2))
    logger.info(
        f"Two-stage SC: {len(selected_ids)} donors, {len(instruments)} instruments, "
        f"min stage-1 R^2 {float(np.min(fit.stage1_r2)):.3f}"
    )
    return ProximalFit(
        sc_fit=fit,
        stage1_r2=fit.stage1_r2,
        selected_ids=tuple(selected_ids),
        excluded_ids=tuple(instruments),
        weak_instrument_flag=weak,
        dropped_ids=tuple(dropped),
    )
