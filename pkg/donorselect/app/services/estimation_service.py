import logging
from typing import Optional, Sequence

import numpy as np

from donorselect.app.core.errors import PanelError
from donorselect.app.core.models import EffectEstimate, Panel, ScFit, SparsePriorConfig
from donorselect.app.core.regression import fit_ridge, fit_sparse_map

logger = logging.getLogger(__name__)

SC_RIDGE_LAMBDA = 1e-6
Z_95 = 1.96


def fit_sc(panel: Panel, donor_ids: Sequence[str], sparse: Optional[SparsePriorConfig] = None,
           ridge_lambda: float = SC_RIDGE_LAMBDA) -> ScFit:
    """Regress the target on the named donors over the pre-intervention period"""
    donor_ids = list(donor_ids)
    if not donor_ids:
        raise PanelError("fit_sc needs at least one donor")
    if panel.n_pre < 2:
        raise PanelError(f"fit_sc needs at least 2 pre-intervention points, got {panel.n_pre}")

    X = panel.subset(donor_ids).pre_donors.T
    y = panel.pre_target
    if sparse is not None:
        fit = fit_sparse_map(X, y, sparse)
    else:
        fit = fit_ridge(X, y, ridge_lambda)
    logger.debug(f"SC fit on {len(donor_ids)} donors (sparse={sparse is not None})")
    return ScFit(fit=fit, donor_ids=tuple(donor_ids), sparse=sparse is not None)


def estimate_effect(panel: Panel, sc: ScFit) -> EffectEstimate:
    """
    Counterfactual after the intervention, tau_hat as the mean post-period gap.

    The interval is tau_hat +- 1.96 sqrt(sigma^2 (1/n_post + mean post leverage)).
    Each time point also gets a pointwise band 1.96 sqrt(sigma^2 (1 + leverage)).
    """
    X = panel.subset(sc.donor_ids).donors.T
    synthetic = sc.fit.predict(X)
    leverage = sc.fit.leverage(X)
    sigma2 = sc.fit.residual_variance

    t_star = panel.intervention_time
    effects = panel.post_target - synthetic[t_star:]
    tau_hat = float(np.mean(effects))
    se = float(np.sqrt(sigma2 * (1.0 / panel.n_post + np.mean(leverage[t_star:]))))

    return EffectEstimate(
        tau_hat=tau_hat,
        interval_95=(tau_hat - Z_95 * se, tau_hat + Z_95 * se),
        times=panel.times,
        observed=panel.target,
        synthetic=synthetic,
        band_halfwidth=Z_95 * np.sqrt(sigma2 * (1.0 + leverage)),
        intervention_time=t_star,
    )
