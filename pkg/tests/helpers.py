import numpy as np

from donorselect.app.core.models import Panel, RegressionFit, ScFit


def make_panel(target, donors, n_pre, donor_ids=None, start=1):
    donors = np.atleast_2d(np.asarray(donors, dtype=float))
    if donor_ids is None:
        donor_ids = [f"d{i}" for i in range(donors.shape[0])]
    n_times = donors.shape[1]
    return Panel(
        times=np.arange(start, start + n_times),
        target=np.asarray(target, dtype=float),
        donors=donors,
        donor_ids=tuple(donor_ids),
        intervention_time=n_pre,
    )


def make_sc(coefficients, donor_ids=None, intercept=0.0):
    """ScFit with the given weights and no training data behind it"""
    coefficients = np.asarray(coefficients, dtype=float)
    p = len(coefficients)
    if donor_ids is None:
        donor_ids = [f"d{i}" for i in range(p)]
    fit = RegressionFit(
        intercept=intercept,
        coefficients=coefficients,
        residual_variance=0.0,
        ridge_lambda=0.0,
        n_train=max(p, 1),
        design_dim=p,
        x_mean=np.zeros(p),
        penalty=np.zeros(p),
        basis=np.eye(p),
        singular=np.ones(p),
    )
    return ScFit(fit=fit, donor_ids=tuple(donor_ids))
