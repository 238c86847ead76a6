import logging
from dataclasses import replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import expit

from donorselect.app.core.errors import ConfigError, NumericalError
from donorselect.app.core.models import PredictionInterval, RegressionFit, SparsePriorConfig

logger = logging.getLogger(__name__)

WEAK_INSTRUMENT_R2 = 0.05


def _as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise NumericalError("design must be a 2-D matrix")
    return X


def _check_inputs(X: np.ndarray, Y: np.ndarray, lam: float):
    if X.shape[0] < 2:
        raise NumericalError(f"need at least 2 rows, got {X.shape[0]}")
    if Y.shape[0] != X.shape[0]:
        raise NumericalError(f"row mismatch: design has {X.shape[0]}, response has {Y.shape[0]}")
    if lam < 0:
        raise ConfigError("ridge_lambda", f"must be non-negative, got {lam}")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(Y)):
        raise NumericalError("non-finite values in regression input")


def _thin_svd(Xc: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of the centred design restricted to numerically non-zero singular values"""
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        keep = np.zeros_like(s, dtype=bool)
    else:
        keep = s > s[0] * max(Xc.shape) * np.finfo(float).eps
    return U[:, keep], s[keep], Vt[keep].T


def fit_ridge_multi(X, Y, lam: float) -> List[RegressionFit]:
    """Ridge fits of every column of Y on one shared design, with an unpenalised intercept"""
    X = _as_design(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    _check_inputs(X, Y, lam)
    n, p = X.shape

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    U, s, V = _thin_svd(Xc)
    if lam == 0 and s.size < p:
        raise NumericalError(f"rank-deficient design ({s.size} < {p}) at lambda=0")

    UtY = U.T @ Yc
    if lam == 0:
        shrink = np.ones_like(s)
        coefs = V @ (UtY / s[:, None])
        penalty = np.zeros(p)
        singular = s
    else:
        shrink = s ** 2 / (s ** 2 + lam)
        coefs = V @ ((s / (s ** 2 + lam))[:, None] * UtY)
        penalty = np.full(p, float(lam))
        singular = s / np.sqrt(lam)

    resid = Yc - Xc @ coefs
    rss = np.sum(resid ** 2, axis=0)
    dof = float(np.sum(shrink)) + 1.0
    resid_var = rss / max(1.0, n - dof)
    intercepts = y_mean - x_mean @ coefs

    return [
        RegressionFit(
            intercept=float(intercepts[j]),
            coefficients=coefs[:, j].copy(),
            residual_variance=float(resid_var[j]),
            ridge_lambda=float(lam),
            n_train=n,
            design_dim=p,
            x_mean=x_mean,
            penalty=penalty,
            basis=V,
            singular=singular,
        )
        for j in range(Y.shape[1])
    ]


def fit_ridge(X, y, lam: float) -> RegressionFit:
    """min ||y - a - X b||^2 + lam ||b||^2"""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise NumericalError("response must be a vector")
    return fit_ridge_multi(X, y, lam)[0]


def select_ridge_lambda(X, Y, grid: Sequence[float]) -> Tuple[float, Dict[float, float]]:
    """
    Pick one ridge penalty for all columns of Y by closed-form leave-one-out.

    The pooled score is the mean squared LOO residual e_i / (1 - h_ii) over rows
    and targets; h includes the 1/n intercept term. Ties go to the smaller lambda.
    """
    X = _as_design(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    _check_inputs(X, Y, 0.0)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    U, s, _ = _thin_svd(Xc)
    UtY = U.T @ Yc
    U2 = U ** 2

    scores = {}
    for lam in sorted(float(v) for v in grid):
        shrink = s ** 2 / (s ** 2 + lam)
        resid = Yc - U @ (shrink[:, None] * UtY)
        denom = 1.0 - (1.0 / n + U2 @ shrink)
        if np.any(denom <= 1e-12):
            scores[lam] = np.inf
            continue
        scores[lam] = float(np.mean((resid / denom[:, None]) ** 2))
    best = min(scores, key=lambda lam: (scores[lam], lam))
    if not np.isfinite(scores[best]):
        raise NumericalError("leave-one-out score undefined for every lambda in the grid")
    logger.debug(f"LOO scores: {scores}")
    return best, scores


def interval_half_width(fit: RegressionFit, leverage, level: float):
    if not 0.0 < level < 1.0:
        raise ConfigError("level", f"must lie in (0, 1), got {level}")
    z = stats.norm.ppf(0.5 * (1.0 + level))
    return z * np.sqrt(fit.residual_variance * (1.0 + np.asarray(leverage)))


def predict_interval(fit: RegressionFit, x_new, level: float) -> PredictionInterval:
    """Gaussian prediction interval center +- z sqrt(sigma^2 (1 + leverage))"""
    x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
    half = float(interval_half_width(fit, fit.leverage(x_new)[0], level))
    center = float(fit.predict(x_new)[0])
    return PredictionInterval(center=center, lower=center - half, upper=center + half, level=level)


def _mixture_log_prior(beta: np.ndarray, eta: float, narrow: float, wide: float):
    log_a = np.log(eta) + stats.norm.logpdf(beta, scale=narrow)
    log_b = np.log1p(-eta) + stats.norm.logpdf(beta, scale=wide)
    return log_a, log_b


def _log_posterior(rss: float, sigma2: float, n: int, beta: np.ndarray, eta: float, narrow: float, wide: float) -> float:
    sigma = np.sqrt(sigma2)
    log_a, log_b = _mixture_log_prior(beta, eta, narrow * sigma, wide * sigma)
    loglik = -0.5 * n * np.log(2 * np.pi * sigma2) - 0.5 * rss / sigma2
    return float(loglik + np.sum(np.logaddexp(log_a, log_b)))


def _weighted_ridge(Xc, yc, gram, penalty) -> np.ndarray:
    """Solve (Xc'Xc + diag(penalty)) b = Xc'yc, in the n x n form when p > n"""
    n, p = Xc.shape
    if p <= n:
        return np.linalg.solve(gram + np.diag(penalty), Xc.T @ yc)
    w = 1.0 / penalty
    K = (Xc * w) @ Xc.T + np.eye(n)
    return w * (Xc.T @ np.linalg.solve(K, yc))


def fit_sparse_map(X, y, prior: SparsePriorConfig) -> RegressionFit:
    """
    MAP fit under the two-component normal mixture prior on each coefficient.

    Both prior scales are relative to the noise sd, so coefficient i has prior
    sd sigma * sigma_narrow or sigma * sigma_wide. EM: the E-step gives each
    coefficient its responsibility for the narrow component, the M-step solves
    the resulting per-coefficient ridge problem and then updates the noise
    variance as (RSS + sum d_i b_i^2) / (n + p), which stays bounded away from
    zero when p > n. The narrow scale is annealed from close to sigma_wide down
    to sigma_narrow, warm-starting each rung; the log posterior of the final
    rung is kept in log_posterior_trace. The reported residual variance is
    RSS / (n - dof) with the effective degrees of freedom of the final fit.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    _check_inputs(X, y, 0.0)
    n, p = X.shape
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc if p <= n else None

    floor = 1e-12 * max(float(np.var(y)), 1.0)
    sigma2 = max(float(np.var(yc)), floor)
    beta = _weighted_ridge(Xc, yc, gram, np.full(p, 1.0 / prior.sigma_wide ** 2))

    if prior.anneal_steps > 1:
        start = max(prior.sigma_narrow, 0.5 * prior.sigma_wide)
        ladder = np.geomspace(start, prior.sigma_narrow, prior.anneal_steps)
    else:
        ladder = np.array([prior.sigma_narrow])
    trace: List[float] = []
    converged = False
    penalty = np.full(p, 1.0 / prior.sigma_wide ** 2)
    rss = float(np.sum((yc - Xc @ beta) ** 2))

    for rung, narrow in enumerate(ladder):
        final = rung == len(ladder) - 1
        rss = float(np.sum((yc - Xc @ beta) ** 2))
        if final:
            trace.append(_log_posterior(rss, sigma2, n, beta, prior.eta, narrow, prior.sigma_wide))
        converged = False
        for it in range(prior.max_iters):
            sigma = np.sqrt(sigma2)
            log_a, log_b = _mixture_log_prior(beta, prior.eta, narrow * sigma, prior.sigma_wide * sigma)
            resp = expit(log_a - log_b)
            penalty = resp / narrow ** 2 + (1.0 - resp) / prior.sigma_wide ** 2
            new_beta = _weighted_ridge(Xc, yc, gram, penalty)
            rss = float(np.sum((yc - Xc @ new_beta) ** 2))
            sigma2 = max((rss + float(np.sum(penalty * new_beta ** 2))) / (n + p), floor)
            change = float(np.max(np.abs(new_beta - beta))) if p else 0.0
            beta = new_beta
            if final:
                trace.append(_log_posterior(rss, sigma2, n, beta, prior.eta, narrow, prior.sigma_wide))
                logger.debug(f"EM iteration {it}: log posterior {trace[-1]:.6f}")
            if change < prior.tol:
                converged = True
                break

    warnings: Tuple[str, ...] = ()
    if not converged:
        msg = f"sparse EM did not converge within {prior.max_iters} iterations"
        logger.warning(msg)
        warnings = (msg,)

    penalty = np.maximum(penalty, np.finfo(float).tiny)
    _, s, V = _thin_svd(Xc / np.sqrt(penalty))
    dof = float(np.sum(s ** 2 / (s ** 2 + 1.0))) + 1.0
    residual_variance = max(rss / max(n - dof, 1.0), floor)
    return RegressionFit(
        intercept=float(y_mean - x_mean @ beta),
        coefficients=beta,
        residual_variance=residual_variance,
        ridge_lambda=0.0,
        n_train=n,
        design_dim=p,
        x_mean=x_mean,
        penalty=penalty,
        basis=V,
        singular=s,
        converged=converged,
        warnings=warnings,
        log_posterior_trace=tuple(trace),
    )


def fit_two_stage(y, X, Z, stage1_lambda: float = 0.0, stage2_lambda: float = 0.0) -> RegressionFit:
    """
    Regress each column of X on Z, then y on the fitted X.

    The returned residual variance uses the observed X, the coefficients the
    fitted one. stage1_r2 holds the in-sample R^2 of every first-stage fit.
    """
    y = np.asarray(y, dtype=float)
    X = _as_design(X)
    Z = _as_design(Z)
    n = len(y)
    if n < 2:
        raise NumericalError("two-stage fit needs at least 2 rows")
    if X.shape[0] != n or Z.shape[0] != n:
        raise NumericalError("y, X and Z must share rows")
    if Z.shape[1] < 1:
        raise NumericalError("need at least one instrument")
    if np.all(np.ptp(Z, axis=0) == 0):
        raise NumericalError("stage-1 degenerate: every instrument is constant")

    stage1 = fit_ridge_multi(Z, X, stage1_lambda)
    X_hat = np.column_stack([f.predict(Z) for f in stage1])
    tss = np.sum((X - X.mean(axis=0)) ** 2, axis=0)
    rss = np.sum((X - X_hat) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(tss > 0, 1.0 - rss / tss, 0.0)
    r2 = np.clip(r2, 0.0, 1.0)

    fit = fit_ridge(X_hat, y, stage2_lambda)
    dof = float(np.sum(fit.singular ** 2 / (fit.singular ** 2 + 1.0))) if np.any(fit.penalty) else float(fit.singular.size)
    resid = y - fit.predict(X)
    resid_var = float(np.sum(resid ** 2) / max(1.0, n - dof - 1.0))

    warnings = fit.warnings
    if np.any(r2 < WEAK_INSTRUMENT_R2):
        msg = f"weak instruments: stage-1 R^2 below {WEAK_INSTRUMENT_R2} for {int(np.sum(r2 < WEAK_INSTRUMENT_R2))} column(s)"
        logger.warning(msg)
        warnings = warnings + (msg,)
    return replace(fit, residual_variance=resid_var, stage1_r2=r2, warnings=warnings)
