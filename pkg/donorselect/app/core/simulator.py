import logging
from typing import Tuple

import numpy as np

from donorselect.app.core.errors import ConfigError, PanelError
from donorselect.app.core.models import Panel, SimConfig, SimTrace

logger = logging.getLogger(__name__)


def derive_seed(master: int, *keys: int) -> int:
    """Independent 64-bit seed for (master, keys); independent of scheduling"""
    if int(master) < 0 or any(int(k) < 0 for k in keys):
        raise ConfigError("seed", f"seeds must be non-negative, got {(master, *keys)}")
    state = np.random.SeedSequence([int(master), *(int(k) for k in keys)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def donor_labels(n_donors: int):
    width = max(4, len(str(n_donors - 1)))
    return tuple(f"x{i:0{width}d}" for i in range(n_donors))


def simulate(config: SimConfig) -> SimTrace:
    """
    Draw one panel from the latent local-linear-trend process.

        delta[t+1] ~ N(S + rho (delta[t] - S), sigma_delta)
        u[t+1]     ~ N(u[t] + delta[t], sigma_u)          (+ shift_mean on the shifted latent)
        y[t]       ~ N(alpha . u[t] + tau I[t], sigma_y)
        x_i[t]     ~ N(beta_i . u[t] + tau_x_i I[t], sigma_x)

    u starts at 0 and delta at S. The counterfactual target reuses the same
    noise draws with I forced to 0.
    """
    rng = np.random.default_rng(config.seed)
    M, N, T = config.n_latents, config.n_donors, config.n_times

    long_slope = rng.normal(config.slope_mean, config.slope_sd, M)
    rho = rng.uniform(0.0, 1.0, M)
    eps_delta = rng.standard_normal((M, T))
    eps_u = rng.standard_normal((M, T))
    eps_y = rng.standard_normal(T)
    eps_x = rng.standard_normal((N, T))
    invalid_idx = rng.choice(N, size=config.n_invalid, replace=False)

    invalid_mask = np.zeros(N, dtype=bool)
    invalid_mask[invalid_idx] = True
    valid_idx = np.flatnonzero(~invalid_mask)
    n_zeroed = int(round(config.zero_first_loading_fraction * len(valid_idx)))
    zeroed_idx = rng.choice(valid_idx, size=n_zeroed, replace=False) if n_zeroed else np.empty(0, dtype=int)

    shift = np.zeros((M, T))
    if config.latent_shift is not None:
        latent, mean, offset = config.latent_shift
        shift[latent, config.t_pre + offset:] = mean

    slopes = np.empty((M, T))
    latents = np.empty((M, T))
    slopes[:, 0] = long_slope
    latents[:, 0] = 0.0
    for t in range(1, T):
        slopes[:, t] = long_slope + rho * (slopes[:, t - 1] - long_slope) + config.sigma_delta * eps_delta[:, t]
        latents[:, t] = latents[:, t - 1] + slopes[:, t - 1] + shift[:, t] + config.sigma_u * eps_u[:, t]

    indicator = (np.arange(T) >= config.t_pre).astype(float)
    counterfactual = config.alpha @ latents + config.sigma_y * eps_y
    target = counterfactual + config.tau * indicator

    loadings = np.array(config.beta, dtype=float)
    loadings[zeroed_idx, 0] = 0.0
    spillover = np.where(invalid_mask, config.tau_spill, 0.0)
    donors = loadings @ latents + spillover[:, None] * indicator[None, :] + config.sigma_x * eps_x

    panel = Panel(
        times=np.arange(1, T + 1),
        target=target,
        donors=donors,
        donor_ids=donor_labels(N),
        intervention_time=config.t_pre,
    )
    logger.debug(f"Simulated seed={config.seed}: T={T}, N={N}, invalid={int(invalid_mask.sum())}")
    return SimTrace(
        panel=panel,
        latents=latents,
        slopes=slopes,
        invalid_mask=invalid_mask,
        true_tau=float(config.tau),
        true_counterfactual=counterfactual,
        loadings=loadings,
        spillover=spillover,
    )


def inject_synthetic_donor(panel: Panel, sigma: float, seed: int, donor_id: str = "synthetic") -> Tuple[Panel, str]:
    """Append a donor drawn N(y[t], sigma) at every t: a noisy proxy of the target"""
    if sigma < 0:
        raise PanelError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    proxy = panel.target + sigma * rng.standard_normal(panel.n_times)

    injected_id = donor_id
    suffix = 1
    while injected_id in panel.donor_ids or injected_id == panel.target_id:
        injected_id = f"{donor_id}_{suffix}"
        suffix += 1

    donors = np.vstack([panel.donors, proxy])
    return panel.with_donors(donors, panel.donor_ids + (injected_id,)), injected_id
