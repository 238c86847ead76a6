from dataclasses import dataclass, field, fields, asdict, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from donorselect.app.core.errors import ConfigError, NumericalError, PanelError

PROCEDURES = ("All", "Valid", "S1", "S2")
SELECTION_PROCEDURES = ("S1", "S2")
DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-3, 3, 13))


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _reject_unknown(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], f"unknown field for {cls.__name__}")


@dataclass(frozen=True, eq=False)
class Panel:
    """Target series, donor matrix (donor, time) and first post-intervention position"""
    times: np.ndarray
    target: np.ndarray
    donors: np.ndarray
    donor_ids: Tuple[str, ...]
    intervention_time: int
    target_id: str = "target"

    def __post_init__(self):
        times = _frozen_array(self.times, dtype=np.int64)
        target = _frozen_array(self.target)
        donors = _frozen_array(self.donors)
        donor_ids = tuple(str(d) for d in self.donor_ids)

        if times.ndim != 1 or target.ndim != 1:
            raise PanelError("times and target must be one-dimensional")
        if donors.ndim != 2:
            raise PanelError("donors must be a (donor, time) matrix")
        n_times = len(times)
        if len(target) != n_times or donors.shape[1] != n_times:
            raise PanelError(
                f"length mismatch: times={n_times}, target={len(target)}, donors={donors.shape[1]}"
            )
        if donors.shape[0] < 1:
            raise PanelError("panel needs at least one donor")
        if len(donor_ids) != donors.shape[0]:
            raise PanelError(f"{len(donor_ids)} donor ids for {donors.shape[0]} donor series")
        if len(set(donor_ids)) != len(donor_ids):
            raise PanelError("donor ids must be unique")
        if donor_ids and self.target_id in donor_ids:
            raise PanelError(f"target id '{self.target_id}' clashes with a donor id")
        if n_times > 1 and np.any(np.diff(times) <= 0):
            raise PanelError("times must be strictly increasing")
        t_star = int(self.intervention_time)
        if not 1 <= t_star <= n_times - 1:
            raise PanelError(
                f"intervention_time={t_star} leaves no pre- or post-intervention data (T={n_times})"
            )
        if not np.all(np.isfinite(target)) or not np.all(np.isfinite(donors)):
            raise PanelError("panel contains non-finite values")

        object.__setattr__(self, "times", times)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "donors", donors)
        object.__setattr__(self, "donor_ids", donor_ids)
        object.__setattr__(self, "intervention_time", t_star)

    @property
    def n_donors(self) -> int:
        return self.donors.shape[0]

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_pre(self) -> int:
        return self.intervention_time

    @property
    def n_post(self) -> int:
        return self.n_times - self.intervention_time

    @property
    def intervention_value(self) -> int:
        """Time label of the first post-intervention point"""
        return int(self.times[self.intervention_time])

    @property
    def indicator(self) -> np.ndarray:
        """I^t: 0 before the intervention, 1 from it onwards"""
        return (np.arange(self.n_times) >= self.intervention_time).astype(float)

    @property
    def pre_target(self) -> np.ndarray:
        return self.target[: self.intervention_time]

    @property
    def post_target(self) -> np.ndarray:
        return self.target[self.intervention_time:]

    @property
    def pre_donors(self) -> np.ndarray:
        return self.donors[:, : self.intervention_time]

    @property
    def post_donors(self) -> np.ndarray:
        return self.donors[:, self.intervention_time:]

    def donor_indices(self, donor_ids: Sequence[str]) -> np.ndarray:
        lookup = {d: i for i, d in enumerate(self.donor_ids)}
        missing = [d for d in donor_ids if d not in lookup]
        if missing:
            raise PanelError(f"donors not present in panel: {missing[:5]}")
        return np.array([lookup[d] for d in donor_ids], dtype=int)

    def subset(self, donor_ids: Sequence[str]) -> "Panel":
        idx = self.donor_indices(donor_ids)
        return replace(self, donors=self.donors[idx], donor_ids=tuple(donor_ids))

    def truncate(self, n_times: int) -> "Panel":
        """Keep the first n_times points"""
        return replace(
            self,
            times=self.times[:n_times],
            target=self.target[:n_times],
            donors=self.donors[:, :n_times],
        )

    def with_target(self, target: np.ndarray) -> "Panel":
        return replace(self, target=target)

    def with_donors(self, donors: np.ndarray, donor_ids: Sequence[str]) -> "Panel":
        return replace(self, donors=donors, donor_ids=tuple(donor_ids))


@dataclass(frozen=True, eq=False)
class NormalizationParams:
    """Per-donor pre-intervention mean and sample std"""
    donor_ids: Tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    lower: float
    upper: float
    level: float

    @property
    def half_width(self) -> float:
        return self.upper - self.center

    def excludes(self, value: float) -> bool:
        return value < self.lower or value > self.upper


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """
    Linear-Gaussian fit y = intercept + X @ coefficients + noise.

    The penalised Gram matrix A = Xc'Xc + diag(penalty) is kept in factored form
    (x_mean, penalty, basis, singular) so leverages x'A^-1 x can be evaluated for
    new rows without refitting:
      * penalty all zero: basis/singular are the right singular vectors and values of Xc;
      * otherwise they factor Xc @ diag(penalty)^-1/2.
    """
    intercept: float
    coefficients: np.ndarray
    residual_variance: float
    ridge_lambda: float
    n_train: int
    design_dim: int
    x_mean: np.ndarray
    penalty: np.ndarray
    basis: np.ndarray
    singular: np.ndarray
    converged: bool = True
    warnings: Tuple[str, ...] = ()
    stage1_r2: Optional[np.ndarray] = None
    log_posterior_trace: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.residual_variance < 0:
            raise NumericalError("residual_variance must be non-negative")
        if self.n_train < 1:
            raise NumericalError("n_train must be at least 1")
        if len(self.coefficients) != self.design_dim:
            raise NumericalError("coefficients length must equal design_dim")

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coefficients

    def leverage(self, X: np.ndarray) -> np.ndarray:
        """1/n + x_c' A^-1 x_c for each row of X"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        xc = X - self.x_mean
        if not np.any(self.penalty):
            proj = xc @ self.basis
            quad = np.sum(proj ** 2 / self.singular ** 2, axis=1)
        else:
            q = xc / np.sqrt(self.penalty)
            proj = q @ self.basis
            s2 = self.singular ** 2
            if self.basis.shape[1] == self.design_dim:
                quad = np.sum(proj ** 2 / (s2 + 1.0), axis=1)
            else:
                quad = np.sum(q ** 2, axis=1) - np.sum(proj ** 2 * s2 / (s2 + 1.0), axis=1)
        return 1.0 / self.n_train + np.maximum(quad, 0.0)


@dataclass(frozen=True)
class SparsePriorConfig:
    """beta_i ~ eta N(0, sigma_narrow) + (1 - eta) N(0, sigma_wide)"""
    eta: float = 0.95
    sigma_narrow: float = 0.01
    sigma_wide: float = 1.0
    max_iters: int = 500
    tol: float = 1e-8
    anneal_steps: int = 8

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ConfigError("eta", "must lie in (0, 1)")
        if self.sigma_narrow <= 0 or self.sigma_wide <= 0:
            raise ConfigError("sigma_narrow", "prior scales must be positive")
        if self.sigma_narrow >= self.sigma_wide:
            raise ConfigError("sigma_narrow", "must be smaller than sigma_wide")
        if self.max_iters < 1:
            raise ConfigError("max_iters", "must be at least 1")
        if self.tol <= 0:
            raise ConfigError("tol", "must be positive")
        if self.anneal_steps < 1:
            raise ConfigError("anneal_steps", "must be at least 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SparsePriorConfig":
        _reject_unknown(cls, data)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Parameters of the latent local-linear-trend generating process"""
    n_latents: int = 10
    n_donors: int = 1000
    t_pre: int = 100
    t_post: int = 30
    tau: float = 2.0
    tau_spill: float = -2.0
    invalid_fraction: float = 0.8
    sigma_u: float = 1.0
    sigma_delta: float = 0.1
    sigma_y: float = 0.1
    sigma_x: float = 0.1
    alpha: Union[float, Sequence[float]] = 1.0
    beta: Union[float, Sequence[Sequence[float]]] = 1.0
    slope_mean: float = 0.1
    slope_sd: float = 0.1
    latent_shift: Optional[Tuple[int, float, int]] = None
    zero_first_loading_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_u", "sigma_delta", "sigma_y", "sigma_x"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.slope_sd < 0:
            raise ConfigError("slope_sd", "must be non-negative")
        if self.n_latents < 1:
            raise ConfigError("n_latents", "must be at least 1")
        if self.n_donors < 1:
            raise ConfigError("n_donors", "must be at least 1")
        if self.t_pre < 2:
            raise ConfigError("t_pre", "must be at least 2")
        if self.t_post < 1:
            raise ConfigError("t_post", "must be at least 1")
        if not 0.0 <= self.invalid_fraction <= 1.0:
            raise ConfigError("invalid_fraction", "must lie in [0, 1]")
        if not 0.0 <= self.zero_first_loading_fraction <= 1.0:
            raise ConfigError("zero_first_loading_fraction", "must lie in [0, 1]")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")

        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim == 0:
            alpha = np.full(self.n_latents, float(alpha))
        if alpha.shape != (self.n_latents,):
            raise ConfigError("alpha", f"expected {self.n_latents} target loadings")
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim == 0:
            beta = np.full((self.n_donors, self.n_latents), float(beta))
        if beta.shape != (self.n_donors, self.n_latents):
            raise ConfigError("beta", f"expected a {self.n_donors}x{self.n_latents} loading matrix")
        object.__setattr__(self, "alpha", _frozen_array(alpha))
        object.__setattr__(self, "beta", _frozen_array(beta))

        if self.latent_shift is not None:
            try:
                index, mean, offset = self.latent_shift
            except (TypeError, ValueError):
                raise ConfigError("latent_shift", "expected (latent_index, shift_mean, shift_time_offset)") from None
            if not 0 <= int(index) < self.n_latents:
                raise ConfigError("latent_shift", f"latent index {index} out of range")
            if int(offset) < 0:
                raise ConfigError("latent_shift", "shift_time_offset must be non-negative")
            object.__setattr__(self, "latent_shift", (int(index), float(mean), int(offset)))

    @property
    def n_times(self) -> int:
        return self.t_pre + self.t_post

    @property
    def n_invalid(self) -> int:
        return int(round(self.invalid_fraction * self.n_donors))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimConfig":
        _reject_unknown(cls, data)
        data = dict(data)
        if data.get("latent_shift") is not None:
            data["latent_shift"] = tuple(data["latent_shift"])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError("simulation", str(e)) from None

    def to_dict(self) -> dict:
        alpha = self.alpha
        beta = self.beta
        return {
            **{f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("alpha", "beta", "latent_shift")},
            "alpha": float(alpha[0]) if np.all(alpha == alpha[0]) else alpha.tolist(),
            "beta": float(beta.flat[0]) if np.all(beta == beta.flat[0]) else beta.tolist(),
            "latent_shift": list(self.latent_shift) if self.latent_shift is not None else None,
        }


@dataclass(frozen=True, eq=False)
class SimTrace:
    panel: Panel
    latents: np.ndarray
    slopes: np.ndarray
    invalid_mask: np.ndarray
    true_tau: float
    true_counterfactual: np.ndarray
    loadings: np.ndarray
    spillover: np.ndarray

    @property
    def valid_ids(self) -> List[str]:
        return [d for d, bad in zip(self.panel.donor_ids, self.invalid_mask) if not bad]

    @property
    def invalid_ids(self) -> List[str]:
        return [d for d, bad in zip(self.panel.donor_ids, self.invalid_mask) if bad]


@dataclass(frozen=True)
class SelectionConfig:
    procedure: str = "S2"
    ppi_level: float = 0.8
    s1_count: int = 10
    time_average_bucket: Optional[int] = None
    ridge_lambda: Optional[float] = None
    lambda_grid: Tuple[float, ...] = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.procedure not in SELECTION_PROCEDURES:
            raise ConfigError("procedure", f"must be one of {SELECTION_PROCEDURES}")
        if not 0.0 < self.ppi_level < 1.0:
            raise ConfigError("ppi_level", "must lie in (0, 1)")
        if self.s1_count < 1:
            raise ConfigError("s1_count", "must be at least 1")
        if self.time_average_bucket is not None and self.time_average_bucket < 1:
            raise ConfigError("time_average_bucket", "must be at least 1")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda", "must be non-negative")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise ConfigError("lambda_grid", "must be a non-empty list of positive values")
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SelectionConfig":
        _reject_unknown(cls, data)
        return cls(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lambda_grid"] = list(self.lambda_grid)
        return data


@dataclass(frozen=True)
class DonorForecast:
    donor_id: str
    predicted: float
    actual: float
    abs_error: float
    interval: PredictionInterval
    flagged: bool


@dataclass(frozen=True)
class SelectionReport:
    procedure: str
    forecasts: Tuple[DonorForecast, ...]
    pvd_ids: Tuple[str, ...]
    excluded_ids: Tuple[str, ...]
    ridge_lambda: float
    ppi_level: float
    time_average_bucket: Optional[int] = None

    @property
    def donor_ids(self) -> List[str]:
        return [f.donor_id for f in self.forecasts]

    @property
    def flagged(self) -> np.ndarray:
        return np.array([f.flagged for f in self.forecasts], dtype=bool)

    @property
    def abs_errors(self) -> np.ndarray:
        return np.array([f.abs_error for f in self.forecasts])

    @property
    def is_empty(self) -> bool:
        return not self.pvd_ids

    def to_dict(self) -> dict:
        return {
            "procedure": self.procedure,
            "ppi_level": self.ppi_level,
            "ridge_lambda": self.ridge_lambda,
            "time_average_bucket": self.time_average_bucket,
            "donors": [
                {
                    "id": f.donor_id,
                    "predicted": f.predicted,
                    "actual": f.actual,
                    "abs_error": f.abs_error,
                    "lower": f.interval.lower,
                    "upper": f.interval.upper,
                    "flagged": f.flagged,
                }
                for f in self.forecasts
            ],
            "pvd_ids": list(self.pvd_ids),
            "excluded_ids": list(self.excluded_ids),
        }


@dataclass(frozen=True, eq=False)
class ScFit:
    fit: RegressionFit
    donor_ids: Tuple[str, ...]
    sparse: bool = False

    def __post_init__(self):
        object.__setattr__(self, "donor_ids", tuple(self.donor_ids))
        if len(self.donor_ids) != self.fit.design_dim:
            raise PanelError("donor_ids length must equal the fit's design dimension")

    @property
    def weights(self) -> Dict[str, float]:
        return dict(zip(self.donor_ids, (float(b) for b in self.fit.coefficients)))


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    """
    Effect of the intervention over the whole timeline.

    synthetic holds fitted values before the intervention and the counterfactual
    after it; band_halfwidth is the pointwise 95% half-width of observed - synthetic.
    """
    tau_hat: float
    interval_95: Tuple[float, float]
    times: np.ndarray
    observed: np.ndarray
    synthetic: np.ndarray
    band_halfwidth: np.ndarray
    intervention_time: int

    @property
    def counterfactual(self) -> np.ndarray:
        return self.synthetic[self.intervention_time:]

    @property
    def per_time_effects(self) -> np.ndarray:
        return self.observed[self.intervention_time:] - self.counterfactual

    def to_dict(self) -> dict:
        post = slice(self.intervention_time, None)
        return {
            "tau_hat": self.tau_hat,
            "interval_95": list(self.interval_95),
            "post_times": self.times[post].tolist(),
            "per_time_effects": self.per_time_effects.tolist(),
            "counterfactual": self.counterfactual.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ProximalFit:
    sc_fit: RegressionFit
    stage1_r2: np.ndarray
    selected_ids: Tuple[str, ...]
    excluded_ids: Tuple[str, ...]
    weak_instrument_flag: bool
    dropped_ids: Tuple[str, ...] = ()

    def as_sc_fit(self) -> ScFit:
        return ScFit(fit=self.sc_fit, donor_ids=self.selected_ids, sparse=False)

    def to_dict(self) -> dict:
        return {
            "intercept": self.sc_fit.intercept,
            "weights": dict(zip(self.selected_ids, self.sc_fit.coefficients.tolist())),
            "residual_variance": self.sc_fit.residual_variance,
            "stage1_r2": dict(zip(self.selected_ids, self.stage1_r2.tolist())),
            "excluded_ids": list(self.excluded_ids),
            "dropped_ids": list(self.dropped_ids),
            "weak_instrument_flag": self.weak_instrument_flag,
        }


@dataclass(frozen=True, eq=False)
class SensitivityReport:
    ov_bound: float
    fp_bound: float
    fn_bound: float
    n_used: int
    max_abs_weight: float
    max_excluded_shift: float
    max_selected_shift: float
    tau_spill_grid: np.ndarray
    fn_bounds: np.ndarray
    sign_flip_tau_spill: float
    tau_hat: float


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    replicates: int = 200
    procedures: Tuple[str, ...] = PROCEDURES
    k_donors: int = 10
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    debias: bool = False
    sparse: Optional[SparsePriorConfig] = None
    master_seed: int = 0
    instrument_cap: int = 50
    sc_lambda: float = 1e-6
    stage1_lambda: float = 0.0
    jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates", "must be at least 1")
        if self.k_donors < 1:
            raise ConfigError("k_donors", "must be at least 1")
        if self.instrument_cap < 1:
            raise ConfigError("instrument_cap", "must be at least 1")
        if self.sc_lambda < 0:
            raise ConfigError("sc_lambda", "must be non-negative")
        if self.stage1_lambda < 0:
            raise ConfigError("stage1_lambda", "must be non-negative")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed", "must be a 64-bit unsigned integer")
        bad = [p for p in self.procedures if p not in PROCEDURES]
        if bad or not self.procedures:
            raise ConfigError("procedures", f"expected a non-empty subset of {PROCEDURES}")
        object.__setattr__(self, "procedures", tuple(self.procedures))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        _reject_unknown(cls, data)
        data = dict(data)
        data["sim"] = SimConfig.from_dict(data.get("sim") or {})
        data["selection"] = SelectionConfig.from_dict(data.get("selection") or {})
        if data.get("sparse") is not None:
            data["sparse"] = SparsePriorConfig.from_dict(data["sparse"])
        if "procedures" in data:
            data["procedures"] = tuple(data["procedures"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "replicates": self.replicates,
            "procedures": list(self.procedures),
            "k_donors": self.k_donors,
            "selection": self.selection.to_dict(),
            "debias": self.debias,
            "sparse": self.sparse.to_dict() if self.sparse else None,
            "master_seed": self.master_seed,
            "instrument_cap": self.instrument_cap,
            "sc_lambda": self.sc_lambda,
            "stage1_lambda": self.stage1_lambda,
            "jobs": self.jobs,
        }


@dataclass(frozen=True, eq=False)
class ProcedureBias:
    procedure: str
    mean_bias: float
    mc_ci95: Tuple[float, float]
    replicate_biases: np.ndarray
    failure_count: int

    @property
    def ci_half_width(self) -> float:
        return 0.5 * (self.mc_ci95[1] - self.mc_ci95[0])


@dataclass(frozen=True, eq=False)
class BiasSummary:
    procedures: Dict[str, ProcedureBias]
    replicates: int
    label: str = ""

    def __getitem__(self, procedure: str) -> ProcedureBias:
        return self.procedures[procedure]


@dataclass(frozen=True)
class SemiSyntheticRecord:
    seed: int
    injected_id: str
    injected_rank: int
    injected_weight: float
    flagged: bool
    tau_naive: float
    tau_selected: float
    n_pvd: int


@dataclass(frozen=True)
class SemiSyntheticReport:
    """Rates are over the evaluated seeds; seeds whose selection came back empty are listed in skipped_seeds"""
    sigma: float
    records: Tuple[SemiSyntheticRecord, ...]
    skipped_seeds: Tuple[int, ...] = ()

    @property
    def failure_count(self) -> int:
        return len(self.skipped_seeds)

    @property
    def flag_rate(self) -> float:
        return float(np.mean([r.flagged for r in self.records])) if self.records else float("nan")

    @property
    def attenuation_rate(self) -> float:
        """Share of seeds where the naive estimate sits closer to zero"""
        if not self.records:
            return float("nan")
        return float(np.mean([abs(r.tau_naive) < abs(r.tau_selected) for r in self.records]))
