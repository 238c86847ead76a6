import logging
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from donorselect.app.core.errors import (
    ConfigError,
    EmptySelectionError,
    NumericalError,
    PanelError,
    ProximalError,
)
from donorselect.app.core.models import (
    PROCEDURES,
    BiasSummary,
    ExperimentConfig,
    Panel,
    ProcedureBias,
    ScFit,
    SelectionConfig,
    SemiSyntheticRecord,
    SemiSyntheticReport,
    SimTrace,
)
from donorselect.app.core.simulator import derive_seed, inject_synthetic_donor, simulate
from donorselect.app.services.estimation_service import SC_RIDGE_LAMBDA, estimate_effect, fit_sc
from donorselect.app.services.proximal_service import fit_proximal_sc
from donorselect.app.services.selection_service import sample_ids, select_donors, with_procedure

logger = logging.getLogger(__name__)

# Non-results: counted per procedure, never fatal for the run
REPLICATE_FAILURES = (EmptySelectionError, NumericalError, PanelError, ProximalError)
Z_95 = 1.96
# Share of valid donors that do not load on the shifted latent in a shift study
SHIFT_ZERO_LOADING_FRACTION = 0.5


def procedure_pool(trace: SimTrace, procedure: str, selection: SelectionConfig) -> Tuple[List[str], List[str]]:
    """
    Donors a procedure may draw from and the donors it excludes.

    All and Valid exclude nothing up front; their instruments are the donors
    left out by sampling.
    """
    panel = trace.panel
    if procedure == "All":
        return list(panel.donor_ids), []
    if procedure == "Valid":
        return trace.valid_ids, []
    report = select_donors(panel, with_procedure(selection, procedure))
    return list(report.pvd_ids), list(report.excluded_ids)


def summarize(results: Sequence[Dict[str, Optional[float]]], procedures: Sequence[str], label: str = "") -> BiasSummary:
    """Mean bias and mean +- 1.96 sd / sqrt(R) per procedure, reduced in replicate order"""
    summary = {}
    for procedure in procedures:
        values = [res[procedure] for res in results if res.get(procedure) is not None]
        biases = np.array(values, dtype=float)
        failures = len(results) - len(values)
        if biases.size == 0:
            mean, half = float("nan"), float("nan")
        else:
            mean = float(np.mean(biases))
            sd = float(np.std(biases, ddof=1)) if biases.size > 1 else 0.0
            half = Z_95 * sd / np.sqrt(biases.size)
        summary[procedure] = ProcedureBias(
            procedure=procedure,
            mean_bias=mean,
            mc_ci95=(mean - half, mean + half),
            replicate_biases=biases,
            failure_count=failures,
        )
    return BiasSummary(procedures=summary, replicates=len(results), label=label)


class ExperimentService:
    """Monte Carlo bias study: one simulated panel per replicate, every procedure fitted on it"""

    def __init__(self, config: ExperimentConfig):
        self.config = config

    def run(self, label: str = "") -> BiasSummary:
        config = self.config
        logger.info(
            f"Experiment{' ' + label if label else ''}: R={config.replicates}, "
            f"procedures={list(config.procedures)}, jobs={config.jobs}"
        )
        every = max(1, config.replicates // 10)
        results = []
        replicates = Parallel(n_jobs=config.jobs, return_as="generator")(
            delayed(self.run_replicate)(r) for r in range(config.replicates)
        )
        for done, biases in enumerate(replicates, start=1):
            results.append(biases)
            if done % every == 0 or done == config.replicates:
                failed = sum(value is None for value in biases.values())
                logger.info(f"{done}/{config.replicates} replicates done (last one: {failed} failed procedure(s))")

        summary = summarize(results, config.procedures, label)
        for procedure, bias in summary.procedures.items():
            lo, hi = bias.mc_ci95
            logger.info(
                f"{procedure}: mean bias {bias.mean_bias:.4f} [{lo:.4f}, {hi:.4f}], "
                f"failures {bias.failure_count}"
            )
        return summary

    def run_replicate(self, replicate: int) -> Dict[str, Optional[float]]:
        """tau_hat - tau for every procedure of one simulated panel; None marks a failure"""
        config = self.config
        trace = simulate(replace(config.sim, seed=derive_seed(config.master_seed, replicate, 0)))

        biases: Dict[str, Optional[float]] = {}
        for procedure in config.procedures:
            try:
                sc = self._fit(trace, procedure, replicate)
                biases[procedure] = estimate_effect(trace.panel, sc).tau_hat - trace.true_tau
            except REPLICATE_FAILURES as e:
                logger.warning(f"replicate {replicate}, {procedure}: {type(e).__name__}: {e}")
                biases[procedure] = None
        return biases

    def _fit(self, trace: SimTrace, procedure: str, replicate: int) -> ScFit:
        config = self.config
        panel = trace.panel
        key = PROCEDURES.index(procedure) + 1
        pool, excluded = procedure_pool(trace, procedure, config.selection)

        if config.sparse is not None:
            donors = pool
        else:
            donors = sample_ids(pool, config.k_donors, derive_seed(config.master_seed, replicate, key))

        if not config.debias:
            return fit_sc(panel, donors, sparse=config.sparse, ridge_lambda=config.sc_lambda)

        chosen = set(donors)
        unsampled = [d for d in pool if d not in chosen]
        instruments = excluded if procedure in ("S1", "S2") else unsampled
        if not instruments:
            logger.debug(f"replicate {replicate}: {procedure} has no instruments, plain SC used")
            return fit_sc(panel, donors, sparse=config.sparse, ridge_lambda=config.sc_lambda)
        instruments = sample_ids(instruments, config.instrument_cap, derive_seed(config.master_seed, replicate, key, 1))
        proximal = fit_proximal_sc(
            panel, donors, instruments,
            stage1_lambda=config.stage1_lambda,
            sc_lambda=config.sc_lambda,
        )
        return proximal.as_sc_fit()


def run_experiment(config: ExperimentConfig, label: str = "") -> BiasSummary:
    return ExperimentService(config).run(label)


def run_latent_shift_study(config: ExperimentConfig, shift_mean: float, offsets: Sequence[int], latent: int = 0,
                           zero_first_loading_fraction: float = SHIFT_ZERO_LOADING_FRACTION) -> Dict[int, BiasSummary]:
    """
    One experiment per offset with the shift applied to a single latent.

    A zero_first_loading_fraction share of the valid donors gets a zero loading
    on the shifted latent, so the shift separates donors instead of moving all
    of them alike.
    """
    if any(offset < 0 for offset in offsets):
        raise ConfigError("shift_offsets", "must be non-negative")
    if latent != 0 and zero_first_loading_fraction > 0:
        logger.warning(f"zeroed loadings are on latent 0, the shift is on latent {latent}")
    studies = {}
    for offset in offsets:
        sim = replace(
            config.sim,
            latent_shift=(latent, shift_mean, int(offset)),
            zero_first_loading_fraction=zero_first_loading_fraction,
        )
        studies[int(offset)] = run_experiment(replace(config, sim=sim), label=f"shift={shift_mean:g}@{offset}")
    return studies


def _weight_rank(sc: ScFit, donor_id: str) -> int:
    """1-based rank of a donor by |weight|, largest first"""
    weights = np.abs(sc.fit.coefficients)
    order = np.argsort(-weights, kind="stable")
    position = sc.donor_ids.index(donor_id)
    return int(np.flatnonzero(order == position)[0]) + 1


def run_semi_synthetic(panel: Panel, sigma: float, selection: SelectionConfig, seeds: Sequence[int],
                       sc_lambda: float = SC_RIDGE_LAMBDA) -> SemiSyntheticReport:
    """
    Inject a noisy copy of the target as an extra donor and compare the naive SC
    (all donors) with the SC on the selected donors, once per seed.
    """
    records = []
    skipped = []
    for seed in seeds:
        injected, injected_id = inject_synthetic_donor(panel, sigma, seed)
        naive = fit_sc(injected, injected.donor_ids, ridge_lambda=sc_lambda)
        try:
            report = select_donors(injected, selection)
        except EmptySelectionError:
            logger.warning(f"seed {seed}: every donor flagged, seed skipped")
            skipped.append(int(seed))
            continue
        selected = fit_sc(injected, report.pvd_ids, ridge_lambda=sc_lambda)
        records.append(SemiSyntheticRecord(
            seed=int(seed),
            injected_id=injected_id,
            injected_rank=_weight_rank(naive, injected_id),
            injected_weight=naive.weights[injected_id],
            flagged=injected_id not in report.pvd_ids,
            tau_naive=estimate_effect(injected, naive).tau_hat,
            tau_selected=estimate_effect(injected, selected).tau_hat,
            n_pvd=len(report.pvd_ids),
        ))
    result = SemiSyntheticReport(sigma=float(sigma), records=tuple(records), skipped_seeds=tuple(skipped))
    logger.info(
        f"Semi-synthetic sigma={sigma:g}: {len(records)} seeds, {len(skipped)} skipped, "
        f"flag rate {result.flag_rate:.2f}, attenuation rate {result.attenuation_rate:.2f}"
    )
    return result
