import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from donorselect import __version__
from donorselect.app.core.errors import ConfigError, DonorSelectError, EmptySelectionError, ProximalError, ValidationError
from donorselect.app.core.models import PROCEDURES, SELECTION_PROCEDURES
from donorselect.app.core.panel import emit_csv, ingest_csv
from donorselect.app.core.simulator import derive_seed, inject_synthetic_donor, simulate
from donorselect.app.services import serializers
from donorselect.app.services.estimation_service import estimate_effect, fit_sc
from donorselect.app.services.experiment_service import (
    SHIFT_ZERO_LOADING_FRACTION,
    run_experiment,
    run_latent_shift_study,
    run_semi_synthetic,
)
from donorselect.app.services.proximal_service import fit_proximal_sc
from donorselect.app.services.selection_service import sample_ids, select_donors
from donorselect.app.services.sensitivity_service import sensitivity_report
from donorselect.app.utils.config_loader import (
    experiment_config,
    load_config,
    selection_config,
    sim_config,
    sparse_config,
)
from donorselect.app.utils.logger import setup_logging

logger = logging.getLogger("donorselect")

EXIT_OK = 0


class RunContext:
    """Output directory, table format and the files written so far"""

    def __init__(self, args: argparse.Namespace, config: Dict[str, Any]):
        self.args = args
        self.config = config
        self.output_dir = Path(args.output_dir)
        self.files: List[str] = []

    def json(self, name: str, data: Any):
        self.files.append(str(serializers.write_json(data, self.output_dir / name)))

    def table(self, name: str, frame):
        """CSV tables are written only with --format csv"""
        if self.args.format == "csv":
            self.files.append(str(serializers.write_csv(frame, self.output_dir / name)))

    def panel(self, name: str, panel):
        self.files.append(str(emit_csv(panel, self.output_dir / name)))

    def manifest(self):
        arguments = {k: v for k, v in vars(self.args).items() if k != "handler"}
        self.json("manifest.json", {
            "version": __version__,
            "command": self.args.command,
            "arguments": arguments,
            "config": self.config,
            "files": list(self.files),
        })


def _load_panel(args):
    return ingest_csv(args.panel, args.target, args.intervention_time)


def cmd_simulate(ctx: RunContext):
    args = ctx.args
    config = sim_config(
        ctx.config,
        seed=args.seed,
        n_latents=args.n_latents,
        n_donors=args.n_donors,
        t_pre=args.t_pre,
        t_post=args.t_post,
        tau=args.tau,
        tau_spill=args.tau_spill,
        invalid_fraction=args.invalid_fraction,
        sigma_x=args.sigma_x,
    )
    trace = simulate(config)
    ctx.panel("panel.csv", trace.panel)
    ctx.json("truth.json", serializers.truth_dict(trace, config))


def cmd_select(ctx: RunContext):
    args = ctx.args
    panel = _load_panel(args)
    config = selection_config(
        ctx.config,
        procedure=args.procedure,
        ppi_level=args.phi,
        s1_count=args.k,
        time_average_bucket=args.bucket,
        ridge_lambda=args.ridge_lambda,
    )
    try:
        report = select_donors(panel, config)
    except EmptySelectionError as e:
        ctx.json("selection.json", e.report.to_dict())
        raise
    ctx.json("selection.json", report.to_dict())
    ctx.table("selection.csv", serializers.selection_frame(report))


def _fit_from_selection(ctx: RunContext, panel):
    """SC fit (plain, sparse or debiased) on the selection report's donors, plus the excluded ids"""
    args = ctx.args
    pvd_ids, excluded_ids = serializers.read_selection(args.selection)
    if not pvd_ids:
        raise EmptySelectionError(None, "selection report has no potentially valid donors")
    if args.sparse and args.debias:
        raise ConfigError("sparse", "cannot be combined with --debias")

    sc_section = ctx.config["sc"]
    if args.sparse:
        return fit_sc(panel, pvd_ids, sparse=sparse_config(ctx.config)), excluded_ids, None

    k = args.k or sc_section["k_donors"]
    donors = sample_ids(pvd_ids, k, derive_seed(args.seed, 0))
    if not args.debias:
        return fit_sc(panel, donors, ridge_lambda=sc_section["ridge_lambda"]), excluded_ids, None

    if not excluded_ids:
        raise ProximalError("selection excluded no donors, nothing to debias with; run estimate without --debias")
    proximal_section = ctx.config["proximal"]
    instruments = sample_ids(excluded_ids, proximal_section["instrument_cap"], derive_seed(args.seed, 1))
    proximal = fit_proximal_sc(
        panel, donors, instruments,
        stage1_lambda=proximal_section["stage1_lambda"],
        sc_lambda=sc_section["ridge_lambda"],
        max_variance_ratio=proximal_section["max_variance_ratio"],
    )
    return proximal.as_sc_fit(), excluded_ids, proximal


def _write_sensitivity(ctx: RunContext, panel, sc, excluded_ids, tau_hat: float):
    report = sensitivity_report(panel, sc, excluded_ids, tau_hat, ctx.config["sensitivity"]["tau_spill_grid"])
    ctx.json("sensitivity.json", serializers.sensitivity_dict(report))
    ctx.table("fn_curve.csv", serializers.fn_curve_frame(report))


def cmd_estimate(ctx: RunContext):
    panel = _load_panel(ctx.args)
    sc, excluded_ids, proximal = _fit_from_selection(ctx, panel)
    estimate = estimate_effect(panel, sc)
    effect = estimate.to_dict()
    effect["weights"] = sc.weights
    effect["intercept"] = sc.fit.intercept
    effect["sparse"] = sc.sparse
    effect["warnings"] = list(sc.fit.warnings)
    ctx.json("effect.json", effect)
    ctx.table("effect.csv", serializers.effect_frame(estimate))
    if proximal is not None:
        ctx.json("proximal.json", proximal.to_dict())
    _write_sensitivity(ctx, panel, sc, excluded_ids, estimate.tau_hat)


def cmd_debias(ctx: RunContext):
    ctx.args.debias = True
    cmd_estimate(ctx)


def cmd_sensitivity(ctx: RunContext):
    panel = _load_panel(ctx.args)
    sc, excluded_ids, _ = _fit_from_selection(ctx, panel)
    _write_sensitivity(ctx, panel, sc, excluded_ids, estimate_effect(panel, sc).tau_hat)


def cmd_experiment(ctx: RunContext):
    args = ctx.args
    sim = dict(ctx.config["simulation"])
    sim.update({k: v for k, v in (("sigma_x", args.sigma_x), ("n_donors", args.n_donors)) if v is not None})
    selection = dict(ctx.config["selection"])
    if args.bucket is not None:
        selection["time_average_bucket"] = args.bucket
    config = experiment_config(
        ctx.config,
        sim=sim,
        selection=selection,
        replicates=args.replicates,
        procedures=args.procedures,
        master_seed=args.seed,
        jobs=args.jobs,
        debias=True if args.debias else None,
        sparse=ctx.config["sparse"] if args.sparse else None,
    )

    if args.shift_offsets:
        studies = run_latent_shift_study(
            config, args.shift_mean, args.shift_offsets,
            zero_first_loading_fraction=args.zero_loading_fraction,
        )
        ctx.json("bias_summary.json", {
            "experiment": config.to_dict(),
            "shift_mean": args.shift_mean,
            "zero_first_loading_fraction": args.zero_loading_fraction,
            "studies": {str(offset): serializers.bias_summary_dict(s) for offset, s in studies.items()},
        })
        for offset, summary in studies.items():
            ctx.table(f"bias_offset{offset}.csv", serializers.bias_frame(summary))
        return

    summary = run_experiment(config)
    ctx.json("bias_summary.json", {"experiment": config.to_dict(), **serializers.bias_summary_dict(summary)})
    ctx.table("bias.csv", serializers.bias_frame(summary))


def cmd_inject(ctx: RunContext):
    args = ctx.args
    panel = _load_panel(args)
    if args.sigma is None:
        sigma = args.sigma_fraction * float(np.std(panel.pre_target, ddof=1))
    else:
        sigma = args.sigma
    if args.evaluate_seeds:
        config = selection_config(
            ctx.config,
            procedure=args.procedure,
            ppi_level=args.phi,
            s1_count=args.k,
            time_average_bucket=args.bucket,
        )
        seeds = [args.seed + i for i in range(args.evaluate_seeds)]
        report = run_semi_synthetic(panel, sigma, config, seeds, sc_lambda=ctx.config["sc"]["ridge_lambda"])
        ctx.json("semi_synthetic.json", serializers.semi_synthetic_dict(report))
        return
    injected, injected_id = inject_synthetic_donor(panel, sigma, args.seed, args.donor_id)
    ctx.panel("panel.csv", injected)
    ctx.json("injected.json", {"injected_id": injected_id, "sigma": sigma, "seed": args.seed})


def _add_panel_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("panel", help="CSV panel: time, target and donor columns")
    parser.add_argument("--target", default="target", help="target column name")
    parser.add_argument("--intervention-time", type=int, required=True,
                        help="value of the time column at the first post-intervention point")


def _add_selection_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--procedure", choices=SELECTION_PROCEDURES)
    parser.add_argument("--phi", type=float, help="prediction interval level (S2)")
    parser.add_argument("--k", type=int, help="number of donors kept by S1")
    parser.add_argument("--bucket", type=int, help="time-averaging bucket size")


def _add_estimate_arguments(parser: argparse.ArgumentParser, debias_flag: bool = True):
    _add_panel_arguments(parser)
    parser.add_argument("--selection", required=True, help="selection.json written by `select`")
    parser.add_argument("--k", type=int, help="donors sampled from the selection for the fit")
    parser.add_argument("--sparse", action="store_true", help="sparse-prior fit over every selected donor")
    if debias_flag:
        parser.add_argument("--debias", action="store_true", help="two-stage fit with excluded donors as instruments")
    else:
        parser.set_defaults(debias=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="donorselect", description="Donor selection for synthetic control")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output-dir", default="out")
    parser.add_argument("--format", choices=("json", "csv"), default="json",
                        help="csv additionally writes plot-ready tables")
    parser.add_argument("--jobs", type=int, help="worker processes for experiments (-1: all cores)")
    parser.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--config", help="JSON file overriding the packaged configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a panel from the latent trend process")
    for flag, kind in (("--n-latents", int), ("--n-donors", int), ("--t-pre", int), ("--t-post", int),
                       ("--tau", float), ("--tau-spill", float), ("--invalid-fraction", float), ("--sigma-x", float)):
        p.add_argument(flag, type=kind)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("select", help="flag donors with spillover")
    _add_panel_arguments(p)
    _add_selection_arguments(p)
    p.add_argument("--ridge-lambda", type=float, help="fixed forecast lambda instead of leave-one-out")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("estimate", help="synthetic control effect and sensitivity bounds")
    _add_estimate_arguments(p)
    p.set_defaults(handler=cmd_estimate)

    p = sub.add_parser("debias", help="estimate with two-stage debiasing")
    _add_estimate_arguments(p, debias_flag=False)
    p.set_defaults(handler=cmd_debias)

    p = sub.add_parser("sensitivity", help="bias bounds only")
    _add_estimate_arguments(p)
    p.set_defaults(handler=cmd_sensitivity)

    p = sub.add_parser("experiment", help="Monte Carlo bias study")
    p.add_argument("--replicates", type=int)
    p.add_argument("--procedures", nargs="+", choices=PROCEDURES)
    p.add_argument("--sigma-x", type=float)
    p.add_argument("--n-donors", type=int)
    p.add_argument("--bucket", type=int)
    p.add_argument("--debias", action="store_true")
    p.add_argument("--sparse", action="store_true")
    p.add_argument("--shift-mean", type=float, default=0.5)
    p.add_argument("--shift-offsets", type=int, nargs="+", help="run a latent shift study at these offsets")
    p.add_argument("--zero-loading-fraction", type=float, default=SHIFT_ZERO_LOADING_FRACTION,
                   help="share of valid donors with no loading on the shifted latent (shift study only)")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("inject", help="append a noisy copy of the target as a donor")
    _add_panel_arguments(p)
    _add_selection_arguments(p)
    p.add_argument("--sigma", type=float, help="noise sd in target units")
    p.add_argument("--sigma-fraction", type=float, default=0.1,
                   help="noise sd as a fraction of the pre-intervention target sd (when --sigma is absent)")
    p.add_argument("--donor-id", default="synthetic")
    p.add_argument("--evaluate-seeds", type=int, help="run the injection study over this many seeds")
    p.set_defaults(handler=cmd_inject)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or "INFO", args.output_dir)

    try:
        config = load_config(args.config)
        if args.seed < 0:
            raise ConfigError("seed", f"must be non-negative, got {args.seed}")
        if args.log_level is None:
            logging.getLogger().setLevel(config["logging"]["level"].upper())
        ctx = RunContext(args, config)
        args.handler(ctx)
        ctx.manifest()
        logger.info(f"{args.command}: wrote {len(ctx.files)} file(s) to {ctx.output_dir}")
        return EXIT_OK

    except ValidationError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except DonorSelectError as e:
        logger.critical(f"{args.command} failed: {e}", exc_info=True)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
