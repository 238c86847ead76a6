import dataclasses
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from donorselect.app.core.errors import IngestionError
from donorselect.app.core.models import (
    BiasSummary,
    EffectEstimate,
    SelectionReport,
    SemiSyntheticReport,
    SensitivityReport,
    SimConfig,
    SimTrace,
)
from donorselect.app.core.panel import FLOAT_FORMAT

BIAS_COLUMNS = ["procedure", "mean_bias", "ci_lo", "ci_hi"]
EFFECT_COLUMNS = ["time", "observed", "counterfactual", "effect", "lower", "upper"]
FN_COLUMNS = ["tau_spill", "bound"]
SELECTION_COLUMNS = ["id", "predicted", "actual", "abs_error", "lower", "upper", "flagged"]


def json_serializer(obj: Any) -> Any:
    """`default=` hook for json.dumps: numpy values, dataclasses, paths"""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, Path):
        return str(obj)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    raise TypeError(f"Object of type {type(obj)} is not JSON serializable")


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types all the way down; non-finite floats become 'inf', '-inf' or 'nan'"""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    if isinstance(obj, (bool, int, str)) or obj is None:
        return obj
    return to_jsonable(json_serializer(obj))


def write_json(data: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    return path


def selection_frame(report: SelectionReport) -> pd.DataFrame:
    return pd.DataFrame(report.to_dict()["donors"], columns=SELECTION_COLUMNS)


def read_selection(path: Union[str, Path]) -> Tuple[List[str], List[str]]:
    """pvd_ids and excluded_ids from a selection report written by write_json"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise IngestionError(f"selection report not found: {path}") from None
    except json.JSONDecodeError as e:
        raise IngestionError(f"selection report {path} is not valid JSON: {e}") from None
    for key in ("pvd_ids", "excluded_ids"):
        if not isinstance(data.get(key), list):
            raise IngestionError(f"selection report {path} lacks a '{key}' list")
    return [str(d) for d in data["pvd_ids"]], [str(d) for d in data["excluded_ids"]]


def effect_frame(estimate: EffectEstimate) -> pd.DataFrame:
    """Whole timeline: fitted values before the intervention, counterfactual after"""
    effect = estimate.observed - estimate.synthetic
    return pd.DataFrame({
        "time": estimate.times,
        "observed": estimate.observed,
        "counterfactual": estimate.synthetic,
        "effect": effect,
        "lower": effect - estimate.band_halfwidth,
        "upper": effect + estimate.band_halfwidth,
    }, columns=EFFECT_COLUMNS)


def sensitivity_dict(report: SensitivityReport) -> Dict[str, Any]:
    return {
        "tau_hat": report.tau_hat,
        "ov_bound": report.ov_bound,
        "fp_bound": report.fp_bound,
        "fn_bound_per_unit_spillover": report.fn_bound,
        "n_used": report.n_used,
        "max_abs_weight": report.max_abs_weight,
        "max_selected_shift": report.max_selected_shift,
        "max_excluded_shift": report.max_excluded_shift,
        "sign_flip_tau_spill": report.sign_flip_tau_spill,
        "fn_curve": {"tau_spill": report.tau_spill_grid, "bound": report.fn_bounds},
    }


def fn_curve_frame(report: SensitivityReport) -> pd.DataFrame:
    return pd.DataFrame({"tau_spill": report.tau_spill_grid, "bound": report.fn_bounds}, columns=FN_COLUMNS)


def bias_summary_dict(summary: BiasSummary) -> Dict[str, Any]:
    return {
        "label": summary.label,
        "replicates": summary.replicates,
        "procedures": {
            name: {
                "mean_bias": bias.mean_bias,
                "mc_ci95": list(bias.mc_ci95),
                "failure_count": bias.failure_count,
                "replicate_biases": bias.replicate_biases,
            }
            for name, bias in summary.procedures.items()
        },
    }


def bias_frame(summary: BiasSummary) -> pd.DataFrame:
    rows = [
        {"procedure": name, "mean_bias": b.mean_bias, "ci_lo": b.mc_ci95[0], "ci_hi": b.mc_ci95[1]}
        for name, b in summary.procedures.items()
    ]
    return pd.DataFrame(rows, columns=BIAS_COLUMNS)


def truth_dict(trace: SimTrace, config: SimConfig) -> Dict[str, Any]:
    """Ground truth of a simulated panel"""
    return {
        "tau": trace.true_tau,
        "intervention_time": trace.panel.intervention_value,
        "valid_ids": trace.valid_ids,
        "invalid_ids": trace.invalid_ids,
        "spillover": dict(zip(trace.panel.donor_ids, trace.spillover)),
        "counterfactual": trace.true_counterfactual,
        "config": config.to_dict(),
    }


def semi_synthetic_dict(report: SemiSyntheticReport) -> Dict[str, Any]:
    return {
        "sigma": report.sigma,
        "flag_rate": report.flag_rate,
        "attenuation_rate": report.attenuation_rate,
        "failure_count": report.failure_count,
        "skipped_seeds": list(report.skipped_seeds),
        "records": [dataclasses.asdict(r) for r in report.records],
    }
