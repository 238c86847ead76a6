import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from donorselect.app.core.errors import ConfigError
from donorselect.app.core.models import (
    ExperimentConfig,
    SelectionConfig,
    SimConfig,
    SparsePriorConfig,
)

logger = logging.getLogger(__name__)

CONF_DIR = Path(__file__).parent.parent.parent / "conf"
REQUIRED_SECTIONS = ("logging", "selection", "sc", "sparse", "proximal", "experiment", "sensitivity", "simulation")


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(str(path), "configuration file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return data


def merge_sections(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Section-wise merge: nested dicts are updated key by key, anything else replaced"""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


# (section, key, lower bound); sections with typed configs validate themselves
NUMERIC_BOUNDS = (
    ("sc", "ridge_lambda", 0.0),
    ("sc", "k_donors", 1),
    ("proximal", "stage1_lambda", 0.0),
    ("proximal", "instrument_cap", 1),
    ("proximal", "max_variance_ratio", 1.0),
)


def _validate_numbers(config: Dict[str, Any]):
    for section, key, lower in NUMERIC_BOUNDS:
        value = config[section].get(key)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}", f"expected a number, got {value!r}")
        if value < lower:
            raise ConfigError(f"{section}.{key}", f"must be at least {lower}, got {value}")


def load_config(user_path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Packaged defaults, then the user's JSON on top"""
    conf_path = CONF_DIR / "configuration.json"
    config = _read_json(conf_path)
    logger.debug(f"Loaded {conf_path}")

    if user_path is not None:
        user = _read_json(Path(user_path))
        unknown = sorted(set(user) - set(REQUIRED_SECTIONS))
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration section")
        config = merge_sections(config, user)
        logger.info(f"Applied user configuration {user_path}")

    for section in REQUIRED_SECTIONS:
        if not isinstance(config.get(section), dict):
            raise ConfigError(section, "missing configuration section")
    _validate_numbers(config)

    logger.debug(f"Resolved configuration:\n{json.dumps(config, indent=2)}")
    return config


def selection_config(config: Dict[str, Any], **overrides) -> SelectionConfig:
    section = dict(config["selection"])
    section.update({k: v for k, v in overrides.items() if v is not None})
    return SelectionConfig.from_dict(section)


def sparse_config(config: Dict[str, Any]) -> SparsePriorConfig:
    return SparsePriorConfig.from_dict(config["sparse"])


def sim_config(config: Dict[str, Any], **overrides) -> SimConfig:
    section = dict(config["simulation"])
    section.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig.from_dict(section)


def experiment_config(config: Dict[str, Any], **overrides) -> ExperimentConfig:
    """ExperimentConfig from the experiment, simulation, selection, sc, sparse and proximal sections"""
    section = dict(config["experiment"])
    use_sparse = bool(section.pop("sparse", False))
    data = {
        **section,
        "sim": config["simulation"],
        "selection": config["selection"],
        "sparse": config["sparse"] if use_sparse else None,
        "sc_lambda": config["sc"]["ridge_lambda"],
        "stage1_lambda": config["proximal"]["stage1_lambda"],
        "instrument_cap": config["proximal"]["instrument_cap"],
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)
