"""
Scenario files: one experiment per file, `key = value` per line.

    # 1D Gaussian target with standard deviation 0.5
    name = gaussian_half
    kind = transport_1d
    seed = 7
    target = gaussian
    s = 0.5
    checks = ["ma_residual", "distance_identity"]
    tolerance.ma_residual = 1e-8

Values are JSON (numbers, strings, booleans, row-major nested arrays for
matrices); anything that does not parse as JSON is kept as a bare string.
Keys `tolerance.<check>` override a check's default tolerance. Every other key
is a kind parameter.
"""
import json
import logging
import os
from typing import Any, Dict, List, Tuple

import numpy as np

from common.errors import ScenarioValidationError
from common.models import DriftEstimator, Scenario, ScenarioKind
from runner.checks import CHECKS

logger = logging.getLogger(__name__)

RESERVED_KEYS = {"name", "kind", "seed", "checks"}
TOLERANCE_PREFIX = "tolerance."

TARGETS = {"gaussian", "indicator", "uniform", "quartic"}
FUNCTIONALS = {"endpoint", "increments", "quartic"}
TARGET_PARAMS = {"gaussian": [], "indicator": ["lower", "upper"], "uniform": [], "quartic": ["a"]}
FUNCTIONAL_PARAMS = {"endpoint": ["lambda"], "increments": ["lambda"], "quartic": ["a"]}
MATRIX_PARAMS = {"cov", "K"}
INTEGER_PARAMS = {"dim", "steps", "paths", "atoms", "instances", "random_count", "resolution",
                  "mc_samples", "ks_samples", "sample_size", "quadrature_order"}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def read_scenario_file(path: str) -> Tuple[Dict[str, Any], List[str]]:
    """Raw key-value pairs of a scenario file plus line-level errors."""
    values: Dict[str, Any] = {}
    errors: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
                continue
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if not key:
                errors.append(f"line {lineno}: empty key")
                continue
            if key in values:
                errors.append(f"line {lineno}: duplicate key '{key}'")
                continue
            if raw.startswith("[") and not isinstance(_parse_value(raw), list):
                errors.append(f"line {lineno}: malformed array for '{key}'")
                continue
            values[key] = _parse_value(raw)
    return values, errors


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_matrix(key: str, value) -> List[str]:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        return [f"malformed matrix '{key}': entries must be numbers in equal-length rows"]
    if arr.ndim == 0:
        return []
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        return [f"malformed matrix '{key}': expected a square row-major array, got shape {arr.shape}"]
    if not np.all(np.isfinite(arr)):
        return [f"malformed matrix '{key}': entries must be finite"]
    return []


def _check_vector(key: str, value) -> List[str]:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        return [f"malformed vector '{key}': entries must be numbers"]
    if arr.ndim > 1:
        return [f"malformed vector '{key}': expected a flat array, got shape {arr.shape}"]
    return []


def _kind_errors(kind: ScenarioKind, params: Dict[str, Any]) -> List[str]:
    errors = []

    def need(*keys):
        for key in keys:
            if key not in params:
                errors.append(f"missing parameter '{key}' for kind {kind.value}")

    if kind in (ScenarioKind.TRANSPORT_1D, ScenarioKind.TRANSPORT_GRID):
        need("target")
        target = params.get("target")
        if target is not None and target not in TARGETS:
            errors.append(f"unknown target '{target}' (expected one of {sorted(TARGETS)})")
        elif target is not None:
            need(*TARGET_PARAMS[target])
            if target == "gaussian" and kind == ScenarioKind.TRANSPORT_1D and not ({"s", "mean"} & params.keys()):
                errors.append("missing parameter 's' or 'mean' for a 1D gaussian target")
            if target == "gaussian" and kind == ScenarioKind.TRANSPORT_GRID:
                need("cov")
            if target in ("uniform", "quartic") and kind == ScenarioKind.TRANSPORT_GRID:
                need("dim")
    elif kind == ScenarioKind.TRANSPORT_GAUSSIAN:
        need("cov")
    elif kind == ScenarioKind.LINEAR_OPERATOR:
        if "K" not in params and not {"dim", "random_count"} <= params.keys():
            errors.append("missing parameter 'K' (or 'dim' and 'random_count') for kind linear_operator")
    elif kind == ScenarioKind.POLAR_DISCRETE:
        need("atoms", "dim", "instances")
    elif kind == ScenarioKind.ITO:
        need("functional", "steps", "paths")
        functional = params.get("functional")
        if functional is not None and functional not in FUNCTIONALS:
            errors.append(f"unknown functional '{functional}' (expected one of {sorted(FUNCTIONALS)})")
        elif functional is not None:
            need(*FUNCTIONAL_PARAMS[functional])
        estimator = params.get("estimator")
        if estimator is not None and estimator not in {e.value for e in DriftEstimator}:
            errors.append(f"unknown estimator '{estimator}'")

    for key, value in params.items():
        if key in MATRIX_PARAMS:
            errors.extend(_check_matrix(key, value))
        elif key in ("lower", "upper", "mean"):
            errors.extend(_check_vector(key, value))
        elif key in INTEGER_PARAMS and not (isinstance(value, int) and not isinstance(value, bool) and value > 0):
            errors.append(f"parameter '{key}' must be a positive integer, got {value!r}")
        elif key in ("s", "lambda", "a") and not _is_number(value):
            errors.append(f"parameter '{key}' must be a number, got {value!r}")
    return errors


def validate_scenario(values: Dict[str, Any], source: str) -> Tuple[Scenario, List[str]]:
    """Build a Scenario from raw values, collecting every validation error."""
    errors: List[str] = []
    name = values.get("name") or os.path.splitext(os.path.basename(source))[0]

    kind = None
    raw_kind = values.get("kind")
    if raw_kind is None:
        errors.append("kind required")
    else:
        try:
            kind = ScenarioKind(raw_kind)
        except ValueError:
            errors.append(f"unknown kind '{raw_kind}' (expected one of {[k.value for k in ScenarioKind]})")

    seed = values.get("seed")
    if seed is None:
        errors.append("seed required")
    elif not (isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2 ** 64):
        errors.append(f"seed must be an integer in [0, 2^64), got {seed!r}")
        seed = None

    checks = values.get("checks", [])
    if not isinstance(checks, list) or not all(isinstance(c, str) for c in checks):
        errors.append("checks must be an array of check ids")
        checks = []
    elif not checks:
        errors.append("checks must name at least one check")

    tolerances: Dict[str, float] = {}
    params: Dict[str, Any] = {}
    for key, value in values.items():
        if key in RESERVED_KEYS:
            continue
        if key.startswith(TOLERANCE_PREFIX):
            check_id = key[len(TOLERANCE_PREFIX):]
            if not _is_number(value):
                errors.append(f"tolerance for '{check_id}' must be a number, got {value!r}")
            elif check_id not in checks:
                errors.append(f"tolerance given for check '{check_id}' which is not listed in checks")
            else:
                tolerances[check_id] = float(value)
            continue
        params[key] = value

    if kind is not None:
        known = CHECKS[kind.value]
        for check_id in checks:
            if check_id not in known:
                errors.append(f"unknown check id '{check_id}' for kind {kind.value}")
        errors.extend(_kind_errors(kind, params))

    controls = params.get("negative_controls", [])
    if not isinstance(controls, list) or any(c not in checks for c in controls):
        errors.append(f"negative_controls must list checks of this scenario, got {controls!r}")

    if errors:
        return None, errors
    return Scenario(name=str(name), kind=kind, seed=seed, parameters=params, checks=checks,
                    tolerances=tolerances, source=source), []


def parse_scenario(path: str) -> Scenario:
    """Read and validate a scenario file.

    Raises:
        FileNotFoundError: if the file does not exist
        ScenarioValidationError: carrying every problem found, not just the first
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Scenario file not found: {path}")
    values, errors = read_scenario_file(path)
    scenario, more = validate_scenario(values, path)
    errors.extend(more)
    if errors:
        raise ScenarioValidationError(path, errors)
    logger.info(f"Loaded scenario {scenario.name} ({scenario.kind}) with {len(scenario.checks)} checks")
    return scenario
