# config.py
from dotenv import load_dotenv
import logging
import os

# Construct the full path to the .env file
env_path = os.path.join(os.path.dirname(__file__), '.env')
load_dotenv(dotenv_path=env_path)

logger = logging.getLogger(__name__)

_INVALID_OVERRIDES = []


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        _INVALID_OVERRIDES.append(name)
        return default


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        _INVALID_OVERRIDES.append(name)
        return default


# Output settings
REPORT_DIR = os.getenv("LAB_REPORT_DIR", os.path.join(os.path.dirname(__file__), "data", "reports"))
REPORT_FORMAT = os.getenv("LAB_REPORT_FORMAT", "tabular_text")
LOG_DIR = os.getenv("LAB_LOG_DIR", os.path.join(os.path.dirname(__file__), "logs"))
LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO").upper()
LOG_JSON = os.getenv("LAB_LOG_JSON", "false").lower() == "true"

# Integration settings
QUADRATURE_ORDER = _env_int("LAB_QUADRATURE_ORDER", 40)
QUADRATURE_MAX_DIM = 3  # tensor Gauss-Hermite up to this dimension, Monte Carlo above
MC_SAMPLES = _env_int("LAB_MC_SAMPLES", 100_000)

# Solver settings
CDF_TABLE_RADIUS = _env_float("LAB_CDF_TABLE_RADIUS", 10.0)
CDF_TABLE_POINTS = _env_int("LAB_CDF_TABLE_POINTS", 40001)
SINKHORN_MAX_ITER = _env_int("LAB_SINKHORN_MAX_ITER", 20000)
SINKHORN_TOL = _env_float("LAB_SINKHORN_TOL", 1e-7)

# Runner settings
MAX_CONCURRENT_SCENARIOS = _env_int("LAB_MAX_CONCURRENT_SCENARIOS", 4)

# Fixed numerical tolerances
CONVEXITY_TOL = 1e-8
FD_STEP = 1e-5  # scaled by max(1, |x|)
POLAR_TOL = 1e-10
INVERTIBILITY_TOL = 1e-12
JACOBIAN_CROSS_CHECK_TOL = 1e-9
NORMALIZATION_TOL = 1e-3
MIN_SET_MASS = 1e-3


def check_env_vars() -> bool:
    """Warn about environment overrides that could not be parsed.

    Returns:
        bool: True if every override parsed cleanly
    """
    for name in _INVALID_OVERRIDES:
        logger.warning(f"Ignoring unparsable value for {name}: {os.getenv(name)!r}")
    return not _INVALID_OVERRIDES
