# common/utils.py
from datetime import datetime
import json
import logging
import os
import zlib
from typing import Optional

import numpy as np

from config import LOG_DIR

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class CustomJSONEncoder(json.JSONEncoder):
    """JSON encoder for numpy scalars/arrays and datetimes"""
    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)


def _json_formatter() -> logging.Formatter:
    try:
        from pythonjsonlogger.json import JsonFormatter
    except ImportError:  # python-json-logger < 3
        from pythonjsonlogger.jsonlogger import JsonFormatter
    return JsonFormatter('%(asctime)s %(name)s %(levelname)s %(message)s')


def setup_logging(level=logging.INFO, log_file=None, json_format: bool = False):
    """Setup logging with proper formatting"""
    os.makedirs(LOG_DIR, exist_ok=True)

    # Get current timestamp for log filename if none provided
    if log_file is None:
        timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
        log_file = os.path.join(LOG_DIR, f'lab_run_{timestamp}.log')

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    formatter = _json_formatter() if json_format else logging.Formatter(LOG_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)

    logging.basicConfig(level=level, handlers=handlers, force=True)
    return log_file


def stable_tag(label: str) -> int:
    """Process-independent integer tag for a label (unlike hash())."""
    return zlib.crc32(label.encode('utf-8'))


def make_rng(seed: int, label: Optional[str] = None) -> np.random.Generator:
    """Counter-based generator; a label derives an independent stream from the same seed."""
    entropy = [int(seed)] if label is None else [int(seed), stable_tag(label)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
