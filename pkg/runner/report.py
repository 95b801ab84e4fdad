# runner/report.py
"""
Report files: one per run, written in scenario order.

tabular_text is tab-separated with a header line. structured_records is
line-delimited JSON: a schema line, then one object per record with the
field order fixed. Floats are rendered with 10 significant digits so reruns
with the same seeds are byte-identical; wall-time appears only on request.
"""
import json
import logging
import math
import os
from typing import Iterable, List, Optional, Sequence

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from common.errors import ReportWriteError
from common.models import ReportFormat, ReportRecord
from common.utils import CustomJSONEncoder
from config import REPORT_DIR

logger = logging.getLogger(__name__)

FIELDS = ["scenario", "check", "status", "observed", "expected", "tolerance", "stderr", "detail"]
TIMING_FIELD = "wall_time"
SCHEMA = "transport-lab-report/1"
FILE_NAMES = {
    ReportFormat.TABULAR_TEXT: "lab_report.txt",
    ReportFormat.STRUCTURED_RECORDS: "lab_report.jsonl",
}


def _fields(timings: bool) -> List[str]:
    return FIELDS + [TIMING_FIELD] if timings else list(FIELDS)


def format_float(value: Optional[float]) -> Optional[str]:
    if value is None:
        return None
    return format(float(value), '.10g')


def _json_value(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            return format_float(value)
        return float(format_float(value))
    return value


def render_tabular(records: Iterable[ReportRecord], timings: bool = False) -> str:
    fields = _fields(timings)
    lines = ["\t".join(fields)]
    for record in records:
        row = record.model_dump()
        cells = []
        for name in fields:
            value = row[name]
            cells.append(format_float(value) or "" if isinstance(value, float) or value is None else str(value))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def render_structured(records: Iterable[ReportRecord], timings: bool = False) -> str:
    fields = _fields(timings)
    lines = [json.dumps({"schema": SCHEMA, "fields": fields})]
    for record in records:
        row = record.model_dump()
        ordered = {name: _json_value(row[name]) for name in fields}
        lines.append(json.dumps(ordered, cls=CustomJSONEncoder, ensure_ascii=False))
    return "\n".join(lines) + "\n"


@retry(stop=stop_after_attempt(3), wait=wait_fixed(0.2), retry=retry_if_exception_type(OSError), reraise=True)
def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def emit_report(records: Sequence[ReportRecord], fmt: ReportFormat = ReportFormat.TABULAR_TEXT,
                report_dir: str = REPORT_DIR, timings: bool = False) -> str:
    """Write the report for a run.

    Args:
        records: Records in scenario order
        fmt: tabular_text or structured_records
        report_dir: Destination directory, created when missing
        timings: Include each record's wall-time

    Returns:
        Path of the written file

    Raises:
        ReportWriteError: if the destination stays unwritable after retries
    """
    fmt = ReportFormat(fmt)
    text = render_tabular(records, timings) if fmt == ReportFormat.TABULAR_TEXT else render_structured(records, timings)
    path = os.path.join(report_dir, FILE_NAMES[fmt])
    try:
        _write(path, text)
    except OSError as e:
        raise ReportWriteError(f"Cannot write report to {path}: {e}") from e
    logger.info(f"Wrote {len(records)} records to {path}")
    return path
