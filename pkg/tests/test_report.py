import json
import os

import pytest

from common.errors import ReportWriteError
from common.models import CheckStatus, ReportFormat, ReportRecord, Scenario, ScenarioKind
from runner.pipeline import run
from runner.report import FIELDS, SCHEMA, emit_report, format_float, render_structured, render_tabular

HEADER = "scenario\tcheck\tstatus\tobserved\texpected\ttolerance\tstderr\tdetail"


@pytest.fixture
def records():
    return [
        ReportRecord(scenario="gaussian_half", check="cost", status=CheckStatus.PASS, observed=0.25000000001234,
                     expected=0.25, tolerance=1e-6, detail="solver cdf_1d", wall_time=0.5),
        ReportRecord(scenario="gaussian_half", check="caffarelli", status=CheckStatus.SKIP, tolerance=1e-6,
                     detail="not\tH-log-concave\n here"),
    ]


def test_format_float():
    assert format_float(0.1 + 0.2) == "0.3"
    assert format_float(1.0 / 3.0) == "0.3333333333"
    assert format_float(float("inf")) == "inf"
    assert format_float(None) is None


def test_empty_report_is_header_only():
    assert render_tabular([]) == HEADER + "\n"
    assert render_structured([]) == json.dumps({"schema": SCHEMA, "fields": FIELDS}) + "\n"


def test_render_tabular(records):
    lines = render_tabular(records).splitlines()
    assert lines[0] == HEADER
    assert lines[1] == "gaussian_half\tcost\tpass\t0.25\t0.25\t1e-06\t\tsolver cdf_1d"
    # whitespace in details is collapsed so every row keeps its columns
    assert lines[2] == "gaussian_half\tcaffarelli\tskip\t\t\t1e-06\t\tnot H-log-concave here"


def test_render_tabular_with_timings(records):
    lines = render_tabular(records, timings=True).splitlines()
    assert lines[0] == HEADER + "\twall_time"
    assert lines[1].endswith("\t0.5")


def test_render_structured(records):
    lines = render_structured(records).splitlines()
    assert json.loads(lines[0]) == {"schema": SCHEMA, "fields": FIELDS}
    first = json.loads(lines[1])
    assert list(first) == FIELDS
    assert first["observed"] == 0.25
    assert first["stderr"] is None
    assert "wall_time" not in first


def test_non_finite_values_are_strings():
    record = ReportRecord(scenario="s", check="c", status=CheckStatus.FAIL, observed=float("nan"),
                          expected=float("inf"))
    row = json.loads(render_structured([record]).splitlines()[1])
    assert row["observed"] == "nan"
    assert row["expected"] == "inf"
    assert render_tabular([record]).splitlines()[1].split("\t")[3:5] == ["nan", "inf"]


def test_emit_report_writes_each_format(records, tmp_path):
    text_path = emit_report(records, ReportFormat.TABULAR_TEXT, str(tmp_path / "reports"))
    json_path = emit_report(records, "structured_records", str(tmp_path / "reports"))
    assert os.path.basename(text_path) == "lab_report.txt"
    assert os.path.basename(json_path) == "lab_report.jsonl"
    with open(text_path, encoding="utf-8") as f:
        assert f.read() == render_tabular(records)
    with open(json_path, encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 3


def test_reruns_are_byte_identical(tmp_path):
    scenario = Scenario(name="ops", kind=ScenarioKind.LINEAR_OPERATOR, seed=17,
                        parameters={"dim": 3, "random_count": 10}, checks=["polar", "det2", "right_inverse"])
    contents = []
    for attempt in ("first", "second"):
        path = emit_report(run(scenario), ReportFormat.STRUCTURED_RECORDS, str(tmp_path / attempt))
        with open(path, "rb") as f:
            contents.append(f.read())
    assert contents[0] == contents[1]


def test_unwritable_destination_raises(records, tmp_path):
    blocked = tmp_path / "blocked"
    blocked.write_text("a file where the report directory should be")
    with pytest.raises(ReportWriteError, match="Cannot write report"):
        emit_report(records, ReportFormat.TABULAR_TEXT, str(blocked))
