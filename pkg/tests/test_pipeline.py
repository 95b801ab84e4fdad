import glob
import os

import pytest

from common.models import CheckStatus, RefinementReport, ReportRecord, Scenario, ScenarioKind
from runner import pipeline
from runner.checks import CHECKS, build_context
from runner.pipeline import exit_status, run, run_check, run_scenarios
from runner.scenario import parse_scenario

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "scenarios")

SINGULAR = [[-1.0, 0.0], [0.0, 0.5]]


def _operator_scenario(name="op", K=None, checks=("polar", "det2"), **parameters):
    if K is not None:
        parameters["K"] = K
    else:
        parameters.setdefault("dim", 2)
        parameters.setdefault("random_count", 5)
    return Scenario(name=name, kind=ScenarioKind.LINEAR_OPERATOR, seed=5, parameters=parameters,
                    checks=list(checks), source=f"{name}.cfg")


def _without_timing(records):
    return [r.model_dump(exclude={"wall_time"}) for r in records]


def test_run_returns_one_record_per_check_in_order():
    records = run(_operator_scenario(checks=["det2", "polar", "polar_svd_agreement"]))
    assert [r.check for r in records] == ["det2", "polar", "polar_svd_agreement"]
    assert all(r.status == CheckStatus.PASS.value for r in records)
    assert all(r.scenario == "op" for r in records)


def test_gaussian_half_width_passes_both_checks():
    scenario = Scenario(name="gaussian_half", kind=ScenarioKind.TRANSPORT_1D, seed=7,
                        parameters={"target": "gaussian", "s": 0.5}, checks=["ma_residual", "distance_identity"])
    records = run(scenario)
    assert [(r.check, r.status) for r in records] == [("ma_residual", "pass"), ("distance_identity", "pass")]


def test_scenario_tolerance_overrides_default():
    scenario = _operator_scenario(checks=["polar"])
    scenario.tolerances["polar"] = 0.5
    record = run_check(scenario, build_context(scenario), "polar")
    assert record.tolerance == 0.5
    assert CHECKS["linear_operator"]["polar"][1] == 1e-10


def test_singular_operator_becomes_fail_record():
    records = run(_operator_scenario(K=SINGULAR, checks=["polar", "change_of_variables"]))
    assert [r.status for r in records] == ["fail", "fail"]
    assert all("operator not invertible" in r.detail for r in records)
    assert records[0].observed is None


def test_negative_control_passes_when_check_is_rejected():
    scenario = _operator_scenario(K=SINGULAR, checks=["polar"], negative_controls=["polar"])
    [record] = run(scenario)
    assert record.status == CheckStatus.PASS.value
    assert record.detail.startswith("negative control rejected as expected;")
    assert "operator not invertible" in record.detail


def test_negative_control_fails_when_check_holds():
    scenario = _operator_scenario(K=[[0.2, 0.0], [0.1, -0.3]], checks=["polar"], negative_controls=["polar"])
    [record] = run(scenario)
    assert record.status == CheckStatus.FAIL.value
    assert record.detail.startswith("negative control was not rejected;")


def test_skipped_check_is_not_inverted():
    scenario = Scenario(name="wide", kind=ScenarioKind.TRANSPORT_1D, seed=1,
                        parameters={"target": "gaussian", "s": 2.0, "negative_controls": ["ma_residual"]},
                        checks=["ma_residual"])
    [record] = run(scenario)
    assert record.status == CheckStatus.SKIP.value
    assert "not H-log-concave" in record.detail


@pytest.mark.parametrize("density_ratio, jacobian_ratio, status", [
    (0.70, 0.72, "pass"),
    (0.70, 0.95, "fail"),
    (0.95, 0.70, "fail"),
])
def test_refinement_gates_on_both_error_ratios(monkeypatch, density_ratio, jacobian_ratio, status):
    def fake_study(f, m, steps, seed, estimator):
        return RefinementReport(steps=steps, density_errors=[0.02, 0.02 * density_ratio],
                                jacobian_errors=[0.03, 0.03 * jacobian_ratio], density_ratio=density_ratio,
                                jacobian_ratio=jacobian_ratio, slope=-0.5)

    monkeypatch.setattr("runner.checks.ito.refinement_study", fake_study)
    scenario = Scenario(name="refine", kind=ScenarioKind.ITO, seed=4,
                        parameters={"functional": "endpoint", "lambda": 1.0, "steps": 8, "paths": 10},
                        checks=["refinement"])
    record = run_check(scenario, build_context(scenario), "refinement")
    assert record.status == status
    assert record.observed == max(density_ratio, jacobian_ratio)
    assert "jacobian ratio" in record.detail


@pytest.mark.asyncio
async def test_parallel_run_keeps_scenario_order():
    scenarios = [_operator_scenario(name=f"op{i}", random_count=2 + i) for i in range(4)]
    records = await run_scenarios(scenarios, parallel=True, max_concurrency=3)
    assert [r.scenario for r in records] == [f"op{i}" for i in range(4) for _ in range(2)]


@pytest.mark.asyncio
async def test_parallel_and_sequential_runs_agree():
    scenarios = [_operator_scenario(name="a"), _operator_scenario(name="b", K=[[0.3]])]
    sequential = await run_scenarios(scenarios)
    parallel = await run_scenarios(scenarios, parallel=True)
    assert _without_timing(sequential) == _without_timing(parallel)


@pytest.mark.asyncio
async def test_seed_override_replaces_every_seed(monkeypatch):
    seen = []

    def fake_run(scenario):
        seen.append(scenario.seed)
        return []

    monkeypatch.setattr(pipeline, "run", fake_run)
    await run_scenarios([_operator_scenario(name="a"), _operator_scenario(name="b")], seed_override=99)
    assert seen == [99, 99]


@pytest.mark.asyncio
async def test_aborted_scenario_yields_fail_records(monkeypatch):
    real_run = pipeline.run

    def flaky_run(scenario):
        if scenario.name == "broken":
            raise RuntimeError("context construction failed")
        return real_run(scenario)

    monkeypatch.setattr(pipeline, "run", flaky_run)
    scenarios = [_operator_scenario(name="broken"), _operator_scenario(name="fine", checks=["det2"])]
    records = await run_scenarios(scenarios, parallel=True)
    assert [(r.scenario, r.check, r.status) for r in records] == [
        ("broken", "polar", "fail"),
        ("broken", "det2", "fail"),
        ("fine", "det2", "pass"),
    ]
    assert records[0].detail == "scenario aborted: context construction failed"


def test_exit_status():
    passed = ReportRecord(scenario="s", check="c", status=CheckStatus.PASS)
    skipped = ReportRecord(scenario="s", check="d", status=CheckStatus.SKIP)
    failed = ReportRecord(scenario="s", check="e", status=CheckStatus.FAIL)
    assert exit_status([]) == 0
    assert exit_status([passed, skipped]) == 0
    assert exit_status([passed, failed]) == 1


@pytest.mark.slow
@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(SCENARIO_DIR, "*.cfg"))),
                         ids=os.path.basename)
def test_shipped_scenario_has_no_failures(path):
    records = run(parse_scenario(path))
    failed = [f"{r.check}: {r.detail}" for r in records if r.status == CheckStatus.FAIL.value]
    assert failed == []
    assert exit_status(records) == 0
