# runner/pipeline.py
import asyncio
import logging
import time
from typing import List, Optional, Sequence

from common.errors import CheckSkipped
from common.models import CheckOutcome, CheckStatus, ReportRecord, Scenario
from config import MAX_CONCURRENT_SCENARIOS
from runner.checks import CHECKS, build_context

logger = logging.getLogger(__name__)


def _record(scenario: Scenario, check_id: str, status: CheckStatus, outcome: Optional[CheckOutcome] = None,
            tolerance: Optional[float] = None, detail: str = "", wall_time: float = 0.0) -> ReportRecord:
    if outcome is None:
        return ReportRecord(scenario=scenario.name, check=check_id, status=status, tolerance=tolerance,
                            detail=detail, wall_time=wall_time)
    return ReportRecord(scenario=scenario.name, check=check_id, status=status, observed=outcome.observed,
                        expected=outcome.expected, tolerance=outcome.tolerance, stderr=outcome.stderr,
                        detail=detail or outcome.detail, wall_time=wall_time)


def _invert(record: ReportRecord) -> ReportRecord:
    """Negative controls pass exactly when the underlying check fails."""
    if record.status == CheckStatus.SKIP.value:
        return record
    flipped = CheckStatus.FAIL if record.status == CheckStatus.PASS.value else CheckStatus.PASS
    verdict = "rejected as expected" if flipped == CheckStatus.PASS else "was not rejected"
    return record.model_copy(update={"status": flipped.value, "detail": f"negative control {verdict}; {record.detail}"})


def run_check(scenario: Scenario, context, check_id: str) -> ReportRecord:
    """Run one check of a scenario; errors become fail records."""
    fn, default_tol = CHECKS[scenario.kind][check_id]
    tol = scenario.tolerances.get(check_id, default_tol)
    start = time.perf_counter()
    try:
        outcome = fn(context, tol)
        status = CheckStatus.PASS if outcome.passed else CheckStatus.FAIL
        record = _record(scenario, check_id, status, outcome, wall_time=time.perf_counter() - start)
    except CheckSkipped as e:
        logger.warning(f"{scenario.name}/{check_id} skipped: {e}")
        record = _record(scenario, check_id, CheckStatus.SKIP, tolerance=tol, detail=str(e),
                         wall_time=time.perf_counter() - start)
    except Exception as e:
        logger.error(f"{scenario.name}/{check_id} raised {type(e).__name__}: {e}")
        record = _record(scenario, check_id, CheckStatus.FAIL, tolerance=tol, detail=str(e) or type(e).__name__,
                         wall_time=time.perf_counter() - start)
    if check_id in scenario.param("negative_controls", []):
        record = _invert(record)
    logger.info(f"{scenario.name}/{check_id}: {record.status} ({record.wall_time:.2f}s)")
    return record


def run(scenario: Scenario) -> List[ReportRecord]:
    """Execute every check of a scenario in the order listed.

    Args:
        scenario: A validated scenario

    Returns:
        One ReportRecord per check
    """
    logger.info(f"Running scenario {scenario.name} ({scenario.kind}, seed {scenario.seed})")
    context = build_context(scenario)
    records = [run_check(scenario, context, check_id) for check_id in scenario.checks]
    failed = sum(r.status == CheckStatus.FAIL.value for r in records)
    logger.info(f"Scenario {scenario.name}: {len(records) - failed}/{len(records)} checks without failure")
    return records


async def _run_limited(scenario: Scenario, semaphore: asyncio.Semaphore) -> List[ReportRecord]:
    async with semaphore:
        return await asyncio.to_thread(run, scenario)


async def run_scenarios(scenarios: Sequence[Scenario], parallel: bool = False,
                        max_concurrency: int = MAX_CONCURRENT_SCENARIOS,
                        seed_override: Optional[int] = None) -> List[ReportRecord]:
    """Run scenarios sequentially or, with parallel=True, concurrently in worker threads.

    Records are returned in scenario order whatever the completion order.
    """
    if seed_override is not None:
        scenarios = [s.model_copy(update={"seed": seed_override}) for s in scenarios]
    semaphore = asyncio.Semaphore(max_concurrency if parallel else 1)
    tasks = [_run_limited(s, semaphore) for s in scenarios]
    results = await asyncio.gather(*tasks, return_exceptions=True)

    records: List[ReportRecord] = []
    for scenario, result in zip(scenarios, results):
        if isinstance(result, BaseException):
            # context construction failed before any check ran
            logger.error(f"Scenario {scenario.name} aborted: {result}")
            records.extend(_record(scenario, check_id, CheckStatus.FAIL, detail=f"scenario aborted: {result}")
                           for check_id in scenario.checks)
            continue
        records.extend(result)
    return records


def exit_status(records: Sequence[ReportRecord]) -> int:
    """0 when no record failed, 1 otherwise."""
    return int(any(r.status == CheckStatus.FAIL.value for r in records))
