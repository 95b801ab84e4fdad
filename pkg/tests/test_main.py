import os

import pytest

from main import EXIT_CONFIG_ERROR, load_scenarios, parse_args, run_command

OPERATOR_LINES = ("kind = linear_operator", "seed = 3", "K = [[0.2, 0.0], [0.1, -0.3]]")


def test_parse_args_defaults():
    args = parse_args(["run", "a.cfg", "b.cfg"])
    assert args.command == "run"
    assert args.scenarios == ["a.cfg", "b.cfg"]
    assert not args.parallel
    assert args.seed_override is None


def test_parse_args_requires_subcommand():
    with pytest.raises(SystemExit):
        parse_args([])


def test_load_scenarios_collects_failures(scenario_file, tmp_path):
    good = scenario_file("good", *OPERATOR_LINES, 'checks = ["det2"]')
    bad = scenario_file("bad", "kind = linear_operator", 'checks = ["det2"]')
    scenarios, failures = load_scenarios([good, bad, os.path.join(tmp_path, "missing.cfg")])
    assert [s.name for s in scenarios] == ["good"]
    assert len(failures) == 2


@pytest.mark.asyncio
async def test_run_writes_report(scenario_file, tmp_path):
    path = scenario_file("ops", *OPERATOR_LINES, 'checks = ["polar", "det2"]')
    report_dir = os.path.join(tmp_path, "out")
    status = await run_command(parse_args(["run", path, "--report-dir", report_dir, "--parallel"]))
    assert status == 0
    with open(os.path.join(report_dir, "lab_report.txt"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert [line.split("\t")[1:3] for line in lines[1:]] == [["polar", "pass"], ["det2", "pass"]]


@pytest.mark.asyncio
async def test_failed_check_exits_one(scenario_file, tmp_path):
    path = scenario_file("singular", "kind = linear_operator", "seed = 3", "K = [[-1.0, 0.0], [0.0, 0.5]]",
                         'checks = ["polar"]')
    status = await run_command(parse_args(["run", path, "--report-dir", str(tmp_path),
                                           "--format", "structured_records"]))
    assert status == 1
    assert os.path.exists(os.path.join(tmp_path, "lab_report.jsonl"))


@pytest.mark.asyncio
async def test_invalid_scenario_runs_nothing(scenario_file, tmp_path):
    good = scenario_file("good", *OPERATOR_LINES, 'checks = ["det2"]')
    bad = scenario_file("bad", *OPERATOR_LINES, 'checks = ["talagrand"]')
    report_dir = os.path.join(tmp_path, "out")
    status = await run_command(parse_args(["run", good, bad, "--report-dir", report_dir]))
    assert status == EXIT_CONFIG_ERROR
    assert not os.path.exists(report_dir)


@pytest.mark.asyncio
async def test_out_of_range_seed_override(scenario_file, tmp_path):
    path = scenario_file("ops", *OPERATOR_LINES, 'checks = ["det2"]')
    args = parse_args(["run", path, "--report-dir", str(tmp_path), "--seed-override", "-1"])
    assert await run_command(args) == EXIT_CONFIG_ERROR


@pytest.mark.asyncio
async def test_unwritable_report_dir(scenario_file, tmp_path):
    path = scenario_file("ops", *OPERATOR_LINES, 'checks = ["det2"]')
    blocked = os.path.join(tmp_path, "blocked")
    with open(blocked, "w", encoding="utf-8") as f:
        f.write("not a directory")
    assert await run_command(parse_args(["run", path, "--report-dir", blocked])) == EXIT_CONFIG_ERROR
