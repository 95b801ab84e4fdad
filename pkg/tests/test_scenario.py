import glob
import os

import pytest

from common.errors import ScenarioValidationError
from common.models import ScenarioKind
from runner.scenario import parse_scenario, read_scenario_file

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "scenarios")


def test_parse_valid_scenario(scenario_file):
    path = scenario_file(
        "half",
        "# 1D Gaussian target",
        "name = gaussian_half",
        "kind = transport_1d",
        "seed = 7",
        "target = gaussian",
        "s = 0.5",
        'checks = ["ma_residual", "cost"]',
        "tolerance.cost = 1e-4",
    )
    scenario = parse_scenario(path)
    assert scenario.name == "gaussian_half"
    assert scenario.kind == ScenarioKind.TRANSPORT_1D.value
    assert scenario.seed == 7
    assert scenario.checks == ["ma_residual", "cost"]
    assert scenario.tolerances == {"cost": 1e-4}
    assert scenario.param("s") == 0.5
    assert scenario.param("target") == "gaussian"
    assert scenario.source == path


def test_name_defaults_to_file_name(scenario_file):
    path = scenario_file("unnamed", "kind = linear_operator", "seed = 1", "K = [[0.1]]", 'checks = ["det2"]')
    assert parse_scenario(path).name == "unnamed"


def test_matrix_parameter_is_parsed(scenario_file):
    path = scenario_file("op", "kind = linear_operator", "seed = 1", "K = [[0.1, 0.0], [0.2, -0.3]]",
                         'checks = ["polar"]')
    assert parse_scenario(path).param("K") == [[0.1, 0.0], [0.2, -0.3]]


def test_missing_seed(scenario_file):
    path = scenario_file("noseed", "kind = linear_operator", "K = [[0.1]]", 'checks = ["det2"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert "seed required" in excinfo.value.errors


def test_seed_out_of_range(scenario_file):
    path = scenario_file("bigseed", "kind = linear_operator", "seed = -3", "K = [[0.1]]", 'checks = ["det2"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert any(e.startswith("seed must be an integer") for e in excinfo.value.errors)


def test_unknown_check_id(scenario_file):
    path = scenario_file("badcheck", "kind = linear_operator", "seed = 1", "K = [[0.1]]",
                         'checks = ["det2", "talagrand"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert excinfo.value.errors == ["unknown check id 'talagrand' for kind linear_operator"]


def test_unknown_kind(scenario_file):
    path = scenario_file("badkind", "kind = heat_flow", "seed = 1", 'checks = ["cost"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert any(e.startswith("unknown kind 'heat_flow'") for e in excinfo.value.errors)


def test_malformed_matrix(scenario_file):
    path = scenario_file("ragged", "kind = transport_gaussian", "seed = 1", "cov = [[1.0, 0.0], [0.0]]",
                         'checks = ["cost"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert any(e.startswith("malformed matrix 'cov'") for e in excinfo.value.errors)


def test_non_square_matrix(scenario_file):
    path = scenario_file("wide", "kind = transport_gaussian", "seed = 1", "cov = [[1.0, 0.0, 0.0]]",
                         'checks = ["cost"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert any("expected a square row-major array" in e for e in excinfo.value.errors)


def test_every_error_is_collected(scenario_file):
    path = scenario_file(
        "many",
        "kind = transport_1d",
        "this line has no separator",
        "target = gaussian",
        "steps = 0",
        "checks = []",
    )
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    errors = excinfo.value.errors
    assert any(e.startswith("line 2: expected 'key = value'") for e in errors)
    assert "seed required" in errors
    assert "checks must name at least one check" in errors
    assert "missing parameter 's' or 'mean' for a 1D gaussian target" in errors
    assert any(e.startswith("parameter 'steps' must be a positive integer") for e in errors)
    assert f"{len(errors)} validation error(s)" in str(excinfo.value)


def test_tolerance_for_unlisted_check(scenario_file):
    path = scenario_file("tol", "kind = linear_operator", "seed = 1", "K = [[0.1]]", 'checks = ["det2"]',
                         "tolerance.polar = 1e-6")
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert excinfo.value.errors == ["tolerance given for check 'polar' which is not listed in checks"]


def test_missing_kind_parameters(scenario_file):
    path = scenario_file("ito", "kind = ito", "seed = 1", "functional = endpoint", 'checks = ["drift_value"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    errors = excinfo.value.errors
    assert "missing parameter 'steps' for kind ito" in errors
    assert "missing parameter 'paths' for kind ito" in errors
    assert "missing parameter 'lambda' for kind ito" in errors


def test_negative_controls_must_name_listed_checks(scenario_file):
    path = scenario_file("controls", "kind = linear_operator", "seed = 1", "K = [[0.1]]", 'checks = ["det2"]',
                         'negative_controls = ["polar"]')
    with pytest.raises(ScenarioValidationError) as excinfo:
        parse_scenario(path)
    assert any(e.startswith("negative_controls must list checks") for e in excinfo.value.errors)


def test_read_scenario_file_line_errors(scenario_file):
    path = scenario_file("lines", "seed = 1", "seed = 2", "checks = [\"det2\"", "= 4")
    values, errors = read_scenario_file(path)
    assert values == {"seed": 1}
    assert errors == [
        "line 2: duplicate key 'seed'",
        "line 3: malformed array for 'checks'",
        "line 4: empty key",
    ]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="Scenario file not found"):
        parse_scenario(os.path.join(tmp_path, "absent.cfg"))


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(SCENARIO_DIR, "*.cfg"))),
                         ids=os.path.basename)
def test_shipped_scenarios_validate(path):
    scenario = parse_scenario(path)
    assert scenario.name == os.path.splitext(os.path.basename(path))[0]
