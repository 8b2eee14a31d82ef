from types import SimpleNamespace

import pytest

from moving_hw.config import parse_config
from moving_hw.router import route_after_iteration, route_after_load, route_after_prepare, route_after_smallness
from moving_hw.state import RunState


@pytest.mark.parametrize(
    ("scenario", "node"),
    [
        ("verify-geometry", "verify_geometry"),
        ("decompose", "decompose"),
        ("differentiate", "differentiate"),
        ("solve-periodic", "prepare_periodic"),
        ("estimate-constant", "estimate_constant"),
    ],
)
def test_route_after_load_picks_scenario_entry(scenario, node) -> None:
    state = RunState(config=parse_config(f"scenario = {scenario}\n"))
    assert route_after_load(state) == node


def test_config_errors_skip_artifacts() -> None:
    state = RunState(error="ValidationError: bad", config_error=True)
    assert route_after_load(state) == "finalize"
    state = RunState(error="InvalidMesh: broken")
    assert route_after_load(state) == "write_artifacts"


def test_periodic_routes() -> None:
    assert route_after_prepare(RunState()) == "check_smallness"
    assert route_after_prepare(RunState(error="x")) == "write_artifacts"
    assert route_after_smallness(RunState()) == "write_artifacts"
    running = SimpleNamespace(converged=False)
    assert route_after_smallness(RunState(iteration=running)) == "poincare_iteration"
    assert route_after_iteration(RunState(iteration=running)) == "poincare_iteration"
    assert route_after_iteration(RunState(iteration=SimpleNamespace(converged=True))) == "reintegrate"
    assert route_after_iteration(RunState(iteration=running, error="NoConvergence")) == "write_artifacts"
