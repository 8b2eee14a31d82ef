"""Routing logic for stage transitions."""

from typing import Literal

from moving_hw.state import RunState

ScenarioNode = Literal["verify_geometry", "decompose", "differentiate", "prepare_periodic", "estimate_constant", "write_artifacts", "finalize"]

_SCENARIO_ENTRY = {
    "verify-geometry": "verify_geometry",
    "decompose": "decompose",
    "differentiate": "differentiate",
    "solve-periodic": "prepare_periodic",
    "estimate-constant": "estimate_constant",
}


def route_after_load(state: RunState) -> ScenarioNode:
    """Route from problem loading to the first node of the selected scenario.

    Configuration errors skip artifact writing; other load failures still get a report.
    """
    if state.config_error:
        return "finalize"
    if state.failed:
        return "write_artifacts"
    return _SCENARIO_ENTRY[state.config.scenario]


def route_after_prepare(state: RunState) -> Literal["check_smallness", "write_artifacts"]:
    """Skip the smallness check when the problem could not be built."""
    if state.failed:
        return "write_artifacts"
    return "check_smallness"


def route_after_smallness(state: RunState) -> Literal["poincare_iteration", "write_artifacts"]:
    """Start the fixed-point search only inside the small-data regime."""
    if state.failed or state.iteration is None:
        return "write_artifacts"
    return "poincare_iteration"


def route_after_iteration(state: RunState) -> Literal["poincare_iteration", "reintegrate", "write_artifacts"]:
    """Loop until the iterate converges or the budget is spent."""
    if state.failed:
        return "write_artifacts"
    if state.iteration.converged:
        return "reintegrate"
    return "poincare_iteration"
