"""Scenario pipeline as a LangGraph state graph.

Flow:
- load_problem parses the scenario and builds the mesh and the motion
- one scenario branch runs (solve-periodic loops over poincare_iteration)
- write_artifacts writes CSV, VTK, report.json and summary.md
- finalize logs the run to Opik
"""

from langgraph.graph import END, StateGraph

from moving_hw.context import Context
from moving_hw.nodes import (
    check_smallness_node,
    decompose_node,
    differentiate_node,
    estimate_constant_node,
    finalize_node,
    load_problem_node,
    poincare_iteration_node,
    prepare_periodic_node,
    reintegrate_node,
    verify_geometry_node,
    write_artifacts_node,
)
from moving_hw.opik_logger import DEFAULT_PROJECT, OPIK_AVAILABLE, tracing_enabled
from moving_hw.router import route_after_iteration, route_after_load, route_after_prepare, route_after_smallness
from moving_hw.state import InputState, RunState

# Covers the largest allowed galerkin.max_iters plus the fixed stages.
RECURSION_LIMIT = 520


def create_graph():
    """Create the scenario graph.

    Returns:
        Compiled StateGraph
    """
    workflow = StateGraph(RunState, input_schema=InputState, context_schema=Context)

    workflow.add_node("load_problem", load_problem_node)
    workflow.add_node("verify_geometry", verify_geometry_node)
    workflow.add_node("decompose", decompose_node)
    workflow.add_node("differentiate", differentiate_node)
    workflow.add_node("estimate_constant", estimate_constant_node)
    workflow.add_node("prepare_periodic", prepare_periodic_node)
    workflow.add_node("check_smallness", check_smallness_node)
    workflow.add_node("poincare_iteration", poincare_iteration_node)
    workflow.add_node("reintegrate", reintegrate_node)
    workflow.add_node("write_artifacts", write_artifacts_node)
    workflow.add_node("finalize", finalize_node)

    workflow.set_entry_point("load_problem")

    workflow.add_conditional_edges(
        "load_problem",
        route_after_load,
        {
            "verify_geometry": "verify_geometry",
            "decompose": "decompose",
            "differentiate": "differentiate",
            "prepare_periodic": "prepare_periodic",
            "estimate_constant": "estimate_constant",
            "write_artifacts": "write_artifacts",
            "finalize": "finalize",
        },
    )

    # === SINGLE-STAGE SCENARIOS ===
    workflow.add_edge("verify_geometry", "write_artifacts")
    workflow.add_edge("decompose", "write_artifacts")
    workflow.add_edge("differentiate", "write_artifacts")
    workflow.add_edge("estimate_constant", "write_artifacts")

    # === SOLVE-PERIODIC ===
    workflow.add_conditional_edges(
        "prepare_periodic",
        route_after_prepare,
        {"check_smallness": "check_smallness", "write_artifacts": "write_artifacts"},
    )
    workflow.add_conditional_edges(
        "check_smallness",
        route_after_smallness,
        {"poincare_iteration": "poincare_iteration", "write_artifacts": "write_artifacts"},
    )
    workflow.add_conditional_edges(
        "poincare_iteration",
        route_after_iteration,
        {
            "poincare_iteration": "poincare_iteration",
            "reintegrate": "reintegrate",
            "write_artifacts": "write_artifacts",
        },
    )
    workflow.add_edge("reintegrate", "write_artifacts")

    # === OUTPUT ===
    workflow.add_edge("write_artifacts", "finalize")
    workflow.add_edge("finalize", END)

    return workflow.compile(name="Moving HW")


def tracing_callbacks() -> list:
    """Opik tracer callbacks when tracing is switched on."""
    if not (OPIK_AVAILABLE and tracing_enabled()):
        return []
    from opik.integrations.langchain import OpikTracer

    return [OpikTracer(project_name=DEFAULT_PROJECT)]


graph = create_graph().with_config({"callbacks": tracing_callbacks(), "recursion_limit": RECURSION_LIMIT})
