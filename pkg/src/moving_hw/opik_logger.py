"""Opik integration for tracing scenario runs, pipeline stages and solver calls."""

from __future__ import annotations

import functools
import os
import sys
from collections.abc import Callable, Mapping
from typing import Any, TypeVar

from moving_hw.reporting import to_jsonable

try:
    import opik
    from opik import track as _opik_track

    OPIK_AVAILABLE = True
except ImportError:
    OPIK_AVAILABLE = False
    opik = None
    _opik_track = None

F = TypeVar("F", bound=Callable[..., Any])

DEFAULT_PROJECT = "moving-hw"


def tracing_enabled() -> bool:
    """Return True when Opik is importable and ``OPIK_TRACING`` is switched on."""
    return OPIK_AVAILABLE and os.environ.get("OPIK_TRACING", "false").strip().lower() in {"1", "true", "yes", "on"}


def track(name: str) -> Callable[[F], F]:
    """Trace a function with ``opik.track`` when tracing is enabled at call time."""

    def decorator(func: F) -> F:
        traced = _opik_track(name=name)(func) if OPIK_AVAILABLE else func

        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            if tracing_enabled():
                return traced(*args, **kwargs)
            return func(*args, **kwargs)

        return wrapper  # type: ignore[return-value]

    return decorator


def status(glyph: str, message: str) -> None:
    """Print one status line, unless ``MOVING_HW_QUIET`` is set."""
    if os.environ.get("MOVING_HW_QUIET"):
        return
    print(f"{glyph}  {message}", file=sys.stderr)


def log_run(
    scenario: str,
    config_summary: Mapping[str, Any],
    results: Mapping[str, Any],
    stage_results: Mapping[str, Mapping[str, Any]],
    metadata: Mapping[str, Any],
    project_name: str = DEFAULT_PROJECT,
) -> str | None:
    """Log one scenario run as an Opik trace with one span per pipeline stage.

    Returns:
        The trace id, or None when tracing is off or logging failed.
    """
    if not tracing_enabled():
        return None
    try:
        client = opik.Opik(project_name=project_name)
        trace = client.trace(
            name=f"moving-hw {scenario}",
            input=to_jsonable(config_summary),
            output=to_jsonable(results),
            metadata=to_jsonable(metadata),
            tags=["moving-hw", scenario],
        )
        for stage, residuals in stage_results.items():
            client.span(
                trace_id=trace.id,
                name=f"Stage: {stage}",
                input={"stage": stage},
                output=to_jsonable(residuals),
                tags=["stage-residuals"],
            )
        client.flush()
        status("✅", f"run logged to Opik (trace_id: {trace.id})")
        return trace.id
    except Exception as e:
        status("⚠️", f"error logging to Opik: {e}")
        return None


def log_error(error: BaseException | str, state: Any, stage: str, project_name: str = DEFAULT_PROJECT) -> None:
    """Report a failed stage; also writes an error trace when tracing is on."""
    module = getattr(error, "module", None) or "moving_hw"
    operation = getattr(error, "operation", None) or stage
    status("❌", f"{stage} failed in {module}.{operation}: {error}")
    if not tracing_enabled():
        return
    try:
        client = opik.Opik(project_name=project_name)
        trace = client.trace(
            name=f"Error in moving-hw - {stage}",
            input={"stage": stage, "scenario": getattr(getattr(state, "config", None), "scenario", "unknown")},
            output={"error": str(error), "type": type(error).__name__},
            metadata={"module": module, "operation": operation},
            tags=["error", "moving-hw"],
        )
        client.flush()
        status("❌", f"error logged to Opik (trace_id: {trace.id})")
    except Exception as e:
        status("⚠️", f"error logging error to Opik: {e}")
