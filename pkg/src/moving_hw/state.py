"""State structures for the scenario pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from moving_hw.config import RunConfig
from moving_hw.galerkin_periodic import PeriodicProblem, PoincareIteration, SmallnessReport
from moving_hw.mesh_disc import ReferenceMesh
from moving_hw.motions import DomainMotion


@dataclass
class Snapshot:
    """One VTK snapshot queued for writing."""

    name: str
    title: str
    point_data: dict[str, Any] = field(default_factory=dict)
    cell_data: dict[str, Any] = field(default_factory=dict)
    points: Any = None


@dataclass
class InputState:
    """Input state: the scenario text or the path of a scenario file."""

    config_text: str = ""
    config_path: str = ""


@dataclass
class RunState(InputState):
    """Complete state of one scenario run."""

    config: RunConfig | None = None
    mesh: ReferenceMesh | None = None
    motion: DomainMotion | None = None

    # solve-periodic
    problem: PeriodicProblem | None = None
    smallness: SmallnessReport | None = None
    iteration: PoincareIteration | None = None

    # results: section → scalar values; tables: CSV name → rows
    results: dict[str, dict[str, Any]] = field(default_factory=dict)
    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    snapshots: list[Snapshot] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)

    # failure bookkeeping
    error: str | None = None
    error_type: str | None = None
    failed_stage: str | None = None
    config_error: bool = False

    @property
    def failed(self) -> bool:
        """True when a stage recorded an error."""
        return self.error is not None
