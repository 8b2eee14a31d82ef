"""Define the runtime settings of a scenario run."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


@dataclass(kw_only=True)
class Context:
    """Runtime settings that are not part of the scenario file."""

    output_dir: str = field(
        default="",
        metadata={"description": "Directory for report.json, CSV ledgers and VTK snapshots. Empty means the scenario's output.dir."},
    )

    seed: int = field(
        default=0,
        metadata={"description": "Seed of the counter-based generator used for random probes and starts."},
    )

    strict: bool = field(
        default=False,
        metadata={"description": "Treat the decomposition input as solenoidal and fail on a divergence defect."},
    )

    opik_tracing: bool = field(
        default=False,
        metadata={"description": "Log runs, stages and solver calls to Opik."},
    )

    opik_project: str = field(
        default="moving-hw",
        metadata={"description": "Opik project that receives the traces."},
    )

    max_workers: int = field(
        default=1,
        metadata={"description": "Thread pool size for per-component solves. 1 keeps every reduction sequential."},
    )

    def __post_init__(self) -> None:
        """Fetch env vars for attributes that were not passed as args."""
        for f in fields(self):
            if not f.init:
                continue

            if getattr(self, f.name) == f.default:
                raw = os.environ.get(f.name.upper())
                if raw is None:
                    continue
                if isinstance(f.default, bool):
                    setattr(self, f.name, raw.strip().lower() in {"1", "true", "yes", "on"})
                elif isinstance(f.default, int):
                    setattr(self, f.name, int(raw))
                else:
                    setattr(self, f.name, raw)
