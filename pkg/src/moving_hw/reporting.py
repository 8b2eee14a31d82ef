"""Artifact writers: legacy VTK snapshots, CSV tables, the JSON report and the Markdown summary.

Text artifacts are rendered with Jinja2 templates from ``templates/``.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from moving_hw.mesh_disc import ReferenceMesh

_template_dir = Path(__file__).parent / "templates"


def _num(value: Any) -> str:
    """Format numbers reproducibly (shortest round-trip repr)."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


_jinja_env = Environment(
    loader=FileSystemLoader(_template_dir),
    autoescape=select_autoescape(),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)
_jinja_env.filters["num"] = _num


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _field_blocks(data: Mapping[str, np.ndarray], count: int) -> list[dict[str, Any]]:
    blocks = []
    for name, values in data.items():
        values = np.asarray(values, dtype=float)
        if values.shape[0] != count:
            raise ValueError(f"field '{name}' has {values.shape[0]} entries, expected {count}")
        blocks.append({"name": name.replace(" ", "_"), "vector": values.ndim == 2, "data": values.tolist()})
    return blocks


def render_vtk(
    mesh: ReferenceMesh,
    point_data: Mapping[str, np.ndarray] | None = None,
    cell_data: Mapping[str, np.ndarray] | None = None,
    title: str = "moving-hw",
    points: np.ndarray | None = None,
) -> str:
    """Render a legacy ASCII VTK unstructured grid of tetrahedra.

    ``points`` overrides the mesh vertices, e.g. with the physical positions at time t.
    """
    coords = mesh.vertices if points is None else points
    return _jinja_env.get_template("unstructured_grid.vtk.j2").render(
        title=title,
        points=np.asarray(coords, dtype=float).tolist(),
        cells=mesh.tets.tolist(),
        point_fields=_field_blocks(point_data or {}, mesh.n_vertices),
        cell_fields=_field_blocks(cell_data or {}, mesh.n_cells),
    )


def write_vtk(
    path: str | Path,
    mesh: ReferenceMesh,
    point_data: Mapping[str, np.ndarray] | None = None,
    cell_data: Mapping[str, np.ndarray] | None = None,
    title: str = "moving-hw",
    points: np.ndarray | None = None,
) -> Path:
    """Write `render_vtk` output to ``path``."""
    path = _prepare(path)
    path.write_text(render_vtk(mesh, point_data, cell_data, title=title, points=points), encoding="utf-8")
    return path


def render_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Render a comma-separated table."""
    return _jinja_env.get_template("table.csv.j2").render(header=list(header), rows=rows)


def write_rows_csv(path: str | Path, rows: Sequence[Mapping[str, Any]], header: Sequence[str] | None = None) -> Path:
    """Write dict rows as CSV; columns follow ``header`` or the first row's keys."""
    path = _prepare(path)
    header = list(header or (rows[0].keys() if rows else []))
    path.write_text(render_csv(header, [[row.get(key, "") for key in header] for row in rows]), encoding="utf-8")
    return path


def write_field_csv(path: str | Path, point_data: Mapping[str, np.ndarray]) -> Path:
    """Write nodal fields one row per node; vector fields expand to ``name_x``, ``name_y``, ``name_z``."""
    columns: list[np.ndarray] = []
    header = ["node"]
    for name, values in point_data.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            header += [f"{name}_{axis}" for axis in "xyz"]
            columns += [values[:, i] for i in range(3)]
        else:
            header.append(name)
            columns.append(values)
    n = columns[0].shape[0] if columns else 0
    rows = [[i, *(float(c[i]) for c in columns)] for i in range(n)]
    path = _prepare(path)
    path.write_text(render_csv(header, rows), encoding="utf-8")
    return path


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and nested containers to JSON types."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else str(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_report_json(path: str | Path, report: Mapping[str, Any]) -> Path:
    """Write the run report with sorted keys so equal runs give identical bytes."""
    path = _prepare(path)
    path.write_text(json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def render_summary(report: Mapping[str, Any]) -> str:
    """Render the Markdown run summary from a report dictionary."""
    sections = {
        name: {k: v for k, v in values.items() if not isinstance(v, (list, dict))}
        for name, values in report.get("results", {}).items()
        if isinstance(values, Mapping)
    }
    config = report.get("config", {})
    return _jinja_env.get_template("summary.md.j2").render(
        scenario=report.get("scenario", "unknown"),
        motion=config.get("motion.name", "identity"),
        geometry=config.get("geometry.kind", "annulus"),
        resolution=config.get("mesh.resolution", ""),
        seed=report.get("seed", 0),
        error=report.get("error"),
        failed_stage=report.get("failed_stage"),
        sections=sections,
        artifacts=report.get("artifacts", []),
    )


def write_summary(path: str | Path, report: Mapping[str, Any]) -> Path:
    """Write `render_summary` output to ``path``."""
    path = _prepare(path)
    path.write_text(render_summary(report), encoding="utf-8")
    return path
