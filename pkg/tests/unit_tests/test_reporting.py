import json

import numpy as np
import pytest

from moving_hw.reporting import (
    render_summary,
    render_vtk,
    to_jsonable,
    write_field_csv,
    write_report_json,
    write_rows_csv,
)


def test_vtk_layout(ball) -> None:
    text = render_vtk(
        ball,
        point_data={"p": np.zeros(ball.n_vertices)},
        cell_data={"u": np.ones((ball.n_cells, 3))},
        title="snapshot",
    )
    lines = text.splitlines()
    assert lines[:4] == ["# vtk DataFile Version 3.0", "snapshot", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    assert f"POINTS {ball.n_vertices} double" in lines
    assert f"CELLS {ball.n_cells} {5 * ball.n_cells}" in lines
    start = lines.index(f"CELL_TYPES {ball.n_cells}") + 1
    assert set(lines[start : start + ball.n_cells]) == {"10"}
    assert "SCALARS p double 1" in lines
    assert "VECTORS u double" in lines
    assert f"CELL_DATA {ball.n_cells}" in lines


def test_vtk_rejects_wrong_field_length(ball) -> None:
    with pytest.raises(ValueError, match="expected"):
        render_vtk(ball, point_data={"p": np.zeros(3)})


def test_rows_csv(tmp_path) -> None:
    rows = [{"t": 0.0, "kinetic": 0.5}, {"t": 0.25, "kinetic": 1e-12}]
    path = write_rows_csv(tmp_path / "nested" / "ledger.csv", rows)
    assert path.read_text(encoding="utf-8").splitlines() == ["t,kinetic", "0.0,0.5", "0.25,1e-12"]


def test_field_csv_expands_vectors(tmp_path) -> None:
    path = write_field_csv(tmp_path / "f.csv", {"q": np.array([1.0, 2.0]), "u": np.eye(3)[:2]})
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "node,q,u_x,u_y,u_z"
    assert lines[1] == "0,1.0,1.0,0.0,0.0"


def test_report_json_is_deterministic(tmp_path) -> None:
    report = {"results": {"b": np.float64(2.0), "a": np.arange(3)}, "flag": np.bool_(True), "bad": float("nan")}
    first = write_report_json(tmp_path / "one.json", report).read_bytes()
    second = write_report_json(tmp_path / "two.json", dict(reversed(list(report.items())))).read_bytes()
    assert first == second
    loaded = json.loads(first)
    assert loaded["results"] == {"a": [0, 1, 2], "b": 2.0}
    assert loaded["bad"] == "nan"
    assert to_jsonable((np.int64(3), tmp_path)) == [3, str(tmp_path)]


def test_summary_reports_failure() -> None:
    report = {
        "scenario": "decompose",
        "seed": 4,
        "config": {"motion.name": "shear", "geometry.kind": "torus", "mesh.resolution": 8},
        "results": {"decomposition": {"residual": 1e-7, "coeffs": [1.0]}},
        "error": "NonSolenoidalInput: too large",
        "failed_stage": "decompose",
        "artifacts": ["report.json"],
    }
    text = render_summary(report)
    assert "- status: failed in decompose" in text
    assert "| residual | 1e-07 |" in text
    assert "coeffs" not in text
    assert "- `report.json`" in text


def test_vtk_writes_field_values(ball) -> None:
    p = 0.5 * np.arange(ball.n_vertices)
    u = np.tile([1.0, -2.0, 0.25], (ball.n_cells, 1))
    lines = render_vtk(ball, point_data={"p": p}, cell_data={"u": u}).splitlines()
    start = lines.index("LOOKUP_TABLE default") + 1
    assert np.allclose([float(v) for v in lines[start : start + ball.n_vertices]], p)
    start = lines.index("VECTORS u double") + 1
    written = np.array([[float(x) for x in line.split()] for line in lines[start : start + ball.n_cells]])
    assert np.allclose(written, u)
