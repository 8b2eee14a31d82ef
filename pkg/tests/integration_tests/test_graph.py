import json

import pytest

from moving_hw import Context, graph
from moving_hw.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main

pytestmark = pytest.mark.anyio

SMALL_MESH = "mesh.resolution = 8\n"

PULSATING_SHELL = (
    "scenario = solve-periodic\n"
    "motion.name = pulsating_annulus\n"
    "motion.amplitude = 0.05\n"
    "galerkin.m = 4\n"
    "time.steps = 64\n"
    "beta.kind = radial\n"
    "beta.flux = 0.1\n"
    "forcing.kind = swirl\n"
    "forcing.amplitude = 0.5\n"
    "output.vtk_stride = 64\n"
) + SMALL_MESH


async def test_verify_geometry_on_dilation(tmp_path) -> None:
    config_text = "scenario = verify-geometry\nmotion.name = dilation\n" + SMALL_MESH
    res = await graph.ainvoke({"config_text": config_text}, context=Context(output_dir=str(tmp_path)))
    assert res["error"] is None
    geometry = res["results"]["geometry"]
    assert geometry["passed"]
    assert max(v for k, v in geometry.items() if k.startswith("analytic.")) <= 1e-10
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["scenario"] == "verify-geometry"
    assert "summary.md" in report["artifacts"]
    assert (tmp_path / "summary.md").exists()


async def test_decompose_writes_fields(tmp_path) -> None:
    config_text = "scenario = decompose\n" + SMALL_MESH
    res = await graph.ainvoke({"config_text": config_text}, context=Context(output_dir=str(tmp_path)))
    assert res["error"] is None
    decomposition = res["results"]["decompose"]
    assert decomposition["strict"] is False
    assert decomposition["div_defect"] < 1e-8
    assert (tmp_path / "decomposition.vtk").exists()


async def test_strict_decompose_rejects_divergent_forcing(tmp_path) -> None:
    config_text = "scenario = decompose\nforcing.kind = smooth\n" + SMALL_MESH
    res = await graph.ainvoke({"config_text": config_text}, context=Context(output_dir=str(tmp_path), strict=True))
    assert res["error_type"] == "NonSolenoidalInput"
    assert res["failed_stage"] == "decompose"
    report = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert report["error_type"] == "NonSolenoidalInput"


async def test_config_error_stops_before_artifacts(tmp_path) -> None:
    res = await graph.ainvoke({"config_text": "scenario = dance\n"}, context=Context(output_dir=str(tmp_path)))
    assert res["config_error"] is True
    assert res["error_type"] == "ValidationError"
    assert not (tmp_path / "report.json").exists()


def test_cli_exit_codes(tmp_path) -> None:
    good = tmp_path / "good.cfg"
    good.write_text("scenario = decompose\n" + SMALL_MESH, encoding="utf-8")
    assert main(["verify-geometry", "--config", str(good), "--out", str(tmp_path / "ok")]) == EXIT_OK

    bad = tmp_path / "bad.cfg"
    bad.write_text("mesh.resolution = -3\n", encoding="utf-8")
    assert main(["verify-geometry", "--config", str(bad), "--out", str(tmp_path / "bad")]) == EXIT_CONFIG
    assert main(["verify-geometry", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG

    strict = tmp_path / "strict.cfg"
    strict.write_text("forcing.kind = smooth\n" + SMALL_MESH, encoding="utf-8")
    assert main(["decompose", "--config", str(strict), "--strict", "--out", str(tmp_path / "strict")]) == EXIT_FAILED


async def test_solve_periodic_on_pulsating_shell(tmp_path) -> None:
    res = await graph.ainvoke({"config_text": PULSATING_SHELL}, context=Context(output_dir=str(tmp_path)))
    assert res["error"] is None
    periodic = res["results"]["periodic"]
    assert periodic["smallness_passed"]
    assert periodic["smallness_margin"] <= 0.5
    assert periodic["residual"] <= 1e-6
    assert periodic["ball_violations"] == 0
    assert periodic["periodicity_defect"] <= 2e-6
    assert periodic["energy_step_defect_max"] <= 1e-6
    assert (tmp_path / "energy_ledger.csv").exists()
    assert (tmp_path / "poincare_residuals.csv").exists()


@pytest.mark.slow
async def test_same_seed_gives_identical_report(tmp_path) -> None:
    reports = []
    for _ in range(2):
        res = await graph.ainvoke({"config_text": PULSATING_SHELL}, context=Context(output_dir=str(tmp_path), seed=11))
        assert res["error"] is None
        reports.append((tmp_path / "report.json").read_bytes())
    assert reports[0] == reports[1]


async def test_estimate_constant_report_is_reproducible(tmp_path) -> None:
    config_text = "scenario = estimate-constant\ntime.samples = 2\n" + SMALL_MESH
    reports = []
    for _ in range(2):
        res = await graph.ainvoke({"config_text": config_text}, context=Context(output_dir=str(tmp_path), seed=4))
        assert res["error"] is None
        reports.append((tmp_path / "report.json").read_bytes())
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["results"]["estimate_constant"]["finite"]
