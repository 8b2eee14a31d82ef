"""Node implementations for each pipeline stage.

Every node returns a partial state update. A `MovingHWError` raised inside a
node is recorded on the state together with the failing stage, and the
router sends the run straight to artifact writing.
"""

from __future__ import annotations

import functools
from collections.abc import Callable
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
from langgraph.runtime import Runtime

from moving_hw.config import RunConfig, load_config, parse_config
from moving_hw.context import Context
from moving_hw.errors import MovingHWError, ParseError, ValidationError
from moving_hw.galerkin_periodic import (
    FieldData,
    PoincareIteration,
    annulus_smallness_closed_form,
    ball_radius,
    check_smallness,
    decay_rate,
    integrate,
    make_periodic_problem,
    radial_flux_beta,
    smooth_forcing,
    swirl_forcing,
    truncation_energy_defect,
    uniform_forcing,
    velocity_at,
)
from moving_hw.geometry_kernel import (
    divergence_defect,
    reference_metric,
    validate_motion,
    verify_geometry_identities,
)
from moving_hw.hw_decomposition import (
    boundary_condition_diagnostics,
    decompose_general,
    decompose_solenoidal,
    divergence_residual,
    estimate_C_omega,
    prepare_decomposition,
)
from moving_hw.mesh_disc import (
    FEField,
    ReferenceMesh,
    generate_annulus_mesh,
    generate_ball_mesh,
    generate_solid_torus_mesh,
    integration_by_parts_defect,
    read_mesh,
    validate_topology,
)
from moving_hw.motions import DomainMotion, finite_difference_twin, make_motion
from moving_hw.opik_logger import log_error, log_run, status
from moving_hw.reporting import write_report_json, write_rows_csv, write_summary, write_vtk
from moving_hw.state import RunState, Snapshot
from moving_hw.timedep_derivatives import differentiate_anchors

MAX_SAMPLE_POINTS = 200
DIVERGENCE_PROBES = 20


def _context(runtime: Runtime[Context] | None) -> Context:
    context = getattr(runtime, "context", None)
    return context if context is not None else Context()


def stage(name: str) -> Callable[[Callable[..., dict]], Callable[..., dict]]:
    """Record the stage name and turn module errors into state updates."""

    def decorator(func: Callable[..., dict]) -> Callable[..., dict]:
        @functools.wraps(func)
        def wrapper(state: RunState, runtime: Runtime[Context]) -> dict:
            stages = [*state.stages, name]
            try:
                update = func(state, runtime)
            except MovingHWError as e:
                log_error(e, state, name)
                return {
                    "stages": stages,
                    "error": str(e),
                    "error_type": type(e).__name__,
                    "failed_stage": name,
                    "config_error": isinstance(e, (ParseError, ValidationError)),
                }
            return {"stages": stages, **update}

        return wrapper

    return decorator


def _with_result(state: RunState, section: str, values: dict[str, Any]) -> dict[str, dict[str, Any]]:
    return {**state.results, section: {**state.results.get(section, {}), **values}}


def _with_table(state: RunState, name: str, rows: list[dict[str, Any]]) -> dict[str, list[dict[str, Any]]]:
    return {**state.tables, name: rows}


def _times(config: RunConfig) -> list[float]:
    return [float(t) for t in np.linspace(0.0, config.period_T, config["time.samples"], endpoint=False)]


def build_geometry(config: RunConfig) -> ReferenceMesh:
    """Generate or read the reference mesh named by the configuration."""
    kind, n = config["geometry.kind"], config.resolution
    if kind == "annulus":
        return generate_annulus_mesh(config["geometry.R0"], config["geometry.R1"], n)
    if kind == "ball":
        return generate_ball_mesh(config["geometry.R"], n)
    if kind == "torus":
        return generate_solid_torus_mesh(config["geometry.major_R"], config["geometry.minor_r"], n)
    return read_mesh(config["geometry.path"])


def build_motion(config: RunConfig) -> DomainMotion:
    """Build the motion named by the configuration."""
    return make_motion(config["motion.name"], config.motion_params())


def forcing_field(config: RunConfig, default: str = "none") -> FieldData | None:
    """Physical forcing f(x, t); ``default`` replaces kind ``none``."""
    kind = config["forcing.kind"] if config["forcing.kind"] != "none" else default
    amplitude = config["forcing.amplitude"]
    if kind == "swirl":
        return swirl_forcing(amplitude, config.period_T)
    if kind == "uniform":
        return uniform_forcing((amplitude, 0.0, 0.0))
    if kind == "smooth":
        return smooth_forcing(amplitude, config.period_T)
    return None


def beta_field(config: RunConfig) -> FieldData | None:
    """Boundary data β(x, t), or None."""
    if config["beta.kind"] == "radial":
        return radial_flux_beta(config["beta.flux"], config["beta.modulation"], config.period_T)
    return None


def _rng(runtime: Runtime[Context]) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(_context(runtime).seed)))


# === LOAD ===


@stage("load_problem")
def load_problem_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Parse the scenario, then build the mesh and the motion."""
    context = _context(runtime)
    config = parse_config(state.config_text) if state.config_text else load_config(state.config_path)
    if context.output_dir:
        config = RunConfig(values={**config.values, "output.dir": context.output_dir}, explicit=config.explicit)
    mesh = build_geometry(config)
    topology = validate_topology(mesh)
    motion = build_motion(config)
    status("📐", f"{config.scenario}: {mesh.name} with {mesh.n_vertices} vertices, {mesh.n_cells} cells, motion {motion.name}")
    return {
        "config": config,
        "mesh": mesh,
        "motion": motion,
        "results": _with_result(
            state,
            "mesh",
            {**asdict(topology), "topology_valid": topology.valid},
        ),
    }


# === VERIFY GEOMETRY ===


def _sample_points(mesh: ReferenceMesh) -> np.ndarray:
    stride = max(1, mesh.n_vertices // MAX_SAMPLE_POINTS)
    return mesh.vertices[::stride]


def _divergence_preservation(motion: DomainMotion, y: np.ndarray, times: list[float], rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(DIVERGENCE_PROBES):
        amplitude = rng.normal(size=3)
        waves = rng.normal(size=(3, 3))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        for t in times:
            x = motion.inverse(y, t)
            arg = x @ waves.T + phases
            u = amplitude * np.sin(arg)
            du = (amplitude * np.cos(arg))[:, :, None] * waves[None]
            worst = max(worst, float(np.abs(divergence_defect(motion, y, t, u, du)).max()))
    return worst


@stage("verify_geometry")
def verify_geometry_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Check the pullback identities, the motion invariants and divergence preservation."""
    config, mesh, motion = state.config, state.mesh, state.motion
    times = _times(config)
    y = _sample_points(mesh)
    report = verify_geometry_identities(motion, y, times)
    twin = verify_geometry_identities(finite_difference_twin(motion), y, times)
    motion_report = validate_motion(motion, y, times)
    rng = _rng(runtime)
    probe_q = np.sin(mesh.vertices[:, 0]) + mesh.vertices[:, 1] ** 2
    probe_u = np.stack([mesh.vertices[:, 1], mesh.vertices[:, 2] ** 2, mesh.vertices[:, 0] * mesh.vertices[:, 1]], axis=1)
    values = {
        "passed": report.passed and twin.passed and motion_report.passed,
        "tolerance_analytic": report.tolerance,
        "tolerance_fd": twin.tolerance,
        **{f"analytic.{k}": v for k, v in report.residuals.items()},
        **{f"fd.{k}": v for k, v in twin.residuals.items()},
        **{f"motion.{k}": v for k, v in motion_report.residuals.items()},
        "divergence_preservation": _divergence_preservation(motion, y, times, rng),
        "integration_by_parts_defect": integration_by_parts_defect(mesh, probe_u, probe_q),
    }
    status("✅" if values["passed"] else "⚠️", f"geometry identities: max analytic residual {max(report.residuals.values()):.3e}")
    return {"results": _with_result(state, "geometry", values)}


# === DECOMPOSE ===


def _pulled_back_cells(mesh: ReferenceMesh, motion: DomainMotion, data: FieldData, t: float) -> np.ndarray:
    metric = reference_metric(motion, mesh.centroids, t)
    return np.einsum("nij,nj->ni", metric.dy_dx, data(metric.point, t))


@stage("decompose")
def decompose_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Decompose the pulled-back forcing f = h + Rot w + ∇p at the first anchor time."""
    config, mesh, motion = state.config, state.mesh, state.motion
    context = _context(runtime)
    t = float(config["time.anchors"][0])
    setup = prepare_decomposition(mesh, motion, t, max_workers=context.max_workers)
    ops = setup.ops
    f = FEField("cell_vector3", _pulled_back_cells(mesh, motion, forcing_field(config, default="smooth"), t), mesh)
    if context.strict:
        h, w, coeffs = decompose_solenoidal(f, setup.basis, setup.cut_basis, ops, check=True)
        rot_w = ops.rot_cells(w.values)
        values = {
            "time": t,
            "strict": True,
            "divergence_residual": divergence_residual(f, ops),
            "residual": ops.cell_norm(f.values - h.values - rot_w) / max(ops.cell_norm(f.values), 1e-300),
        }
        cells = {"f": f.values, "h": h.values, "rot_w": rot_w}
        points = {"w": w.values}
    else:
        triple = decompose_general(f, setup.basis, setup.cut_basis, ops)
        coeffs = triple.coeffs_h
        values = {
            "time": t,
            "strict": False,
            "residual": triple.residual,
            "div_defect": triple.div_defect,
            "trace_defect": triple.trace_defect,
            "sigma_flux_max": float(np.abs(triple.fluxes_w).max(initial=0.0)),
            **{f"orthogonality.{k}": v for k, v in triple.orthogonality(ops).items()},
            **boundary_condition_diagnostics(triple, ops),
        }
        cells = {"f": f.values, "h": triple.h.values, "rot_w": triple.rot_w.values, "grad_p": triple.grad_p.values}
        points = {"w": triple.w.values, "p": triple.p.values}
    values.update({f"coeff_h{k + 1}": float(c) for k, c in enumerate(coeffs)})
    status("✅", f"decomposition at t={t:g}: residual {values['residual']:.3e}")
    snapshot = Snapshot(name="decomposition", title=f"decomposition t={t:g}", point_data=points, cell_data=cells)
    basis_points = {f"q{k + 1}": q.values for k, q in enumerate(setup.basis.q)}
    basis_points.update({f"p_hat{ell + 1}": p.values for ell, p in enumerate(setup.cut_basis.p_continuous)})
    basis_cells = {f"eta{k + 1}": e.values for k, e in enumerate(setup.basis.eta)}
    basis_cells.update({f"grad_p{ell + 1}": g.values for ell, g in enumerate(setup.cut_basis.grad_p)})
    values.update({f"cut_jump{ell + 1}": float(j) for ell, j in enumerate(setup.cut_basis.jumps)})
    basis = Snapshot(name="harmonic_basis", title=f"harmonic basis t={t:g}", point_data=basis_points, cell_data=basis_cells)
    return {"results": _with_result(state, "decompose", values), "snapshots": [*state.snapshots, snapshot, basis]}


# === DIFFERENTIATE ===


@stage("differentiate")
def differentiate_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Solve the dotted problems at every anchor and tabulate Richardson ratios."""
    config, mesh, motion = state.config, state.mesh, state.motion
    context = _context(runtime)
    anchors = [float(t) for t in config["time.anchors"]]
    runs = differentiate_anchors(
        mesh, motion, anchors, forcing_field(config, default="smooth"), eps=config["tol.derivative_eps"], max_workers=context.max_workers
    )
    rows: list[dict[str, Any]] = []
    values: dict[str, Any] = {}
    snapshots = list(state.snapshots)
    for dots, table in runs:
        rows.extend(table)
        values.update({f"t{dots.t0:g}.{k}": v for k, v in dots.diagnostics.items()})
        points = {f"q_dot{k + 1}": q.values for k, q in enumerate(dots.q_dot)}
        points.update({"p_dot": dots.p_dot.values, "w_dot": dots.w_dot.values})
        cells = {"h_dot": dots.h_dot.values, "b_dot": dots.b_dot.values, "rot_dot_w": dots.rot_dot_w.values}
        snapshots.append(
            Snapshot(
                name=f"derivatives_t{dots.t0:g}",
                title=f"derivatives at anchor {dots.t0:g}",
                point_data=points,
                cell_data=cells,
                points=dots.p.mesh.vertices,
            )
        )
    ratios = [row["ratio"] for row in rows if np.isfinite(row["ratio"])]
    if ratios:
        values.update({"ratio_min": min(ratios), "ratio_max": max(ratios)})
    status("✅", f"derivatives at {len(anchors)} anchor(s), Richardson ratios in [{values.get('ratio_min', 0):.2f}, {values.get('ratio_max', 0):.2f}]")
    return {
        "results": _with_result(state, "differentiate", values),
        "tables": _with_table(state, "derivative_consistency", rows),
        "snapshots": snapshots,
    }


# === ESTIMATE CONSTANT ===


@stage("estimate_constant")
def estimate_constant_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Sample C(Ω(t)) of the vector-potential estimate over the time grid."""
    config, mesh, motion = state.config, state.mesh, state.motion
    context = _context(runtime)
    rows = []
    for t in _times(config):
        setup = prepare_decomposition(mesh, motion, t, max_workers=context.max_workers)
        rows.append({"t": t, "C_omega": estimate_C_omega(setup, config["probes.n"], seed=int(context.seed))})
    constants = np.array([row["C_omega"] for row in rows])
    values = {
        "C_max": float(constants.max()),
        "C_min": float(constants.min()),
        "max_over_min": float(constants.max() / constants.min()),
        "finite": bool(np.all(np.isfinite(constants))),
    }
    status("✅", f"C(Ω(t)) in [{values['C_min']:.3e}, {values['C_max']:.3e}]")
    return {"results": _with_result(state, "estimate_constant", values), "tables": _with_table(state, "constant_samples", rows)}


# === SOLVE PERIODIC ===


@stage("prepare_periodic")
def prepare_periodic_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Build Υ, the cut-off and the periodic problem."""
    config, mesh, motion = state.config, state.mesh, state.motion
    problem = make_periodic_problem(
        mesh,
        motion,
        config["galerkin.m"],
        period_T=config.period_T,
        steps=config.steps,
        beta=beta_field(config),
        forcing=forcing_field(config),
        rho=config["cutoff.rho"],
        delta=config["cutoff.delta"],
        d_star=config["cutoff.d_star"],
        max_workers=_context(runtime).max_workers,
        b_samples=config["time.samples"],
    )
    values: dict[str, Any] = {"m": problem.dim_m, "steps": problem.steps, "dt": problem.dt, "K_constant": problem.K_constant}
    if problem.cutoff is not None:
        values.update({f"cutoff.{k}": v for k, v in problem.cutoff.diagnostics.items()})
    return {"problem": problem, "results": _with_result(state, "periodic", values)}


@stage("check_smallness")
def check_smallness_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Evaluate the smallness margin; on success set up the Poincaré iteration inside the invariant ball."""
    config, problem = state.config, state.problem
    report = check_smallness(problem)
    values: dict[str, Any] = {"smallness_margin": report.margin, "smallness_passed": report.passed}
    if config["geometry.kind"] == "annulus" and config["beta.kind"] == "radial":
        closed = annulus_smallness_closed_form(config["geometry.R0"], config["geometry.R1"], config["beta.flux"])
        values.update({f"closed_form.{k}": v for k, v in closed.items()})
        if closed["margin_derived"] > 0:
            values["closed_form.agreement"] = abs(report.margin - closed["margin_derived"]) / closed["margin_derived"]
    update: dict[str, Any] = {"smallness": report, "tables": _with_table(state, "smallness", report.samples)}
    if report.passed:
        gamma = decay_rate(problem)
        radius = ball_radius(problem, gamma)
        values.update({"decay_rate": gamma, "ball_radius": radius})
        update["iteration"] = PoincareIteration(
            problem=problem, a=np.zeros(problem.dim_m), radius=radius, tol=config["tol.periodic"]
        )
        status("✅", f"smallness margin {report.margin:.3e}, ball radius {radius:.3e}")
    else:
        status("⚠️", f"smallness margin {report.margin:.3e} ≥ 1; periodic search skipped")
    return {**update, "results": _with_result(state, "periodic", values)}


@stage("poincare_iteration")
def poincare_iteration_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Advance the fixed-point iteration by one map evaluation."""
    iteration = state.iteration
    residual = iteration.step()
    values = {"iterations": iteration.iterations, "residual": residual, "ball_violations": iteration.ball_violations}
    update: dict[str, Any] = {"iteration": iteration, "results": _with_result(state, "periodic", values)}
    if not iteration.converged and iteration.iterations >= state.config["galerkin.max_iters"]:
        error = iteration.failure()
        log_error(error, state, "poincare_iteration")
        update.update({"error": str(error), "error_type": type(error).__name__, "failed_stage": "poincare_iteration"})
    if iteration.converged or "error" in update:
        rows = [{"iteration": i + 1, "residual": r} for i, r in enumerate(iteration.history)]
        update["tables"] = _with_table(state, "poincare_residuals", rows)
    return update


@stage("reintegrate")
def reintegrate_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Integrate the fixed point over two periods and record the energy ledger."""
    config, problem, iteration = state.config, state.problem, state.iteration
    result = iteration.result()
    T = problem.period_T
    trajectory = integrate(problem, result.a, 0.0, 2.0 * T, iterate_index=result.iterations + 1)
    n = problem.steps
    values = {
        "periodicity_defect": float(np.linalg.norm(trajectory.h[2 * n] - trajectory.h[n])),
        "edi_defect_max": float(np.abs(trajectory.column("edi_defect")).max()),
        "energy_step_defect_max": float(np.abs(trajectory.column("energy_step_defect")).max()),
        "rate_transport_gap_max": float(np.abs(trajectory.column("rate") - trajectory.column("rate_transport")).max()),
        "gronwall_ok": bool(np.all(trajectory.column("gronwall_ok") > 0)),
        "truncation_energy_defect": truncation_energy_defect(trajectory),
        "accelerator": result.accelerator,
        "kinetic_mean": float(trajectory.column("kinetic").mean()),
    }
    snapshots = list(state.snapshots)
    for i in range(0, n + 1, config["output.vtk_stride"]):
        t = float(trajectory.times[i])
        snapshots.append(
            Snapshot(
                name=f"velocity_{i:05d}",
                title=f"periodic velocity t={t:g}",
                point_data={"u": velocity_at(problem, trajectory.h[i], t)},
                points=state.motion.inverse(state.mesh.vertices, t),
            )
        )
    status("✅", f"periodic solution: ‖u(2T) − u(T)‖ = {values['periodicity_defect']:.3e}")
    return {
        "results": _with_result(state, "periodic", values),
        "tables": _with_table(state, "energy_ledger", trajectory.ledger),
        "snapshots": snapshots,
    }


# === OUTPUT ===


@stage("write_artifacts")
def write_artifacts_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Write CSV tables, VTK snapshots, report.json and summary.md."""
    config = state.config
    out = config.output_dir if config is not None else Path(_context(runtime).output_dir or "out")
    paths: list[Path] = []
    for name, rows in sorted(state.tables.items()):
        paths.append(write_rows_csv(out / f"{name}.csv", rows))
    if state.mesh is not None:
        for snap in state.snapshots:
            paths.append(write_vtk(out / f"{snap.name}.vtk", state.mesh, snap.point_data, snap.cell_data, title=snap.title, points=snap.points))
    artifacts = [str(p.relative_to(out)) for p in paths] + ["report.json", "summary.md"]
    report = build_report(state, runtime, artifacts)
    write_report_json(out / "report.json", report)
    write_summary(out / "summary.md", report)
    status("📝", f"{len(artifacts)} artifacts written to {out}")
    return {"artifacts": artifacts}


def build_report(state: RunState, runtime: Runtime[Context], artifacts: list[str]) -> dict[str, Any]:
    """Assemble the JSON report; it holds no timings so equal runs give equal bytes."""
    return {
        "scenario": state.config.scenario if state.config is not None else None,
        "seed": int(_context(runtime).seed),
        "config": state.config.summary() if state.config is not None else {},
        "results": state.results,
        "stages": state.stages,
        "error": state.error,
        "error_type": state.error_type,
        "failed_stage": state.failed_stage,
        "artifacts": artifacts,
    }


def finalize_node(state: RunState, runtime: Runtime[Context]) -> dict:
    """Log the run to Opik and print the closing status line."""
    scenario = state.config.scenario if state.config is not None else "unknown"
    try:
        log_run(
            scenario,
            state.config.summary() if state.config is not None else {"config_path": state.config_path},
            {"error": state.error, "failed_stage": state.failed_stage},
            state.results,
            {"seed": int(_context(runtime).seed), "stages": state.stages},
            project_name=_context(runtime).opik_project,
        )
    except Exception as e:
        status("⚠️", f"error during finalization: {e}")
    if state.failed:
        status("❌", f"{scenario} failed in {state.failed_stage}: {state.error}")
    else:
        status("🏁", f"{scenario} finished")
    return {}
