import numpy as np
import pytest

from moving_hw.errors import BlowupDetected, FluxViolation
from moving_hw.galerkin_periodic import (
    C_SOBOLEV,
    GFC_TOL,
    MIN_STEPS,
    TrajectoryState,
    annulus_smallness_closed_form,
    ball_radius,
    boundary_fluxes,
    build_b_epsilon,
    build_upsilon,
    check_smallness,
    decay_rate,
    dilation_scaling_check,
    find_periodic,
    flux_imbalance,
    integrate,
    make_periodic_problem,
    ode_rhs,
    orthonormalize_basis_at,
    radial_flux_beta,
    steady_state,
    swirl_forcing,
    truncation_energy_defect,
    uniform_forcing,
)
from moving_hw.leray_cutoff import build_cutoff
from moving_hw.mesh_disc import assemble_weighted


@pytest.fixture(scope="module")
def upsilon(ball):
    return build_upsilon(ball, 6)


@pytest.fixture(scope="module")
def swirl_problem(ball, identity, upsilon):
    return make_periodic_problem(ball, identity, 6, period_T=1.0, forcing=swirl_forcing(0.5), basis=upsilon)


def test_upsilon_fields_are_admissible(ball, identity, upsilon) -> None:
    assert upsilon.m == 6
    assert np.all(upsilon.upsilon[:, ball.boundary_nodes] == 0.0)
    ops = assemble_weighted(ball, identity, 0.0)
    divergence = ops.div[ball.interior_nodes] @ upsilon.flat.T
    assert np.abs(divergence).max() < 1e-8
    mu, psi = orthonormalize_basis_at(upsilon, ops)
    gram = np.array([[a.flat @ ops.mass_t @ b.flat for b in psi] for a in psi])
    assert np.allclose(gram, np.eye(6), atol=1e-10)
    assert np.allclose(mu, np.eye(6), atol=1e-8)


def test_frame_stiffness_matches_assembled_operator(ball, identity, upsilon, swirl_problem) -> None:
    ops = assemble_weighted(ball, identity, 0.0)
    expected = upsilon.flat @ (ops.stiffness_t @ upsilon.flat.T)
    stiffness = swirl_problem.frame(0.0).stiffness
    assert np.allclose(stiffness, stiffness.T, atol=1e-12 * np.abs(expected).max())
    assert np.allclose(stiffness, expected, rtol=1e-10, atol=1e-12 * np.abs(expected).max())


def test_upsilon_needs_a_mode(ball) -> None:
    with pytest.raises(ValueError, match="positive"):
        build_upsilon(ball, 0)


def test_zero_data_keeps_zero_solution(ball, identity, upsilon) -> None:
    problem = make_periodic_problem(ball, identity, 6, period_T=1.0, basis=upsilon)
    assert problem.steps >= MIN_STEPS
    result = find_periodic(problem, max_iters=3)
    assert result.iterations == 1
    assert np.all(result.a == 0.0)
    assert result.residual_history == [0.0]


def test_energy_identity_holds_along_trajectory(swirl_problem) -> None:
    a = np.linspace(-0.2, 0.3, 6)
    trajectory = integrate(swirl_problem, a, 0.0, 0.25)
    scale = max(1.0, np.abs(trajectory.column("dissipation")).max())
    assert np.abs(trajectory.column("edi_defect")).max() <= 1e-9 * scale
    assert np.all(trajectory.column("gronwall_ok") > 0)
    assert np.allclose(trajectory.column("convective"), 0.0)


def test_step_above_limit_is_rejected(swirl_problem) -> None:
    with pytest.raises(ValueError, match="exceeds"):
        integrate(swirl_problem, np.zeros(6), 0.0, 1.0, dt=0.1)


def test_frozen_fixed_point_is_the_steady_state(ball, identity, upsilon) -> None:
    problem = make_periodic_problem(ball, identity, 6, period_T=1.0, forcing=uniform_forcing((0.1, 0.0, 0.0)), basis=upsilon)
    steady = steady_state(problem)
    assert np.abs(ode_rhs(steady, 0.0, problem)).max() < 1e-8
    result = find_periodic(problem, max_iters=40, tol=1e-9)
    assert result.accelerator in {"picard", "anderson"}
    assert np.allclose(result.a, steady, atol=1e-7)
    assert result.residual_history[-1] <= 1e-9


def test_smallness_without_boundary_data(swirl_problem) -> None:
    report = check_smallness(swirl_problem, n_samples=4)
    assert report.margin == 0.0
    assert report.passed
    assert len(report.samples) == 4


def test_closed_form_constants() -> None:
    values = annulus_smallness_closed_form(2.0, 1.0, 0.3)
    assert values["l3_derived"] / values["l3_printed"] == pytest.approx(2.0 ** (-2.0 / 3.0))
    assert values["margin_derived"] == pytest.approx(C_SOBOLEV * values["l3_derived"])
    assert annulus_smallness_closed_form(2.0, 1.0, 0.0)["margin_printed"] == 0.0


def test_radial_beta_carries_the_flux() -> None:
    beta = radial_flux_beta(0.4)
    x = np.array([[1.5, 0.0, 0.0], [0.0, 0.0, -1.2]])
    r = np.linalg.norm(x, axis=1)
    outward = np.einsum("ni,ni->n", beta(x, 0.0), x / r[:, None])
    assert np.allclose(outward * 4.0 * np.pi * r**2, -0.4)


def test_dilation_scaling_check() -> None:
    lambdas = np.array([1.0, 1.1, 0.9])
    assert dilation_scaling_check(0.2 / lambdas, lambdas) == pytest.approx(0.0, abs=1e-15)
    assert dilation_scaling_check(np.full(3, 0.2), lambdas) > 0.1


def test_ball_radius_needs_decay(swirl_problem) -> None:
    assert ball_radius(swirl_problem, 0.0) == float("inf")
    assert 0.0 < ball_radius(swirl_problem, 1.0) < float("inf")


def test_truncation_and_blowup_guards() -> None:
    times = np.linspace(0.0, 1.0, 3)
    quiet = TrajectoryState(times=times, h=np.zeros((3, 4)), ledger=[])
    assert truncation_energy_defect(quiet) == 0.0
    tail = TrajectoryState(times=times, h=np.tile([1.0, 0.0, 1.0, 0.0], (3, 1)), ledger=[])
    assert truncation_energy_defect(tail) == pytest.approx(0.5)
    with pytest.raises(BlowupDetected):
        TrajectoryState(times=times, h=np.full((3, 4), np.nan), ledger=[])


def outer_excess_beta(excess: float):
    """Radial data whose flux through the outer sphere is off by the factor 1 + excess."""
    radial = radial_flux_beta(0.1)

    def beta(x: np.ndarray, t: float) -> np.ndarray:
        r = np.linalg.norm(x, axis=1)
        return radial(x, t) * np.where(r > 1.5, 1.0 + excess, 1.0)[:, None]

    return beta


@pytest.fixture(scope="module")
def shell_cutoff(annulus):
    return build_cutoff(annulus, 0.25, 0.1)


@pytest.fixture(scope="module")
def shell_problem(annulus, pulsating):
    return make_periodic_problem(annulus, pulsating, 4, period_T=1.0, beta=radial_flux_beta(0.1, modulation=0.3), b_samples=4)


def test_flux_condition_uses_the_exact_boundary(annulus, pulsating, shell_cutoff) -> None:
    ext = build_b_epsilon(annulus, pulsating, 0.3, radial_flux_beta(0.1), shell_cutoff)
    assert ext.fluxes == pytest.approx([-0.1, 0.1], rel=1e-10)
    assert ext.flux_imbalance < 1e-10
    assert ext.discrete_imbalance >= 0.0
    assert np.isfinite(ext.trace_correction)
    assert ext.trace_error < 1e-8


def test_small_flux_leak_passes_below_tolerance(annulus, pulsating) -> None:
    fluxes = boundary_fluxes(annulus, pulsating, 0.3, outer_excess_beta(1e-9))
    assert flux_imbalance(fluxes) == pytest.approx(5e-10, rel=1e-3)
    assert flux_imbalance(fluxes) < GFC_TOL


def test_flux_leak_of_one_in_a_million_is_rejected(annulus, pulsating, shell_cutoff) -> None:
    leaky = outer_excess_beta(2e-6)
    assert flux_imbalance(boundary_fluxes(annulus, pulsating, 0.3, leaky)) == pytest.approx(1e-6, rel=1e-3)
    with pytest.raises(FluxViolation) as info:
        build_b_epsilon(annulus, pulsating, 0.3, leaky, shell_cutoff)
    assert info.value.operation == "build_b_epsilon"


def test_extension_is_built_once_per_sample_phase(shell_problem) -> None:
    times = shell_problem.sample_times
    assert len(times) == 4
    for t in times:
        exact = shell_problem.b_epsilon(t).field.values
        assert np.allclose(shell_problem.b_values(t), exact, atol=1e-12 * np.abs(exact).max())
    integrate(shell_problem, np.zeros(4), 0.0, shell_problem.period_T)
    check_smallness(shell_problem)
    assert sorted(shell_problem._extensions) == sorted(shell_problem.phase(t) for t in times)
    assert len(shell_problem._setups) == 4


def test_extension_rate_matches_interpolated_values(shell_problem) -> None:
    t, eps = 0.37, 1e-4
    central = (shell_problem.b_values(t + eps) - shell_problem.b_values(t - eps)) / (2.0 * eps)
    rate = shell_problem.b_rate(t)
    assert np.abs(rate).max() > 0.0
    assert np.allclose(rate, central, atol=1e-5 * np.abs(rate).max())


def test_energy_step_defect_shrinks_with_step(ball, dilation, upsilon) -> None:
    problem = make_periodic_problem(ball, dilation, 6, period_T=1.0, forcing=swirl_forcing(0.5), basis=upsilon)
    a = np.zeros(6)
    coarse = np.abs(integrate(problem, a, 0.0, 0.25).column("energy_step_defect")).max()
    fine = np.abs(integrate(problem, a, 0.0, 0.25, dt=problem.dt / 2).column("energy_step_defect")).max()
    assert 0.0 < coarse <= 1e-6
    assert fine <= 0.5 * coarse + 1e-13


@pytest.fixture(scope="module")
def pulsating_problem(annulus, pulsating):
    problem = make_periodic_problem(annulus, pulsating, 8, period_T=1.0, beta=radial_flux_beta(0.1), forcing=swirl_forcing(0.5))
    report = check_smallness(problem)
    assert report.margin <= 0.5
    return problem


@pytest.mark.slow
def test_pulsating_annulus_periodic_solution(pulsating_problem) -> None:
    problem = pulsating_problem
    radius = ball_radius(problem, decay_rate(problem))
    result = find_periodic(problem, radius=radius, max_iters=50, tol=1e-6)
    assert result.residual_history[-1] <= 1e-6
    assert result.ball_violations == 0
    trajectory = integrate(problem, result.a, 0.0, 2.0 * problem.period_T)
    n = problem.steps
    assert np.linalg.norm(trajectory.h[2 * n] - trajectory.h[n]) <= 2e-6
    assert np.abs(trajectory.column("energy_step_defect")).max() <= 1e-6


@pytest.mark.slow
def test_poincare_map_keeps_the_absorbing_ball(pulsating_problem, rng) -> None:
    problem = pulsating_problem
    radius = ball_radius(problem, decay_rate(problem))
    assert 0.0 < radius < float("inf")
    for _ in range(20):
        direction = rng.normal(size=problem.dim_m)
        a = radius * rng.uniform() ** (1.0 / problem.dim_m) * direction / np.linalg.norm(direction)
        image = integrate(problem, a, 0.0, problem.period_T).final
        assert np.linalg.norm(image) <= radius * 1.001
