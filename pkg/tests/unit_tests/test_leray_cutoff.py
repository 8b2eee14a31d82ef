import numpy as np
import pytest

from moving_hw.errors import BadParameters
from moving_hw.leray_cutoff import (
    boundary_distance,
    build_cutoff,
    check_parameters,
    distance_to_boundary,
    hardy_constant,
    leray_pairing,
    select_rho,
    theta_profile,
    xi_profile,
)
from moving_hw.mesh_disc import FEField


@pytest.fixture(scope="module")
def profile(annulus):
    return build_cutoff(annulus, rho=0.5, delta=0.2)


def test_xi_profile_values() -> None:
    z = np.array([np.exp(-4.0) / 2.0, np.exp(-3.0), np.exp(-1.0)])
    assert np.allclose(xi_profile(z, 0.5), [1.0, 0.5, 0.0])


def test_theta_is_monotone_between_plateau_and_support() -> None:
    rho, lam = 0.5, np.exp(-10.0) / 8.0
    z = np.geomspace(np.exp(-4.0) / 4.0, 4.0 * np.exp(-2.0), 200)
    theta, dtheta = theta_profile(z, rho, lam)
    assert theta[0] == pytest.approx(1.0)
    assert theta[-1] == pytest.approx(0.0)
    assert np.all(np.diff(theta) <= 1e-12)
    assert np.all(dtheta <= 0.0)


@pytest.mark.parametrize(
    ("rho", "delta", "lam", "d_star", "fragment"),
    [
        (0.5, 0.2, 1e-6, 1.5, "collar width"),
        (1.5, 0.2, 1e-6, 0.5, "rho="),
        (0.5, 0.3, 1e-6, 0.5, "2*delta"),
        (0.5, 0.2, 1e-3, 0.5, "lambda"),
    ],
)
def test_bad_parameters(rho, delta, lam, d_star, fragment) -> None:
    with pytest.raises(BadParameters, match=fragment):
        check_parameters(rho, delta, lam, d_star)


def test_distance_vanishes_on_boundary(annulus) -> None:
    d = distance_to_boundary(annulus).values
    assert np.all(d[annulus.boundary_nodes] == 0.0)
    assert np.all(d >= 0.0)
    assert d.max() <= 0.55


def test_distance_gradient_is_unit(annulus) -> None:
    d, grad = boundary_distance(annulus, np.array([[1.4, 0.0, 0.0], [0.0, -1.6, 0.1]]))
    assert np.all(d > 0)
    assert np.allclose(np.linalg.norm(grad, axis=1), 1.0)


def test_cutoff_plateau_support_and_gradient_bound(annulus, profile) -> None:
    theta = profile.theta.values
    assert np.all(theta[annulus.boundary_nodes] == 1.0)
    assert np.all((theta >= 0.0) & (theta <= 1.0))
    assert profile.diagnostics["plateau_nodes"] >= annulus.boundary_nodes.size
    assert profile.diagnostics["support_nodes"] >= profile.diagnostics["plateau_nodes"]
    assert profile.diagnostics["gradient_bound_ratio"] <= 1.0 + 1e-6
    assert profile.interpolation_error < 1e-3


def test_pairing_of_zero_velocity(annulus, identity, profile) -> None:
    zero = FEField.zeros("vector3", annulus)
    w = FEField("vector3", np.tile([0.0, 0.0, 1.0], (annulus.n_vertices, 1)), annulus)
    pairing = leray_pairing(zero, profile, w, identity, 0.0)
    assert (pairing.value, pairing.ratio, pairing.trace_defect) == (0.0, 0.0, 0.0)


def test_hardy_constant_is_moderate(annulus) -> None:
    r = np.linalg.norm(annulus.vertices, axis=1)
    bump = (r - 1.0) * (2.0 - r)
    bump[annulus.boundary_nodes] = 0.0
    u = FEField("vector3", np.stack([bump, 0.0 * bump, 0.0 * bump], axis=1), annulus)
    assert 0.0 < hardy_constant(annulus, u) < 4.0


def test_select_rho_takes_first_rung_for_zero_field(annulus, identity) -> None:
    zero = FEField.zeros("vector3", annulus)
    selection = select_rho(1e-3, zero, zero, identity, [0.0])
    assert selection.achieved
    assert selection.rho == 0.5
    assert selection.ladder == [{"rho": 0.5, "max_ratio": 0.0}]
