import numpy as np
import pytest

from moving_hw.errors import DegenerateLevelSet, MovingHWError
from moving_hw.geometry_kernel import (
    LEVI_CIVITA,
    BoundaryChart,
    divergence_defect,
    metric_at,
    normal_at,
    pullback,
    pushforward,
    reference_metric,
    rot_kernels_at,
    sphere_chart,
    validate_motion,
    verify_geometry_identities,
)
from moving_hw.motions import (
    dilation_lambda,
    dilation_motion,
    finite_difference_twin,
    make_motion,
)

POINTS = np.array([[1.5, 0.1, -0.3], [1.2, -0.7, 0.4], [-0.9, 1.1, 0.6], [0.9, -0.9, 0.9]])


def test_identity_metric_is_euclidean(identity) -> None:
    sample = reference_metric(identity, POINTS, 0.3)
    assert np.allclose(sample.g_upper, np.eye(3))
    assert np.allclose(sample.g_lower, np.eye(3))
    assert np.allclose(sample.christoffel, 0.0)
    assert np.allclose(sample.J, 1.0)
    assert np.allclose(sample.dJ_ds, 0.0)


def test_constant_dilation_metric() -> None:
    motion = dilation_motion(2.0, 0.0, 1.0)
    sample = metric_at(motion, np.array([0.3, 0.2, 0.1]), 0.0)
    assert np.allclose(sample.g_upper, 0.25 * np.eye(3))
    assert np.allclose(sample.g_lower, 4.0 * np.eye(3))
    assert np.allclose(sample.christoffel, 0.0)
    assert sample.J == pytest.approx(8.0)


def test_dilation_jacobian_rate() -> None:
    motion = dilation_motion(1.0, 0.1, 2 * np.pi)
    sample = reference_metric(motion, POINTS, 0.0)
    assert np.allclose(sample.dJ_ds, 0.3, atol=1e-12)


def test_pushforward_and_pullback_invert_each_other(shear) -> None:
    motion = dilation_motion(2.0, 0.0, 1.0)
    assert np.allclose(pushforward(motion, np.array([1.0, 2.0, 3.0]), np.zeros(3), 0.0), [0.5, 1.0, 1.5])
    u = np.array([[1.0, -2.0, 0.5]] * len(POINTS))
    x = shear.inverse(POINTS, 0.2)
    there = pushforward(shear, u, x, 0.2)
    assert np.allclose(pullback(shear, there, POINTS, 0.2), u)


@pytest.mark.parametrize("name", ["identity", "dilation", "shear", "pulsating_annulus"])
def test_identities_hold_for_builtin_motions(name) -> None:
    motion = make_motion(name, {"period": 1.0, "amplitude": 0.05})
    report = verify_geometry_identities(motion, POINTS, [0.0, 0.13, 0.5, 0.77])
    assert report.passed, report.failures()


def test_dilation_identities_to_round_off(dilation) -> None:
    report = verify_geometry_identities(dilation, POINTS, [0.0, 0.25, 0.6])
    assert max(report.residuals.values()) <= 1e-10


def test_finite_difference_twin_agrees(dilation) -> None:
    twin = finite_difference_twin(dilation)
    assert not twin.analytic
    report = verify_geometry_identities(twin, POINTS, [0.1, 0.4])
    assert report.passed, report.failures()
    exact = reference_metric(dilation, POINTS, 0.4)
    approx = reference_metric(twin, POINTS, 0.4)
    assert np.allclose(approx.dJ_ds, exact.dJ_ds, rtol=1e-5)


def test_validate_motion(pulsating) -> None:
    report = validate_motion(pulsating, POINTS, [0.0, 0.3, 0.9])
    assert report.passed, report.residuals


def test_unknown_motion_name() -> None:
    with pytest.raises(MovingHWError, match="unknown motion"):
        make_motion("wobble")


def test_divergence_is_preserved(shear, rng) -> None:
    waves = rng.normal(size=(3, 3))
    amplitude = rng.normal(size=3)
    for t in (0.0, 0.35):
        arg = shear.inverse(POINTS, t) @ waves.T
        u = amplitude * np.sin(arg)
        du = (amplitude * np.cos(arg))[:, :, None] * waves[None]
        assert np.abs(divergence_defect(shear, POINTS, t, u, du)).max() < 1e-9


def test_rot_is_curl_at_the_anchor(pulsating) -> None:
    M = np.array([[0.0, 1.0, 2.0], [-3.0, 0.5, 1.0], [0.25, -1.0, 0.0]])
    x = np.array([[1.5, 0.1, 0.2], [0.0, 1.3, -0.4]])
    kernels = rot_kernels_at(pulsating, 0.3, x, 0.3)
    assert np.allclose(kernels.R1, 0.0, atol=1e-10)
    curl = np.einsum("ikl,lk->i", LEVI_CIVITA, M)
    rot = kernels.rot(x @ M.T, np.broadcast_to(M, (2, 3, 3)))
    assert np.allclose(rot, curl)


def test_dilation_rot_scales_with_lambda(dilation) -> None:
    M = np.array([[0.0, 2.0, 0.0], [-1.0, 0.0, 0.5], [0.0, 1.5, 0.0]])
    x = np.array([[0.3, -0.2, 0.6]])
    t0, t = 0.0, 0.2
    kernels = rot_kernels_at(dilation, t0, x, t)
    rot = kernels.rot(x @ M.T, M[None])
    scale = dilation_lambda(dilation, t0) / dilation_lambda(dilation, t)
    assert np.allclose(rot[0], scale * np.einsum("ikl,lk->i", LEVI_CIVITA, M))


def test_sphere_normals(identity, dilation) -> None:
    points = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
    assert np.allclose(normal_at(sphere_chart(1.0), identity, points, 0.0), points)
    assert np.allclose(normal_at(sphere_chart(1.0, inward=True), identity, points, 0.0), -points)
    # radial directions survive a dilation
    assert np.allclose(normal_at(sphere_chart(1.0), dilation, points, 0.4), points)


def test_degenerate_level_set(identity) -> None:
    flat = BoundaryChart(label="flat", level_set=lambda p: p[:, 0] * 0.0, gradient=lambda p: np.zeros_like(p))
    with pytest.raises(DegenerateLevelSet):
        normal_at(flat, identity, POINTS, 0.0)
