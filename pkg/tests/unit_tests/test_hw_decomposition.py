import numpy as np
import pytest

from moving_hw.errors import NonSolenoidalInput
from moving_hw.hw_decomposition import (
    boundary_condition_diagnostics,
    decompose_general,
    decompose_solenoidal,
    divergence_residual,
    estimate_C_omega,
    prepare_decomposition,
    random_solenoidal_probe,
)
from moving_hw.mesh_disc import FEField


@pytest.fixture(scope="module")
def setup(annulus, identity):
    return prepare_decomposition(annulus, identity, 0.0)


def interior_bump(annulus, rng) -> np.ndarray:
    values = np.zeros(annulus.n_vertices)
    values[annulus.interior_nodes] = rng.normal(size=annulus.interior_nodes.size)
    return values


def test_harmonic_field_is_its_own_projection(setup) -> None:
    eta = setup.basis.eta[0]
    h, w, coeffs = decompose_solenoidal(eta, setup.basis, setup.cut_basis, setup.ops)
    assert coeffs == pytest.approx([1.0], rel=1e-10)
    assert np.allclose(h.values, eta.values)
    assert np.abs(w.values).max() < 1e-6


def test_pure_gradient_is_recovered(setup, annulus, rng) -> None:
    phi = interior_bump(annulus, rng)
    f = FEField("cell_vector3", setup.ops.metric_grad(phi), annulus)
    triple = decompose_general(f, setup.basis, setup.cut_basis, setup.ops)
    assert np.allclose(triple.p.values, phi, atol=1e-7)
    assert triple.residual < 1e-7
    assert np.abs(triple.coeffs_h).max() < 1e-7


def test_gradient_is_rejected_by_strict_mode(setup, annulus, rng) -> None:
    f = FEField("cell_vector3", setup.ops.metric_grad(interior_bump(annulus, rng)), annulus)
    assert divergence_residual(f, setup.ops) > 1e-6
    with pytest.raises(NonSolenoidalInput) as info:
        decompose_solenoidal(f, setup.basis, setup.cut_basis, setup.ops, check=True)
    assert info.value.operation == "decompose_solenoidal"


def test_rot_of_admissible_potential_is_reproduced(setup, rng) -> None:
    b, _ = random_solenoidal_probe(setup.ops, rng)
    assert divergence_residual(b, setup.ops) < 1e-8
    h, w, coeffs = decompose_solenoidal(b, setup.basis, setup.cut_basis, setup.ops)
    assert np.abs(coeffs).max() < 1e-8
    rot_w = setup.ops.rot_cells(w.values)
    assert setup.ops.cell_norm(rot_w - (b - h).values) <= 1e-5 * setup.ops.cell_norm(b.values)


def test_parts_of_smooth_field_are_orthogonal(setup, annulus) -> None:
    x = annulus.vertices
    values = np.stack([np.sin(x[:, 1]) + x[:, 0] * x[:, 2], np.cos(x[:, 0] * x[:, 2]), x[:, 0] - x[:, 1] ** 2], axis=1)
    triple = decompose_general(FEField("vector3", values, annulus), setup.basis, setup.cut_basis, setup.ops)
    for pair, value in triple.orthogonality(setup.ops).items():
        assert value < 1e-6, pair
    assert 0.0 <= triple.residual < 1.0
    assert triple.div_defect < 1e-8
    assert triple.trace_defect < 1e-8
    diagnostics = boundary_condition_diagnostics(triple, setup.ops)
    assert set(diagnostics) == {"b1_residual", "b2_residual", "boundary_area"}
    assert all(np.isfinite(v) for v in diagnostics.values())


def test_constant_estimate_grows_with_samples(setup) -> None:
    first = estimate_C_omega(setup, n_probes=8, seed=3)
    more = estimate_C_omega(setup, n_probes=12, seed=3)
    assert 0.0 < first <= more


@pytest.mark.parametrize("n_probes", [0, 1, 7])
def test_constant_estimate_needs_eight_samples(setup, n_probes) -> None:
    with pytest.raises(ValueError, match="at least 8"):
        estimate_C_omega(setup, n_probes=n_probes)


@pytest.mark.slow
def test_constant_estimate_is_uniform_on_pulsating_annulus(annulus, pulsating) -> None:
    times = np.linspace(0.0, pulsating.period_T, 9, endpoint=False)
    estimates = [estimate_C_omega(prepare_decomposition(annulus, pulsating, float(t)), n_probes=8, seed=5) for t in times]
    assert all(np.isfinite(estimates)) and min(estimates) > 0.0
    assert max(estimates) / min(estimates) <= 2.0


def test_torus_decomposition_is_exact_on_discrete_range(torus, identity, rng) -> None:
    setup = prepare_decomposition(torus, identity, 0.0)
    ops = setup.ops
    assert (torus.K, torus.L) == (0, 1)
    b, _ = random_solenoidal_probe(ops, rng)
    phi = interior_bump(torus, rng)
    f = FEField("cell_vector3", b.values + ops.metric_grad(phi), torus)
    triple = decompose_general(f, setup.basis, setup.cut_basis, ops)
    assert triple.residual <= 1e-6
    assert np.abs(triple.fluxes_w).max() <= 1e-8
    assert triple.coeffs_h.size == 0
    for pair, value in triple.orthogonality(ops).items():
        assert value < 1e-6, pair
