import numpy as np
import pytest

from moving_hw.errors import UnknownLabel
from moving_hw.harmonic_fields import (
    boundary_fluxes,
    export_basis,
    flux_coefficients,
    gram_schmidt_vhar,
    project_onto_vhar,
    radial_decay_exponent,
    solve_cut_potentials,
    solve_harmonic_potentials,
    xhar_pairing,
)
from moving_hw.mesh_disc import assemble_weighted
from moving_hw.motions import dilation_motion


@pytest.fixture(scope="module")
def annulus_setup(annulus, identity):
    ops = assemble_weighted(annulus, identity, 0.0)
    return ops, gram_schmidt_vhar(solve_harmonic_potentials(annulus, identity, 0.0, ops=ops), ops)


def test_annulus_potential_matches_radial_profile(annulus, annulus_setup) -> None:
    _, basis = annulus_setup
    assert basis.K == 1
    r = np.linalg.norm(annulus.vertices, axis=1)
    exact = (1.0 / r - 0.5) / (1.0 - 0.5)
    q = basis.q[0].values
    assert np.abs(q - exact).max() < 0.15
    assert q.min() >= -0.02
    assert q.max() <= 1.02
    assert max(basis.residuals) <= 1e-8


def test_gradient_energy_and_normalization(annulus_setup) -> None:
    ops, basis = annulus_setup
    energy = ops.cell_norm(basis.grad_q[0].values)
    assert energy == pytest.approx(2.0 * np.sqrt(2.0 * np.pi), rel=0.2)
    assert basis.alpha[0, 0] * energy == pytest.approx(1.0, rel=1e-10)
    assert ops.cell_norm(basis.eta[0].values) == pytest.approx(1.0, rel=1e-10)


def test_projection_of_eta_returns_unit_coefficient(annulus_setup) -> None:
    ops, basis = annulus_setup
    h, coeffs = project_onto_vhar(basis.eta[0], basis, ops)
    assert coeffs == pytest.approx([1.0], rel=1e-10)
    assert np.allclose(h.values, basis.eta[0].values)


def test_flux_coefficients_agree_with_projection(annulus_setup) -> None:
    ops, basis = annulus_setup
    _, coeffs = project_onto_vhar(basis.grad_q[0], basis, ops)
    assert flux_coefficients(basis.grad_q[0], basis, ops) == pytest.approx(coeffs, rel=1e-6)
    assert boundary_fluxes(basis.grad_q[0], ops).shape == (1,)


def test_gradient_decays_like_point_source(annulus_setup) -> None:
    ops, basis = annulus_setup
    assert radial_decay_exponent(basis, ops) == pytest.approx(-2.0, abs=0.5)
    with pytest.raises(UnknownLabel):
        radial_decay_exponent(basis, ops, k=2)


def test_ball_has_empty_basis(ball, identity) -> None:
    ops = assemble_weighted(ball, identity, 0.0)
    basis = gram_schmidt_vhar(solve_harmonic_potentials(ball, identity, 0.0, ops=ops), ops)
    assert basis.K == 0
    assert basis.eta == []
    assert solve_cut_potentials(ball, identity, 0.0, ops=ops).L == 0


def test_dilation_rescales_normalization(annulus, annulus_setup) -> None:
    _, basis = annulus_setup
    motion = dilation_motion(2.0, 0.0, 1.0)
    ops = assemble_weighted(annulus, motion, 0.0)
    dilated = gram_schmidt_vhar(solve_harmonic_potentials(annulus, motion, 0.0, ops=ops), ops)
    assert np.allclose(dilated.q[0].values, basis.q[0].values, atol=1e-8)
    assert dilated.alpha[0, 0] == pytest.approx(basis.alpha[0, 0] / np.sqrt(2.0), rel=1e-6)


def test_torus_cut_potential(torus, identity) -> None:
    ops = assemble_weighted(torus, identity, 0.0)
    cut = solve_cut_potentials(torus, identity, 0.0, ops=ops)
    assert cut.L == 1
    assert cut.jumps[0] == pytest.approx(1.0, abs=1e-9)
    assert abs(cut.fluxes[0]) > 0.0
    assert abs(cut.p_continuous[0].values.mean()) < 1e-10
    pairing = xhar_pairing(cut, cut.grad_p[0], ops)
    assert pairing[0] > 0.0


def test_export_basis_writes_vtk_and_csv(tmp_path, annulus, annulus_setup) -> None:
    _, basis = annulus_setup
    paths = export_basis(basis, annulus, tmp_path)
    assert [p.name for p in paths] == ["harmonic_basis.vtk", "harmonic_basis.csv"]
    assert all(p.exists() for p in paths)
    assert "q1" in paths[1].read_text(encoding="utf-8").splitlines()[0]
