import numpy as np
import pytest

from moving_hw.galerkin_periodic import uniform_forcing
from moving_hw.mesh_disc import FEField
from moving_hw.motions import dilation_lambda
from moving_hw.timedep_derivatives import (
    anchor_family,
    anchor_mesh,
    differentiate_at,
    ldot_apply,
    operator_rates,
    richardson_table,
    rotdot_apply,
    solve_dot_fields,
    solve_qdot,
)

FORCE = uniform_forcing((0.3, -0.2, 0.1))


def test_anchor_mesh_of_identity_keeps_vertices(annulus, identity) -> None:
    anchored = anchor_mesh(annulus, identity, 0.4)
    assert np.allclose(anchored.vertices, annulus.vertices)
    assert anchored.name.endswith("@0.4")


def test_frozen_motion_has_zero_derivatives(annulus, identity) -> None:
    dots = solve_dot_fields(anchor_family(annulus, identity, 0.0), FORCE)
    for field in (*dots.q_dot, dots.p_dot, dots.w_dot, dots.h_dot, dots.rot_dot_w):
        assert np.abs(field.values).max() < 1e-10


def test_dotted_potentials_vanish_on_boundary(annulus, pulsating) -> None:
    dots, rows = differentiate_at(annulus, pulsating, 0.3, FORCE, with_table=False)
    assert rows == []
    assert dots.diagnostics["q_dot_boundary_max"] == 0.0
    assert dots.diagnostics["p_dot_boundary_max"] == 0.0
    assert np.abs(dots.q_dot[0].values).max() > 0.0


def test_dilation_leaves_harmonic_potential_fixed(annulus, dilation) -> None:
    family = anchor_family(annulus, dilation, 0.1)
    setup = family.setup(0.1)
    q_dot = solve_qdot(setup.basis, setup.ops, operator_rates(setup.ops))
    assert np.abs(q_dot[0].values).max() < 1e-8


def test_dilation_rot_rate(annulus, dilation, rng) -> None:
    t0 = 0.15
    family = anchor_family(annulus, dilation, t0)
    ops = family.ops(t0)
    w = FEField("vector3", rng.normal(size=(annulus.n_vertices, 3)), family.mesh)
    rate = 0.2 * 2.0 * np.pi * np.cos(2.0 * np.pi * t0) / dilation_lambda(dilation, t0)
    expected = -rate * ops.rot_cells(w.values)
    assert np.allclose(rotdot_apply(w, ops, operator_rates(ops)).values, expected, atol=1e-9 * np.abs(expected).max())


def test_dilation_laplacian_rate(annulus, dilation, rng) -> None:
    t0 = 0.15
    family = anchor_family(annulus, dilation, t0)
    ops = family.ops(t0)
    q = FEField("scalar", rng.normal(size=annulus.n_vertices), family.mesh)
    rate = 0.2 * 2.0 * np.pi * np.cos(2.0 * np.pi * t0) / dilation_lambda(dilation, t0)
    weak_L_q = -(ops.lap_Lt @ q.values)
    expected = -2.0 * rate * weak_L_q
    assert np.allclose(ldot_apply(q, ops, operator_rates(ops)).values, expected, atol=1e-8 * np.abs(expected).max())


def test_richardson_table_on_sine() -> None:
    row = richardson_table(lambda t: np.array([np.sin(t)]), np.array([np.cos(1.0)]), 1.0, "sine")
    assert row["quantity"] == "sine"
    assert row["ratio"] == pytest.approx(10.0, rel=0.1)


@pytest.mark.slow
def test_pulsating_derivatives_are_first_order_consistent(annulus, pulsating) -> None:
    _, rows = differentiate_at(annulus, pulsating, 0.3, FORCE)
    by_name = {row["quantity"]: row for row in rows}
    assert set(by_name) == {"q_dot_1", "p_dot", "w_dot", "h_dot", "rot_dot_w"}
    for name in ("q_dot_1", "p_dot", "rot_dot_w"):
        assert 6.0 <= by_name[name]["ratio"] <= 14.0, by_name[name]
