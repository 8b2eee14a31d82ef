import numpy as np
import pytest
import scipy.sparse as sps

from moving_hw import solvers
from moving_hw.errors import SolverDivergence
from moving_hw.solvers import AndersonMixer, SaddlePointSystem, cg_solve, dirichlet_solve, kkt_solve, pinned_neumann_solve


def laplacian_1d(n: int) -> sps.csr_matrix:
    return sps.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def test_cg_solves_spd_system() -> None:
    A = laplacian_1d(30)
    x = np.linspace(0.0, 1.0, 30) ** 2
    assert np.allclose(cg_solve(A, A @ x), x, atol=1e-8)


def test_cg_zero_rhs_short_circuits() -> None:
    assert not np.any(cg_solve(laplacian_1d(5), np.zeros(5)))


def test_cg_reports_divergence() -> None:
    with pytest.raises(SolverDivergence) as info:
        cg_solve(laplacian_1d(200), np.ones(200), maxiter=2, operation="tridiagonal")
    assert info.value.operation == "tridiagonal"


@pytest.mark.parametrize("n", [5, 40])
def test_cg_budget_scales_with_system_size(monkeypatch, n) -> None:
    seen = {}

    def fake_cg(A, b, x0=None, rtol=None, maxiter=None, M=None):
        seen["maxiter"] = maxiter
        return np.zeros_like(b), 0

    monkeypatch.setattr(solvers, "cg", fake_cg)
    cg_solve(laplacian_1d(n), np.ones(n))
    assert seen["maxiter"] == 10 * n
    cg_solve(laplacian_1d(n), np.ones(n), maxiter=3)
    assert seen["maxiter"] == 3


def test_dirichlet_solve_reproduces_linear_profile() -> None:
    n = 11
    x = dirichlet_solve(laplacian_1d(n), np.zeros(n), np.array([0, n - 1]), np.array([0.0, 1.0]))
    assert np.allclose(x, np.linspace(0.0, 1.0, n), atol=1e-9)


def test_pinned_neumann_solve() -> None:
    n = 8
    A = laplacian_1d(n).tolil()
    A[0, 0] = A[n - 1, n - 1] = 1.0
    rhs = np.zeros(n)
    rhs[2], rhs[5] = 1.0, -1.0
    x = pinned_neumann_solve(A.tocsr(), rhs)
    assert x[0] == 0.0
    assert np.allclose(A @ x, rhs, atol=1e-9)


def test_kkt_solve_equality_constrained_minimum() -> None:
    # min ½|x|² subject to x0 + x1 + x2 = 3
    x, multipliers = kkt_solve(sps.eye(3, format="csr"), np.zeros(3), sps.csr_matrix(np.ones((1, 3))), np.array([3.0]))
    assert np.allclose(x, 1.0)
    assert multipliers[0] == pytest.approx(-1.0, abs=1e-8)


def test_saddle_point_system_tolerates_redundant_rows() -> None:
    C = sps.csr_matrix(np.array([[1.0, -1.0, 0.0], [2.0, -2.0, 0.0]]))
    system = SaddlePointSystem(sps.eye(3, format="csr"), C)
    x, _ = system.solve(np.array([1.0, 3.0, -1.0]))
    assert x[0] == pytest.approx(x[1], abs=1e-8)
    assert x == pytest.approx([2.0, 2.0, -1.0], abs=1e-6)


def test_anderson_converges_on_linear_contraction() -> None:
    M = np.array([[0.6, 0.3], [-0.2, 0.7]])
    c = np.array([1.0, -2.0])
    fixed = np.linalg.solve(np.eye(2) - M, c)
    mixer = AndersonMixer(depth=3)
    x = np.zeros(2)
    for _ in range(20):
        x = mixer.update(x, M @ x + c)
    assert np.allclose(x, fixed, atol=1e-8)


def test_anderson_first_step_is_damped_picard() -> None:
    mixer = AndersonMixer(depth=2, relax=0.5)
    assert np.allclose(mixer.update(np.zeros(2), np.array([2.0, 4.0])), [1.0, 2.0])
    mixer.reset()
    assert np.allclose(mixer.update(np.ones(2), np.ones(2)), 1.0)
