"""Sparse linear solves and fixed-point acceleration shared by the numerical modules."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, cg, splu

from moving_hw.errors import SolverDivergence

CG_RTOL = 1e-10
CG_MAXITER_FACTOR = 10
KKT_REGULARIZATION = 1e-12


def jacobi_preconditioner(A: sps.spmatrix) -> LinearOperator:
    """Return the inverse-diagonal preconditioner of ``A``."""
    diag = np.asarray(A.diagonal(), dtype=float)
    inv = np.where(np.abs(diag) > 0.0, 1.0 / np.where(diag == 0.0, 1.0, diag), 1.0)
    return LinearOperator(A.shape, matvec=lambda x: inv * x, dtype=float)


def cg_solve(
    A: sps.spmatrix,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = CG_RTOL,
    maxiter: int | None = None,
    operation: str = "cg_solve",
) -> np.ndarray:
    """Solve the SPD system A x = b with Jacobi-preconditioned CG.

    ``maxiter`` defaults to CG_MAXITER_FACTOR times the system size.

    Raises:
        SolverDivergence: if CG stops before reaching ``rtol``.
    """
    if not np.any(b):
        return np.zeros_like(b)
    if maxiter is None:
        maxiter = CG_MAXITER_FACTOR * A.shape[0]
    x, info = cg(A, b, x0=x0, rtol=rtol, maxiter=maxiter, M=jacobi_preconditioner(A))
    if info != 0:
        residual = float(np.linalg.norm(A @ x - b) / np.linalg.norm(b))
        raise SolverDivergence(f"CG stopped with info={info}, relative residual {residual:.3e}", operation=operation)
    return x


def dirichlet_solve(
    A: sps.spmatrix,
    rhs: np.ndarray,
    fixed: np.ndarray,
    fixed_values: np.ndarray,
    operation: str = "dirichlet_solve",
) -> np.ndarray:
    """Solve A x = rhs on the free DOFs with x[fixed] = fixed_values."""
    n = A.shape[0]
    free = np.setdiff1d(np.arange(n), fixed)
    x = np.zeros(n)
    x[fixed] = fixed_values
    A = sps.csr_matrix(A)
    reduced_rhs = rhs[free] - A[free][:, fixed] @ fixed_values
    x[free] = cg_solve(A[free][:, free].tocsr(), reduced_rhs, operation=operation)
    return x


def pinned_neumann_solve(A: sps.spmatrix, rhs: np.ndarray, pin: int = 0, operation: str = "neumann_solve") -> np.ndarray:
    """Solve a singular Neumann system by pinning one DOF to zero; the rhs is made compatible first."""
    rhs = rhs - rhs.mean()
    return dirichlet_solve(A, rhs, np.array([pin]), np.zeros(1), operation=operation)


class SaddlePointSystem:
    """Factored KKT matrix [[H, Cᵀ], [C, −εI]] for repeated solves with one constraint set.

    A tiny negative block on the multipliers keeps redundant constraints solvable.

    Raises:
        SolverDivergence: if the factorization fails.
    """

    def __init__(self, H: sps.spmatrix, C: sps.spmatrix, operation: str = "kkt_solve") -> None:
        self.n, self.m = H.shape[0], C.shape[0]
        self.operation = operation
        scale = max(float(np.abs(H.diagonal()).max()), 1.0)
        K = sps.bmat(
            [[sps.csr_matrix(H), sps.csr_matrix(C).T], [sps.csr_matrix(C), -KKT_REGULARIZATION * scale * sps.eye(self.m)]],
            format="csc",
        )
        try:
            self._lu = splu(K)
        except RuntimeError as exc:
            raise SolverDivergence(f"saddle-point factorization failed: {exc}", operation=operation) from exc

    def solve(self, f: np.ndarray, d: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return the minimizer of ½xᵀHx − fᵀx subject to Cx = d and the multipliers."""
        d = np.zeros(self.m) if d is None else d
        sol = self._lu.solve(np.concatenate([f, d]))
        if not np.all(np.isfinite(sol)):
            raise SolverDivergence("saddle-point solve produced non-finite values", operation=self.operation)
        return sol[: self.n], sol[self.n :]


def kkt_solve(
    H: sps.spmatrix,
    f: np.ndarray,
    C: sps.spmatrix,
    d: np.ndarray,
    operation: str = "kkt_solve",
) -> tuple[np.ndarray, np.ndarray]:
    """Minimize ½xᵀHx − fᵀx subject to Cx = d via the saddle-point system.

    Returns:
        The minimizer and the Lagrange multipliers.
    """
    return SaddlePointSystem(H, C, operation=operation).solve(f, d)


@dataclass
class AndersonMixer:
    """Anderson acceleration of a fixed-point map G over the last ``depth`` iterates.

    The mixed update is x ← Σ ω_i ((1 − relax) x_i + relax G(x_i)) with ω
    minimizing the combined residual subject to Σ ω_i = 1.
    """

    depth: int = 3
    relax: float = 1.0
    _iterates: deque[np.ndarray] = field(default_factory=deque, repr=False)
    _images: deque[np.ndarray] = field(default_factory=deque, repr=False)

    def reset(self) -> None:
        """Forget the stored history."""
        self._iterates.clear()
        self._images.clear()

    def update(self, x: np.ndarray, gx: np.ndarray) -> np.ndarray:
        """Record (x, G(x)) and return the next iterate."""
        self._iterates.append(np.array(x, dtype=float))
        self._images.append(np.array(gx, dtype=float))
        while len(self._iterates) > self.depth + 1:
            self._iterates.popleft()
            self._images.popleft()
        xs = np.array(self._iterates)
        gs = np.array(self._images)
        fs = gs - xs
        if len(fs) == 1:
            return (1.0 - self.relax) * xs[0] + self.relax * gs[0]
        A = (fs[:-1] - fs[-1]).T
        try:
            omega = np.linalg.lstsq(A, -fs[-1], rcond=None)[0]
        except np.linalg.LinAlgError:
            self.reset()
            return (1.0 - self.relax) * x + self.relax * gx
        omega = np.append(omega, 1.0 - omega.sum())
        return omega @ ((1.0 - self.relax) * xs + self.relax * gs)
