"""Time derivatives of the decomposition parts at an anchor time t₀.

Every quantity lives on Ω(t₀) through the chart re-anchored at t₀, so the
derivatives are taken at fixed mesh nodes. The dotted problems are the
derivatives of the discrete equations themselves:

    lap q̇_k = −𝓛̇ q_k,   lap ṗ = −𝓛̇ p + div ḟ,   Rot ẇ ≈ ḃ − ḣ − Ṙot w,

and Richardson tables compare them with one-sided differences of the
re-solved families at t₀ + ε and t₀ + ε/10.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sps

from moving_hw.geometry_kernel import reference_metric
from moving_hw.harmonic_fields import HarmonicBasis
from moving_hw.hw_decomposition import (
    DecompositionSetup,
    decompose_solenoidal,
    divergence_residual,
    prepare_decomposition,
    scalar_potential,
    sigma_flux_rows,
    solve_vector_potential,
    weak_load,
)
from moving_hw.mesh_disc import (
    FEField,
    ReferenceMesh,
    WeightedOperators,
    _scatter,
    scalar_stiffness,
)
from moving_hw.motions import DomainMotion, anchored_motion
from moving_hw.opik_logger import track
from moving_hw.solvers import dirichlet_solve

FieldData = Callable[[np.ndarray, float], np.ndarray]

FORCING_STEP = 1e-5
RICHARDSON_EPS = 1e-2


def anchor_mesh(mesh: ReferenceMesh, motion: DomainMotion, t0: float) -> ReferenceMesh:
    """Map the reference mesh onto Ω(t₀).

    Cut planes are carried along with their normals transformed by Aᵀ; the
    topology is unchanged.
    """
    vertices = motion.inverse(mesh.vertices, t0)
    cut_points, cut_normals = mesh.cut_points, mesh.cut_normals
    if cut_points.shape[0]:
        A = reference_metric(motion, cut_points, t0).dy_dx
        cut_normals = np.einsum("nji,nj->ni", A, cut_normals)
        cut_normals /= np.linalg.norm(cut_normals, axis=1, keepdims=True)
        cut_points = motion.inverse(cut_points, t0)
    return replace(
        mesh,
        vertices=np.ascontiguousarray(vertices),
        cut_points=cut_points,
        cut_normals=cut_normals,
        name=f"{mesh.name}@{t0:g}",
    )


@dataclass(eq=False)
class AnchoredFamily:
    """Mesh of Ω(t₀), the chart anchored at t₀ and decomposition setups cached by time."""

    mesh: ReferenceMesh
    chart: DomainMotion
    t0: float
    max_workers: int = 1
    _setups: dict[float, DecompositionSetup] = field(default_factory=dict, repr=False)

    def setup(self, t: float) -> DecompositionSetup:
        """Operators and harmonic bases of the anchored chart at time ``t``."""
        key = float(t)
        if key not in self._setups:
            self._setups[key] = prepare_decomposition(self.mesh, self.chart, key, max_workers=self.max_workers)
        return self._setups[key]

    def ops(self, t: float) -> WeightedOperators:
        """Weighted operators at time ``t``."""
        return self.setup(t).ops

    def pullback(self, data: FieldData, t: float) -> np.ndarray:
        """Cell values of the pulled-back physical field ũ = A u(x, t) at the centroids."""
        metric = reference_metric(self.chart, self.mesh.centroids, t)
        return np.einsum("nij,nj->ni", metric.dy_dx, np.asarray(data(metric.point, t), dtype=float).reshape(-1, 3))

    def pullback_rate(self, data: FieldData, t: float, step: float = FORCING_STEP) -> np.ndarray:
        """Central difference of `pullback` in time."""
        return (self.pullback(data, t + step) - self.pullback(data, t - step)) / (2.0 * step)


def anchor_family(mesh: ReferenceMesh, motion: DomainMotion, t0: float, max_workers: int = 1) -> AnchoredFamily:
    """Re-anchor ``motion`` at ``t0``; a new family is built for every anchor."""
    return AnchoredFamily(
        mesh=anchor_mesh(mesh, motion, t0),
        chart=anchored_motion(motion, t0),
        t0=float(t0),
        max_workers=max_workers,
    )


@dataclass(frozen=True, eq=False)
class OperatorRates:
    """Time derivatives of the weighted operators at one time.

    Attributes:
        g_upper_rate_cell: Cell mean of ∂_s g^ij.
        g_lower_rate_cell: Derivative of the cell metric inv(mean g^ij).
        lap_rate: Σ |K| J ∇φ_a·∂_s G_K ∇φ_b, the weak form of 𝓛̇.
        lower_rate: Nodal ∂_s g_ij block.
        rot_rate: Ṙot on P1 fields.
        cell_mass_rate: ∂_s of the P0 inner product.
    """

    J: float
    dJ_ds: float
    g_upper_rate_cell: np.ndarray
    g_lower_rate_cell: np.ndarray
    lap_rate: sps.csr_matrix
    lower_rate: sps.csr_matrix
    rot_rate: sps.csr_matrix
    cell_mass_rate: sps.csr_matrix


def operator_rates(ops: WeightedOperators) -> OperatorRates:
    """Differentiate the weighted operators of ``ops`` in time."""
    mesh = ops.mesh
    nv, nt = mesh.n_vertices, mesh.n_cells
    J, dJ = ops.J, ops.dJ_ds
    g_up_rate = ops.qp_metric.dg_upper_ds.reshape(nt, 4, 3, 3).mean(axis=1)
    g_low = ops.g_lower_cell
    g_low_rate = -np.einsum("nij,njk,nkl->nil", g_low, g_up_rate, g_low)

    node_rate = reference_metric(ops.motion, mesh.vertices, ops.time).dg_lower_ds
    node_rows = np.arange(nv)[:, None] + nv * np.arange(3)[None, :]
    lower_rate = _scatter(node_rate, node_rows, node_rows, (3 * nv, 3 * nv))
    rot_rate = (ops.curl @ lower_rate / J - (dJ / J) * ops.rot).tocsr()

    cell_rows = np.arange(nt)[:, None] + nt * np.arange(3)[None, :]
    mass_rate_local = mesh.volumes[:, None, None] * (dJ * g_low + J * g_low_rate)
    return OperatorRates(
        J=J,
        dJ_ds=dJ,
        g_upper_rate_cell=g_up_rate,
        g_lower_rate_cell=g_low_rate,
        lap_rate=scalar_stiffness(mesh, J * g_up_rate),
        lower_rate=lower_rate,
        rot_rate=rot_rate,
        cell_mass_rate=_scatter(mass_rate_local, cell_rows, cell_rows, (3 * nt, 3 * nt)),
    )


def lap_derivative(ops: WeightedOperators, rates: OperatorRates) -> sps.csr_matrix:
    """Full time derivative of ``ops.lap_Lt``, including the J̇ factor."""
    return ((rates.dJ_ds / rates.J) * ops.lap_Lt + rates.lap_rate).tocsr()


def ldot_apply(q: FEField, ops: WeightedOperators, rates: OperatorRates) -> FEField:
    """Weak 𝓛̇(t₀) q tested against P1 functions.

    ``lap_Lt`` is the weak form of −𝓛, so this is −lap_rate q.
    """
    return FEField("scalar", -(rates.lap_rate @ q.values), ops.mesh)


def _dirichlet_zero(ops: WeightedOperators, rhs: np.ndarray, operation: str) -> np.ndarray:
    fixed = ops.mesh.boundary_nodes
    return dirichlet_solve(ops.lap_Lt, rhs, fixed, np.zeros(fixed.size), operation=operation)


def solve_qdot(basis: HarmonicBasis, ops: WeightedOperators, rates: OperatorRates, max_workers: int = 1) -> list[FEField]:
    """Solve lap q̇_k = −lap_rate q_k with q̇_k = 0 on ∂Ω for every k.

    Raises:
        SolverDivergence: if a Poisson solve fails.
    """

    def one(q: FEField) -> FEField:
        rhs = ldot_apply(q, ops, rates).values
        return FEField("scalar", _dirichlet_zero(ops, rhs, "solve_qdot"), ops.mesh)

    if max_workers > 1 and basis.K > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, basis.q))
    return [one(q) for q in basis.q]


def solve_pdot(p: FEField, f_rate: np.ndarray, ops: WeightedOperators, rates: OperatorRates) -> FEField:
    """Solve lap ṗ = −lap_rate p + div ḟ with ṗ = 0 on ∂Ω.

    Raises:
        SolverDivergence: if the Poisson solve fails.
    """
    rhs = ldot_apply(p, ops, rates).values + weak_load(ops, f_rate)
    return FEField("scalar", _dirichlet_zero(ops, rhs, "solve_pdot"), ops.mesh)


def rotdot_apply(w: FEField, ops: WeightedOperators, rates: OperatorRates) -> FEField:
    """Ṙot(t₀) w = J⁻¹ curl(ġ w) − (J̇/J) Rot w for a nodal field w."""
    return FEField("cell_vector3", (rates.rot_rate @ w.flat).reshape(3, -1).T, ops.mesh)


def hdot(
    b: FEField,
    b_rate: np.ndarray,
    basis: HarmonicBasis,
    q_dot: list[FEField],
    ops: WeightedOperators,
    rates: OperatorRates,
) -> FEField:
    """Differentiate h = Σ_j ⟨b, η_j⟩_t η_j with η = α G∇q.

    α is lower triangular with α Gq αᵀ = I, so α̇ = −Φ(α Ġq αᵀ) α where Φ
    keeps the strict lower triangle and half the diagonal.
    """
    mesh = ops.mesh
    if basis.K == 0:
        return FEField.zeros("cell_vector3", mesh)
    alpha = basis.alpha
    Q = np.stack([q.values for q in basis.q], axis=1)
    Q_dot = np.stack([q.values for q in q_dot], axis=1)
    lap = ops.lap_Lt
    gram_rate = Q_dot.T @ (lap @ Q) + Q.T @ (lap_derivative(ops, rates) @ Q) + Q.T @ (lap @ Q_dot)
    X = alpha @ gram_rate @ alpha.T
    alpha_rate = -(np.tril(X, -1) + 0.5 * np.diag(np.diag(X))) @ alpha

    grads = np.stack([ops.grad_cells(q) for q in Q.T])
    grads_dot = np.stack([ops.grad_cells(q) for q in Q_dot.T])
    G, G_rate = ops.g_upper_cell, rates.g_upper_rate_cell
    weight = mesh.volumes * rates.J
    weight_rate = mesh.volumes * rates.dJ_ds
    bc = b.to_cells().values
    s = np.einsum("n,nd,knd->k", weight, bc, grads)
    s_rate = np.einsum("n,nd,knd->k", weight_rate, bc, grads) + np.einsum("n,nd,knd->k", weight, b_rate, grads)
    s_rate += np.einsum("n,nd,knd->k", weight, bc, grads_dot)

    contra = np.einsum("nij,knj->kni", G, grads)
    contra_rate = np.einsum("nij,knj->kni", G_rate, grads) + np.einsum("nij,knj->kni", G, grads_dot)
    c = alpha @ s
    c_rate = alpha_rate @ s + alpha @ s_rate
    eta = np.einsum("jk,knd->jnd", alpha, contra)
    eta_rate = np.einsum("jk,knd->jnd", alpha_rate, contra) + np.einsum("jk,knd->jnd", alpha, contra_rate)
    return FEField("cell_vector3", np.einsum("j,jnd->nd", c_rate, eta) + np.einsum("j,jnd->nd", c, eta_rate), mesh)


def solve_wdot(
    b: FEField,
    b_rate: np.ndarray,
    h: FEField,
    h_dot: FEField,
    w: FEField,
    ops: WeightedOperators,
    rates: OperatorRates,
) -> tuple[FEField, FEField]:
    """Differentiate the constrained least-squares vector potential.

    The admissibility constraints do not move with t in the anchored chart,
    so ẇ solves the same saddle-point problem with target ḃ − ḣ − Ṙot w plus
    the load (Ṙotᵀ M + Rotᵀ Ṁ) r from the least-squares remainder r.

    Returns:
        ẇ and Ṙot(t₀) w.

    Raises:
        SolverDivergence: if the saddle-point solve fails.
    """
    rot_dot_w = rotdot_apply(w, ops, rates)
    remainder = (b.to_cells() - h).values - ops.rot_cells(w.values)
    r = remainder.T.ravel()
    extra = rates.rot_rate.T @ (ops.cell_mass @ r) + ops.rot.T @ (rates.cell_mass_rate @ r)
    target = b_rate - h_dot.values - rot_dot_w.values
    w_dot = solve_vector_potential(ops, target, extra_load=extra, operation="solve_wdot")
    return w_dot, rot_dot_w


def decomposition_derivative_defect(
    b_rate: np.ndarray,
    h_dot: FEField,
    rot_dot_w: FEField,
    w_dot: FEField,
    ops: WeightedOperators,
) -> float:
    """Relative size of ḃ − ḣ − Ṙot w − Rot ẇ in ⟨·,·⟩_t.

    Zero when b stays in V_har ⊕ Rot(t) along the family.
    """
    defect = b_rate - h_dot.values - rot_dot_w.values - ops.rot_cells(w_dot.values)
    scale = ops.cell_norm(b_rate)
    return ops.cell_norm(defect) / scale if scale > 0 else ops.cell_norm(defect)


@dataclass(frozen=True, eq=False)
class DotFields:
    """Derivatives of the decomposition parts at the anchor t₀, on the mesh of Ω(t₀)."""

    t0: float
    q_dot: list[FEField]
    p_dot: FEField
    w_dot: FEField
    h_dot: FEField
    b_dot: FEField
    p: FEField
    w: FEField
    h: FEField
    b: FEField
    rot_dot_w: FEField
    diagnostics: dict[str, float] = field(default_factory=dict)


def solve_dot_fields(family: AnchoredFamily, forcing: FieldData) -> DotFields:
    """Solve every dotted problem at the family's anchor."""
    t0 = family.t0
    setup = family.setup(t0)
    ops = setup.ops
    mesh = ops.mesh
    rates = operator_rates(ops)
    q_dot = solve_qdot(setup.basis, ops, rates, max_workers=family.max_workers)

    f0 = FEField("cell_vector3", family.pullback(forcing, t0), mesh)
    f_rate = family.pullback_rate(forcing, t0)
    p = scalar_potential(f0, ops)
    p_dot = solve_pdot(p, f_rate, ops, rates)
    b = f0 - FEField("cell_vector3", ops.metric_grad(p.values), mesh)
    b_rate = f_rate - np.einsum("nij,nj->ni", rates.g_upper_rate_cell, ops.grad_cells(p.values)) - ops.metric_grad(p_dot.values)

    h, w, _ = decompose_solenoidal(b, setup.basis, setup.cut_basis, ops, check=False)
    h_dot = hdot(b, b_rate, setup.basis, q_dot, ops, rates)
    w_dot, rot_dot_w = solve_wdot(b, b_rate, h, h_dot, w, ops, rates)

    bnodes = mesh.boundary_nodes
    sigma = sigma_flux_rows(ops) @ w_dot.flat
    diagnostics = {
        "q_dot_boundary_max": max((float(np.abs(q.values[bnodes]).max(initial=0.0)) for q in q_dot), default=0.0),
        "p_dot_boundary_max": float(np.abs(p_dot.values[bnodes]).max(initial=0.0)),
        "w_dot_sigma_flux_max": float(np.abs(sigma).max(initial=0.0)),
        "rot_dot_w_divergence": divergence_residual(rot_dot_w, ops),
        "decomposition_derivative_defect": decomposition_derivative_defect(b_rate, h_dot, rot_dot_w, w_dot, ops),
        "analytic_kernels": float(family.chart.analytic),
    }
    return DotFields(
        t0=t0,
        q_dot=q_dot,
        p_dot=p_dot,
        w_dot=w_dot,
        h_dot=h_dot,
        b_dot=FEField("cell_vector3", b_rate, mesh),
        p=p,
        w=w,
        h=h,
        b=b,
        rot_dot_w=rot_dot_w,
        diagnostics=diagnostics,
    )


def richardson_table(
    quantity: Callable[[float], np.ndarray],
    derivative: np.ndarray,
    t0: float,
    name: str,
    eps: float = RICHARDSON_EPS,
    norm: Callable[[np.ndarray], float] = np.linalg.norm,
) -> dict[str, float | str]:
    """Compare ``derivative`` with forward differences of ``quantity`` at ε and ε/10.

    A first-order consistent derivative gives a ratio near 10.
    """
    base = quantity(t0)
    errors = []
    for step in (eps, eps / 10.0):
        errors.append(float(norm((quantity(t0 + step) - base) / step - derivative)))
    ratio = errors[0] / errors[1] if errors[1] > 0 else float("inf")
    return {"anchor": float(t0), "quantity": name, "err_eps": errors[0], "err_eps10": errors[1], "ratio": ratio}


def _h1_norm(ops: WeightedOperators) -> Callable[[np.ndarray], float]:
    A = ops.lap_Lt + ops.mass_scalar
    return lambda v: float(np.sqrt(max(v @ (A @ v), 0.0)))


def _l2_vector_norm(ops: WeightedOperators) -> Callable[[np.ndarray], float]:
    return lambda v: float(np.sqrt(max(v @ (ops.mass_t @ v), 0.0)))


def _decomposition_at(family: AnchoredFamily, forcing: FieldData, t: float) -> tuple[FEField, FEField, FEField]:
    setup = family.setup(t)
    ops = setup.ops
    f = FEField("cell_vector3", family.pullback(forcing, t), family.mesh)
    p = scalar_potential(f, ops)
    b = f - FEField("cell_vector3", ops.metric_grad(p.values), family.mesh)
    h, w, _ = decompose_solenoidal(b, setup.basis, setup.cut_basis, ops, check=False)
    return p, h, w


def consistency_rows(family: AnchoredFamily, forcing: FieldData, dots: DotFields, eps: float = RICHARDSON_EPS) -> list[dict[str, float | str]]:
    """Richardson rows for every q̇_k, ṗ, ẇ, ḣ and Ṙot w at the anchor."""
    t0 = family.t0
    ops = family.ops(t0)
    h1, l2 = _h1_norm(ops), _l2_vector_norm(ops)
    cells = ops.cell_norm
    solved: dict[float, tuple[FEField, FEField, FEField]] = {}

    def parts(t: float) -> tuple[FEField, FEField, FEField]:
        if t not in solved:
            solved[t] = _decomposition_at(family, forcing, t)
        return solved[t]

    rows = []
    for k, q_dot in enumerate(dots.q_dot):
        rows.append(
            richardson_table(lambda t, k=k: family.setup(t).basis.q[k].values, q_dot.values, t0, f"q_dot_{k + 1}", eps, h1)
        )
    rows.append(richardson_table(lambda t: parts(t)[0].values, dots.p_dot.values, t0, "p_dot", eps, h1))
    rows.append(richardson_table(lambda t: parts(t)[2].flat, dots.w_dot.flat, t0, "w_dot", eps, l2))
    rows.append(richardson_table(lambda t: parts(t)[1].values, dots.h_dot.values, t0, "h_dot", eps, cells))
    w = dots.w
    rows.append(
        richardson_table(lambda t: family.ops(t).rot_cells(w.values), dots.rot_dot_w.values, t0, "rot_dot_w", eps, cells)
    )
    return rows


@track(name="differentiate_at")
def differentiate_at(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    t0: float,
    forcing: FieldData,
    eps: float = RICHARDSON_EPS,
    max_workers: int = 1,
    with_table: bool = True,
) -> tuple[DotFields, list[dict[str, float | str]]]:
    """Re-anchor at ``t0``, solve the dotted problems and tabulate their consistency."""
    family = anchor_family(mesh, motion, t0, max_workers=max_workers)
    dots = solve_dot_fields(family, forcing)
    rows = consistency_rows(family, forcing, dots, eps) if with_table else []
    return dots, rows


def differentiate_anchors(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    anchors: list[float],
    forcing: FieldData,
    eps: float = RICHARDSON_EPS,
    max_workers: int = 1,
) -> list[tuple[DotFields, list[dict[str, float | str]]]]:
    """Run `differentiate_at` for several anchors; anchors run concurrently."""
    if max_workers > 1 and len(anchors) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(lambda t0: differentiate_at(mesh, motion, t0, forcing, eps), anchors))
    return [differentiate_at(mesh, motion, t0, forcing, eps) for t0 in anchors]
