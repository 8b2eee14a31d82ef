"""Harmonic vector fields of the moving domain.

V_har is spanned by the gradients of the potentials q_k (q_k = δ_kl on Γ_l,
weighted-harmonic inside); X_har by the gradients of the cut potentials p_l,
which jump by δ_lj across Σ_j and have zero normal derivative on ∂Ω.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from moving_hw.errors import DependentBasis, UnknownLabel
from moving_hw.mesh_disc import (
    FEField,
    ReferenceMesh,
    WeightedOperators,
    assemble_weighted,
    boundary_indicator,
)
from moving_hw.motions import DomainMotion
from moving_hw.reporting import write_field_csv, write_vtk
from moving_hw.solvers import dirichlet_solve, pinned_neumann_solve

GRAM_TOL = 1e-12
GRAM_COND_MAX = 1e12


@dataclass(frozen=True, eq=False)
class HarmonicBasis:
    """Potentials q_k, their gradients ∇q_k and the orthonormalized η_j = Σ α_jk ∇q_k."""

    q: list[FEField]
    grad_q: list[FEField]
    time: float
    alpha: np.ndarray | None = None
    eta: list[FEField] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        """Dimension of V_har."""
        return len(self.q)


@dataclass(frozen=True, eq=False)
class CutPotentialBasis:
    """Cut potentials p_l and their single-valued gradients ∇p_l.

    ``p`` holds cellwise P1 values (nt, 4), double-valued across Σ_l;
    ``p_continuous`` is the continuous part p̂_l with p_l = p̂_l + σ_l.
    """

    p: list[np.ndarray]
    p_continuous: list[FEField]
    grad_p: list[FEField]
    time: float
    jumps: list[float] = field(default_factory=list)
    fluxes: list[float] = field(default_factory=list)

    @property
    def L(self) -> int:
        """Dimension of X_har."""
        return len(self.p)


def _harmonic_potential(ops: WeightedOperators, k: int) -> tuple[np.ndarray, float]:
    mesh = ops.mesh
    fixed = mesh.boundary_nodes
    values = (mesh.boundary_vertex_labels[fixed] == k).astype(float)
    q = dirichlet_solve(ops.lap_Lt, np.zeros(mesh.n_vertices), fixed, values, operation="solve_harmonic_potentials")
    free = mesh.interior_nodes
    lhs = ops.lap_Lt[free] @ q
    scale = np.linalg.norm(ops.lap_Lt[free][:, fixed] @ values) or 1.0
    return q, float(np.linalg.norm(lhs) / scale)


def solve_harmonic_potentials(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    t: float,
    ops: WeightedOperators | None = None,
    max_workers: int = 1,
) -> HarmonicBasis:
    """Solve 𝓛(t) q_k = 0 with q_k = δ_kl on Γ_l for k = 1..K.

    Returns an empty basis when the domain has no inner boundary.

    Raises:
        SolverDivergence: if a Laplace solve fails.
    """
    ops = ops or assemble_weighted(mesh, motion, t)
    labels = list(range(1, mesh.K + 1))
    if max_workers > 1 and len(labels) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            solved = list(pool.map(lambda k: _harmonic_potential(ops, k), labels))
    else:
        solved = [_harmonic_potential(ops, k) for k in labels]
    q = [FEField("scalar", values, mesh) for values, _ in solved]
    grad_q = [FEField("cell_vector3", ops.metric_grad(values), mesh) for values, _ in solved]
    return HarmonicBasis(q=q, grad_q=grad_q, time=float(t), residuals=[res for _, res in solved])


def _gram(fields: list[FEField], ops: WeightedOperators) -> np.ndarray:
    n = len(fields)
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            gram[i, j] = gram[j, i] = ops.cell_inner(fields[i].values, fields[j].values)
    return gram


def gram_schmidt_vhar(basis: HarmonicBasis, ops: WeightedOperators) -> HarmonicBasis:
    """Orthonormalize ∇q_1..∇q_K in ⟨·,·⟩_t by classical Gram-Schmidt.

    η_1 = ∇q_1/‖∇q_1‖ and η_j = (∇q_j − Σ_{k<j} ⟨∇q_j, η_k⟩ η_k)/norm; the
    coefficients are kept as the lower-triangular α with η = α ∇q. A second
    pass re-orthogonalizes when K > 3.

    Raises:
        DependentBasis: if a Gram-Schmidt denominator is below 1e-12 or the Gram matrix is ill-conditioned.
    """
    K = basis.K
    if K == 0:
        return replace(basis, alpha=np.zeros((0, 0)), eta=[])
    gram = _gram(basis.grad_q, ops)
    if np.linalg.cond(gram) > GRAM_COND_MAX:
        raise DependentBasis(f"Gram matrix condition {np.linalg.cond(gram):.3e}", operation="gram_schmidt_vhar")
    passes = 2 if K > 3 else 1
    alpha = np.zeros((K, K))
    for j in range(K):
        coeff = np.zeros(K)
        coeff[j] = 1.0
        for _ in range(passes):
            projections = [coeff @ gram @ alpha[k] for k in range(j)]
            for k, proj in enumerate(projections):
                coeff = coeff - proj * alpha[k]
        norm_sq = float(coeff @ gram @ coeff)
        if norm_sq < GRAM_TOL * gram[j, j]:
            raise DependentBasis(f"Gram-Schmidt denominator {norm_sq:.3e} for k={j + 1}", operation="gram_schmidt_vhar")
        alpha[j] = coeff / np.sqrt(norm_sq)
    stacked = np.stack([g.values for g in basis.grad_q])
    eta = [FEField("cell_vector3", np.einsum("k,knd->nd", alpha[j], stacked), basis.grad_q[0].mesh) for j in range(K)]
    return replace(basis, alpha=alpha, eta=eta)


def project_onto_vhar(b: FEField, basis: HarmonicBasis, ops: WeightedOperators) -> tuple[FEField, np.ndarray]:
    """Return h = Σ_k ⟨b, η_k⟩_t η_k and the coefficients ⟨b, η_k⟩_t."""
    b = b.to_cells()
    h = FEField.zeros("cell_vector3", b.mesh)
    coeffs = np.array([ops.cell_inner(b.values, eta.values) for eta in basis.eta])
    for c, eta in zip(coeffs, basis.eta):
        h = h + eta * float(c)
    return h, coeffs


def boundary_fluxes(b: FEField, ops: WeightedOperators) -> np.ndarray:
    """Weak outward fluxes of a cell field through Γ_1..Γ_K."""
    mesh = ops.mesh
    b = b.to_cells()
    return np.array(
        [np.einsum("nd,nd->", ops.flux_functional(boundary_indicator(mesh, k)[mesh.tets]), b.values) for k in range(1, mesh.K + 1)]
    )


def flux_coefficients(b: FEField, basis: HarmonicBasis, ops: WeightedOperators) -> np.ndarray:
    """Return Σ_l α_kl ∫_{Γ_l} b·ν dS, equal to ⟨b, η_k⟩_t for weakly divergence-free b."""
    if basis.alpha is None:
        raise DependentBasis("basis is not orthonormalized", operation="flux_coefficients")
    return basis.alpha @ boundary_fluxes(b, ops)


def solve_cut_potentials(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    t: float,
    ops: WeightedOperators | None = None,
) -> CutPotentialBasis:
    """Solve for p_l with [p_l] = δ_lj across Σ_j and zero Neumann data on ∂Ω.

    p_l = p̂_l + σ_l with σ_l the cut seed; p̂_l is the continuous P1 solution of
    ⟨∇φ, ∇p̂_l⟩_t = −⟨∇φ, ∇σ_l⟩_t for every P1 test function φ.

    Raises:
        SolverDivergence: if the Neumann solve fails.
    """
    ops = ops or assemble_weighted(mesh, motion, t)
    p, p_cont, grads, jumps, fluxes = [], [], [], [], []
    cells = ops.mesh.volumes * ops.J
    for ell in range(1, mesh.L + 1):
        seed = mesh.cut_seeds[ell - 1]
        grad_seed = np.einsum("na,nad->nd", seed, mesh.grad_bary)
        seed_flux = cells[:, None] * np.einsum("nij,nj->ni", ops.g_upper_cell, grad_seed)
        local = -np.einsum("nd,nad->na", seed_flux, mesh.grad_bary)
        rhs = np.zeros(mesh.n_vertices)
        np.add.at(rhs, mesh.tets, local)
        p_hat = pinned_neumann_solve(ops.lap_Lt, rhs, operation="solve_cut_potentials")
        p_hat -= p_hat.mean()
        cellwise = p_hat[mesh.tets] + seed
        grad = np.einsum("nij,nj->ni", ops.g_upper_cell, ops.grad_cells(p_hat) + grad_seed)
        p.append(cellwise)
        p_cont.append(FEField("scalar", p_hat, mesh))
        grads.append(FEField("cell_vector3", grad, mesh))
        jumps.append(_cut_jump(mesh, cellwise, ell))
        fluxes.append(float(np.einsum("nd,nd->", ops.flux_functional(seed), grad)))
    return CutPotentialBasis(p=p, p_continuous=p_cont, grad_p=grads, time=float(t), jumps=jumps, fluxes=fluxes)


def _cut_jump(mesh: ReferenceMesh, cellwise: np.ndarray, ell: int) -> float:
    """Mean of p⁻ − p⁺ over the nodes of Σ_l, taken from the cells on either side of each cut facet."""
    faces, owners = mesh.face_table
    nv = mesh.n_vertices
    keys = (faces[:, 0] * nv + faces[:, 1]) * nv + faces[:, 2]
    cut = np.sort(mesh.cut_facets[mesh.cut_labels == ell], axis=1)
    pairs = owners[np.searchsorted(keys, (cut[:, 0] * nv + cut[:, 1]) * nv + cut[:, 2])]
    side = (mesh.centroids[pairs[:, 0]] - mesh.cut_points[ell - 1]) @ mesh.cut_normals[ell - 1]
    behind = np.where(side < 0, pairs[:, 0], pairs[:, 1])
    ahead = np.where(side < 0, pairs[:, 1], pairs[:, 0])
    jumps = []
    for facet, minus, plus in zip(cut, behind, ahead):
        for node in facet:
            a = int(np.flatnonzero(mesh.tets[minus] == node)[0])
            b = int(np.flatnonzero(mesh.tets[plus] == node)[0])
            jumps.append(cellwise[minus, a] - cellwise[plus, b])
    return float(np.mean(jumps))


def xhar_pairing(cut_basis: CutPotentialBasis, b: FEField, ops: WeightedOperators) -> np.ndarray:
    """Return ⟨b, ∇p_l⟩_t for every cut potential."""
    b = b.to_cells()
    return np.array([ops.cell_inner(b.values, g.values) for g in cut_basis.grad_p])


def sigma_fluxes(b: FEField, ops: WeightedOperators) -> np.ndarray:
    """Weak fluxes of a cell field through Σ_1..Σ_L."""
    mesh = ops.mesh
    b = b.to_cells()
    return np.array([np.einsum("nd,nd->", ops.flux_functional(mesh.cut_seeds[ell]), b.values) for ell in range(mesh.L)])


def radial_decay_exponent(basis: HarmonicBasis, ops: WeightedOperators, k: int = 1, trim: float = 0.15) -> float:
    """Fit the slope of log|∇q_k| against log r over cell centroids.

    Cells within ``trim`` of the radial range at either boundary are dropped.
    A slope near −2 means ∇q_k ∝ x/|x|³.
    """
    if k < 1 or k > basis.K:
        raise UnknownLabel(f"no harmonic potential q_{k}", module="harmonic_fields", operation="radial_decay_exponent")
    mesh = ops.mesh
    grad = basis.grad_q[k - 1].values
    magnitude = np.sqrt(np.einsum("ni,nij,nj->n", grad, ops.g_lower_cell, grad))
    r = np.linalg.norm(mesh.centroids, axis=1)
    lo, hi = r.min(), r.max()
    keep = (r > lo + trim * (hi - lo)) & (r < hi - trim * (hi - lo)) & (magnitude > 0)
    slope, _ = np.polyfit(np.log(r[keep]), np.log(magnitude[keep]), 1)
    return float(slope)


def export_basis(
    basis: HarmonicBasis,
    mesh: ReferenceMesh,
    out_dir: str | Path,
    cut_basis: CutPotentialBasis | None = None,
) -> list[Path]:
    """Write q_k and the cell fields ∇q_k, η_k (and ∇p_l) as CSV and legacy VTK."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    point_data = {f"q{k + 1}": q.values for k, q in enumerate(basis.q)}
    cell_data = {f"grad_q{k + 1}": g.values for k, g in enumerate(basis.grad_q)}
    cell_data.update({f"eta{k + 1}": e.values for k, e in enumerate(basis.eta)})
    if cut_basis is not None:
        cell_data.update({f"grad_p{ell + 1}": g.values for ell, g in enumerate(cut_basis.grad_p)})
        point_data.update({f"p_hat{ell + 1}": p.values for ell, p in enumerate(cut_basis.p_continuous)})
    return [
        write_vtk(out / "harmonic_basis.vtk", mesh, point_data, cell_data, title="harmonic basis"),
        write_field_csv(out / "harmonic_basis.csv", point_data),
    ]
