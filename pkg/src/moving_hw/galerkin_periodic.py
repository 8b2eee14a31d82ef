"""Galerkin solver for time-periodic flow through a moving domain.

The velocity on the reference domain is ũ = b̃_ε + Σ_k h_k(t) ψ_k(t). Υ is a
fixed set of zero-trace, weakly divergence-free P1 fields and ψ(t) = μ(t) Υ is
orthonormal in ⟨·,·⟩_t, which turns the weak system into the explicit ODE

    ḣ = μ r(μᵀh) + Φ(μ Ġ μᵀ)ᵀ h,

where r collects the weak Stokes, transport, convection and forcing terms in
Υ coordinates, Ġ is the time derivative of the Υ Gram matrix and Φ takes the
lower triangle with half the diagonal. A time-periodic solution is a fixed
point of the Poincaré map a ↦ h(T).

Convection enters in skew-symmetric form, and the symmetric part of the
transport term is replaced by ½Ġ, so the discrete energy identity holds to
roundoff.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sps

from moving_hw.errors import BlowupDetected, DependentBasis, FluxViolation, NoConvergence
from moving_hw.geometry_kernel import MetricSample, reference_metric, rot_kernels_at
from moving_hw.harmonic_fields import GRAM_COND_MAX
from moving_hw.hw_decomposition import (
    DecompositionSetup,
    decompose_solenoidal,
    divergence_residual,
    prepare_decomposition,
)
from moving_hw.leray_cutoff import CutoffProfile, build_cutoff
from moving_hw.mesh_disc import (
    SHAPE_AT_QP,
    BoundaryRule,
    FEField,
    ReferenceMesh,
    WeightedOperators,
    assemble_weighted,
    boundary_quadrature,
    nodal_average,
    poincare_constant,
    quadrature_metric,
)
from moving_hw.motions import DomainMotion, identity_motion
from moving_hw.opik_logger import status, track
from moving_hw.solvers import AndersonMixer, SaddlePointSystem

ORTHO_TOL = 1e-10
C_SOBOLEV = 3.0**-0.5 * 2.0 ** (2.0 / 3.0) * np.pi ** (-2.0 / 3.0)
GFC_TOL = 1e-8
PERIODIC_TOL = 1e-6
PICARD_DAMPING = 0.5
STALL_RATIO = 0.5
BLOWUP_FACTOR = 1e6
MIN_STEPS = 64
BALL_SLACK = 1e-3
RK4_STABILITY = 2.5

FieldData = Callable[[np.ndarray, float], np.ndarray]
"""Physical vector data: (points (n, 3), t) → vectors (n, 3)."""

_WAVES = sorted((k for k in product(range(4), repeat=3) if any(k)), key=lambda k: (sum(c * c for c in k), k))


def radial_flux_beta(flux: float, modulation: float = 0.0, period_T: float = 1.0) -> FieldData:
    """Return β(x, t) = −Φ(t) x / (4π|x|³) with Φ(t) = Φ(1 + modulation·sin(2πt/T)).

    On a shell this carries flux Φ out through the inner sphere and −Φ through
    the outer one.
    """

    def beta(x: np.ndarray, t: float) -> np.ndarray:
        amplitude = flux * (1.0 + modulation * np.sin(2.0 * np.pi * t / period_T))
        r = np.linalg.norm(x, axis=1)
        return -amplitude / (4.0 * np.pi) * x / (r**3)[:, None]

    return beta


def swirl_forcing(amplitude: float, period_T: float = 1.0) -> FieldData:
    """Return f(x, t) = a·sin(2πt/T)·(−x₂, x₁, 0)."""

    def force(x: np.ndarray, t: float) -> np.ndarray:
        s = amplitude * np.sin(2.0 * np.pi * t / period_T)
        return s * np.stack([-x[:, 1], x[:, 0], np.zeros(len(x))], axis=1)

    return force


def uniform_forcing(vector: tuple[float, float, float]) -> FieldData:
    """Return the constant force f(x, t) = vector."""
    value = np.asarray(vector, dtype=float)

    def force(x: np.ndarray, t: float) -> np.ndarray:
        return np.broadcast_to(value, x.shape).copy()

    return force


def smooth_forcing(amplitude: float, period_T: float = 1.0) -> FieldData:
    """Return a smooth field with nonzero divergence and curl, modulated by 1 + ½sin(2πt/T)."""

    def force(x: np.ndarray, t: float) -> np.ndarray:
        s = amplitude * (1.0 + 0.5 * np.sin(2.0 * np.pi * t / period_T))
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        return s * np.stack([np.sin(x2) + x1 * x3, np.cos(x3) + x1**2, x1 * x2], axis=1)

    return force


def _nodal_jets(mesh: ReferenceMesh, nodal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature values (..., nt, 4, 3) and cell gradients (..., nt, 3, 3) of nodal P1 vectors (..., nv, 3)."""
    local = nodal[..., mesh.tets, :]
    values = np.einsum("aq,...nad->...nqd", SHAPE_AT_QP, local)
    grads = np.einsum("...nai,nak->...nik", local, mesh.grad_bary)
    return values, grads


@dataclass(frozen=True, eq=False)
class GalerkinBasis:
    """The fixed fields Υ_k with their quadrature jets and the cached factors μ(t).

    ``upsilon`` is (m, nv, 3); ``grads[k, n, i, j]`` is ∂_j Υ_k^i on cell n.
    """

    mesh: ReferenceMesh
    upsilon: np.ndarray
    values_qp: np.ndarray
    grads: np.ndarray
    psi_cache: dict[float, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        """Number of modes."""
        return self.upsilon.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Component-major flattening, (m, 3·nv)."""
        return self.upsilon.transpose(0, 2, 1).reshape(self.m, -1)

    def combine(self, coeffs: np.ndarray) -> FEField:
        """Return Σ_k c_k Υ_k as a nodal field."""
        return FEField("vector3", np.einsum("k,kvd->vd", coeffs, self.upsilon), self.mesh)


def _seed_fields(mesh: ReferenceMesh, m: int) -> np.ndarray:
    lo = mesh.vertices.min(axis=0)
    z = (mesh.vertices - lo) / np.ptp(mesh.vertices, axis=0)
    seeds = np.zeros((m, mesh.n_vertices, 3))
    for j in range(m):
        wave = np.asarray(_WAVES[(j // 3) % len(_WAVES)], dtype=float)
        seeds[j, :, j % 3] = np.sin(np.pi * (z @ wave) + 0.37 * (j // 3))
    return seeds


def _orthonormal_factor(gram: np.ndarray, operation: str) -> np.ndarray:
    """Return μ = L⁻¹ for gram = LLᵀ, so μ·gram·μᵀ = I with μ lower triangular."""
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_MAX:
        raise DependentBasis(f"Gram matrix condition {cond:.3e} exceeds {GRAM_COND_MAX:.0e}", module="galerkin_periodic", operation=operation)
    L = scipy.linalg.cholesky(0.5 * (gram + gram.T), lower=True)
    mu = scipy.linalg.solve_triangular(L, np.eye(gram.shape[0]), lower=True)
    defect = np.abs(mu @ gram @ mu.T - np.eye(gram.shape[0])).max()
    if defect > ORTHO_TOL:
        raise DependentBasis(f"orthonormality defect {defect:.3e}", module="galerkin_periodic", operation=operation)
    return mu


def build_upsilon(mesh: ReferenceMesh, m: int) -> GalerkinBasis:
    """Build m zero-trace, weakly divergence-free fields from trigonometric seeds.

    Each seed is replaced by its nearest field (Euclidean L²) with zero
    boundary values and zero divergence tested against interior P1
    functions; the results are orthonormalized once in the Euclidean product.

    Raises:
        DependentBasis: if the projected seeds are (numerically) dependent.
    """
    if m < 1:
        raise ValueError("m must be positive")
    nv = mesh.n_vertices
    ops = assemble_weighted(mesh, identity_motion(), 0.0)
    mass = sps.kron(sps.eye(3), ops.mass_scalar, format="csr")
    bnodes = mesh.boundary_nodes
    fixed = (bnodes[None, :] + nv * np.arange(3)[:, None]).ravel()
    selector = sps.csr_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)), shape=(fixed.size, 3 * nv))
    system = SaddlePointSystem(mass, sps.vstack([ops.div[mesh.interior_nodes], selector], format="csr"), operation="build_upsilon")
    seeds = _seed_fields(mesh, m)
    projected = np.array([system.solve(mass @ seed.T.ravel())[0] for seed in seeds])
    projected[:, fixed] = 0.0
    mu = _orthonormal_factor(projected @ (mass @ projected.T), operation="build_upsilon")
    upsilon = (mu @ projected).reshape(m, 3, nv).transpose(0, 2, 1).copy()
    values, grads = _nodal_jets(mesh, upsilon)
    return GalerkinBasis(mesh=mesh, upsilon=upsilon, values_qp=values, grads=grads)


def orthonormalize_basis_at(basis: GalerkinBasis, ops: WeightedOperators) -> tuple[np.ndarray, list[FEField]]:
    """Return μ(t) and ψ(t) = μ(t) Υ, orthonormal in ⟨·,·⟩_t.

    Raises:
        DependentBasis: if the Gram matrix is singular or orthonormality fails.
    """
    Y = basis.flat
    mu = _orthonormal_factor(Y @ (ops.mass_t @ Y.T), operation="orthonormalize_basis_at")
    basis.psi_cache[round(ops.time, 12)] = mu
    psi = [FEField.from_flat("vector3", row, basis.mesh) for row in mu @ Y]
    return mu, psi


@dataclass(frozen=True)
class _QuadGeometry:
    """Metric data at the quadrature points, shaped (nt, 4, ...)."""

    weight: np.ndarray
    g_low: np.ndarray
    g_up: np.ndarray
    gamma: np.ndarray
    mass_rate: np.ndarray
    dy_dt: np.ndarray
    strain: np.ndarray
    dy_dx: np.ndarray
    points: np.ndarray

    @classmethod
    def from_metric(cls, mesh: ReferenceMesh, metric: MetricSample) -> _QuadGeometry:
        nt = mesh.n_cells
        quarter = (mesh.volumes / 4.0)[:, None]
        J = metric.J.reshape(nt, 4)
        g_low = metric.g_lower.reshape(nt, 4, 3, 3)
        rate = metric.dg_lower_ds.reshape(nt, 4, 3, 3) * J[..., None, None] + g_low * metric.dJ_ds.reshape(nt, 4)[..., None, None]
        return cls(
            weight=quarter * J,
            g_low=g_low,
            g_up=metric.g_upper.reshape(nt, 4, 3, 3),
            gamma=metric.christoffel.reshape(nt, 4, 3, 3, 3),
            mass_rate=quarter[..., None, None] * rate,
            dy_dt=metric.dy_dt.reshape(nt, 4, 3),
            strain=np.einsum("nik,nkj->nij", metric.dy_dx, metric.dx_dy_dt).reshape(nt, 4, 3, 3),
            dy_dx=metric.dy_dx.reshape(nt, 4, 3, 3),
            points=metric.point.reshape(nt, 4, 3),
        )

    def covariant(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """∇_j v^i at quadrature points, indexed [..., n, q, i, j]."""
        return grads[..., None, :, :] + np.einsum("nqijm,...nqm->...nqij", self.gamma, values)

    def transport(self, values: np.ndarray, cov: np.ndarray) -> np.ndarray:
        """[Mv]^i = (∂y^j/∂t) ∇_j v^i + A^i_k (∂²x^k/∂y^j∂t) v^j."""
        return np.einsum("nqj,...nqij->...nqi", self.dy_dt, cov) + np.einsum("nqij,...nqj->...nqi", self.strain, values)

    def pushforward(self, data: FieldData, t: float) -> np.ndarray:
        """Reference components A·f(x) of physical data at the quadrature points."""
        nt = self.points.shape[0]
        physical = data(self.points.reshape(-1, 3), t).reshape(nt, 4, 3)
        return np.einsum("nqij,nqj->nqi", self.dy_dx, physical)

    def norm_sq(self, values: np.ndarray) -> float:
        return float(np.einsum("nq,nqij,nqi,nqj->", self.weight, self.g_low, values, values))

    def grad_norm_sq(self, cov: np.ndarray) -> float:
        return float(np.einsum("nq,nqij,nqkl,nqik,nqjl->", self.weight, self.g_low, self.g_up, cov, cov, optimize=True))


@dataclass(frozen=True, eq=False)
class BEpsilon:
    """The solenoidal extension b̃_ε(t) = h̃(t) + Rot(t)[θ, w̃(t)] of the boundary data.

    ``field`` is the nodal P1 extension with trace β̃ and zero weak
    divergence; ``rot_part`` is Rot(t)[θ, w̃] at the nodes and vanishes
    wherever θ and ∇θ do. ``fluxes`` are the outward fluxes of β through
    Γ_0..Γ_K on the exact boundary; ``discrete_imbalance`` is the net P1
    facet flux of the nodal trace before ``trace_correction`` (relative size
    of the normal correction) made it flux-consistent.
    """

    time: float
    field: FEField
    extension: FEField
    h: FEField
    w: FEField
    rot_part: FEField
    coeffs_h: np.ndarray
    fluxes: np.ndarray
    flux_imbalance: float
    discrete_imbalance: float
    trace_correction: float
    trace_error: float
    div_residual: float
    h_beta_l3: float


def beta_trace(mesh: ReferenceMesh, motion: DomainMotion, t: float, beta: FieldData) -> np.ndarray:
    """Nodal reference components β̃ = A·β(x) on ∂Ω̃, zero at interior nodes."""
    trace = np.zeros((mesh.n_vertices, 3))
    nodes = mesh.boundary_nodes
    metric = reference_metric(motion, mesh.vertices[nodes], t)
    trace[nodes] = np.einsum("nij,nj->ni", metric.dy_dx, beta(metric.point, t))
    return trace


def boundary_fluxes(mesh: ReferenceMesh, motion: DomainMotion, t: float, beta: FieldData, rule: BoundaryRule | None = None) -> np.ndarray:
    """Outward physical fluxes ∫_{Γ_k(t)} β·ν dS of the continuous data, k = 0..K.

    Uses ∫_{φ(S)} β·ν dS = ∫_S J (A β)·ñ dS̃ with the surface rule of
    `boundary_quadrature`.
    """
    rule = rule or boundary_quadrature(mesh)
    metric = reference_metric(motion, rule.points, t)
    density = metric.J * np.einsum("nij,nj,ni->n", metric.dy_dx, beta(metric.point, t), rule.weighted_normals)
    return np.bincount(rule.labels, weights=density, minlength=mesh.K + 1)


def flux_imbalance(fluxes: np.ndarray) -> float:
    """|Σ_k F_k| relative to Σ_k |F_k|, zero without flux."""
    gross = float(np.abs(fluxes).sum())
    return abs(float(fluxes.sum())) / gross if gross > 0 else 0.0


def _facet_fluxes(mesh: ReferenceMesh, J: float, values: np.ndarray) -> np.ndarray:
    """Physical outward fluxes of nodal data through Γ_0..Γ_K (centroid rule times J)."""
    areas, normals = mesh.facet_geometry
    per_facet = J * areas * np.einsum("ni,ni->n", values[mesh.boundary_facets].mean(axis=1), normals)
    return np.bincount(mesh.boundary_labels, weights=per_facet, minlength=mesh.K + 1)


def _trace_constrained_fit(ops: WeightedOperators, H: sps.spmatrix, load: np.ndarray, trace: np.ndarray, operation: str) -> np.ndarray:
    """Minimize ½xᵀHx − loadᵀx over P1 vectors with interior-tested zero divergence and x = trace on ∂Ω̃."""
    mesh = ops.mesh
    nv = mesh.n_vertices
    bnodes = mesh.boundary_nodes
    fixed = (bnodes[None, :] + nv * np.arange(3)[:, None]).ravel()
    selector = sps.csr_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)), shape=(fixed.size, 3 * nv))
    C = sps.vstack([ops.div[mesh.interior_nodes], selector], format="csr")
    d = np.concatenate([np.zeros(mesh.interior_nodes.size), trace[bnodes].T.ravel()])
    x, _ = SaddlePointSystem(H, C, operation=operation).solve(load, d)
    return x.reshape(3, nv).T.copy()


def _l3_norm(ops: WeightedOperators, cells: np.ndarray) -> float:
    pointwise = np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", cells, ops.g_lower_cell, cells), 0.0))
    return float(np.sum(ops.mesh.volumes * ops.J * pointwise**3) ** (1.0 / 3.0))


def _zero_epsilon(mesh: ReferenceMesh, t: float, fluxes: np.ndarray, imbalance: float) -> BEpsilon:
    zero_nodes = FEField.zeros("vector3", mesh)
    return BEpsilon(
        time=t,
        field=zero_nodes,
        extension=zero_nodes,
        h=FEField.zeros("cell_vector3", mesh),
        w=zero_nodes,
        rot_part=zero_nodes,
        coeffs_h=np.zeros(mesh.K),
        fluxes=fluxes,
        flux_imbalance=imbalance,
        discrete_imbalance=0.0,
        trace_correction=0.0,
        trace_error=0.0,
        div_residual=0.0,
        h_beta_l3=0.0,
    )


@track(name="build_b_epsilon")
def build_b_epsilon(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    t: float,
    beta: FieldData,
    cutoff: CutoffProfile,
    setup: DecompositionSetup | None = None,
    rule: BoundaryRule | None = None,
) -> BEpsilon:
    """Extend boundary data β(t) to the solenoidal field b̃_ε(t) = h̃ + Rot(t)[θ, w̃].

    The general flux condition is checked on β itself with `boundary_fluxes`.
    The nodal trace is then shifted along the vertex normals until its P1
    facet fluxes balance, the extension minimizing ⟨∇_g b, ∇_g b⟩_t under the
    trace and divergence constraints is decomposed into h ∈ V_har and Rot w,
    and the cut-off version h + Rot[θ, w] is projected back onto fields with
    that trace and zero weak divergence.

    Raises:
        FluxViolation: if the net outward flux of β exceeds ``GFC_TOL`` of the total absolute flux.
    """
    fluxes = boundary_fluxes(mesh, motion, t, beta, rule)
    imbalance = flux_imbalance(fluxes)
    if imbalance > GFC_TOL:
        raise FluxViolation(
            f"net flux {fluxes.sum():.3e} is {imbalance:.3e} of the boundary flux at t={t:g}",
            operation="build_b_epsilon",
        )
    trace = beta_trace(mesh, motion, t, beta)
    if not np.any(trace):
        return _zero_epsilon(mesh, t, fluxes, imbalance)

    J = motion.jacobian_J(t)
    raw = _facet_fluxes(mesh, J, trace)
    normals = np.zeros_like(trace)
    normals[mesh.boundary_nodes] = mesh.vertex_normals[mesh.boundary_nodes]
    shift = (raw.sum() / _facet_fluxes(mesh, J, normals).sum()) * normals
    trace_scale = float(np.abs(trace[mesh.boundary_nodes]).max())
    correction = float(np.abs(shift).max()) / trace_scale if trace_scale > 0 else 0.0
    trace = trace - shift

    setup = setup or prepare_decomposition(mesh, motion, t)
    ops = setup.ops
    scale = max(float(np.abs(ops.stiffness_t.diagonal()).max()), 1.0) / max(float(np.abs(ops.mass_t.diagonal()).max()), 1e-300)
    H = (ops.stiffness_t + 1e-12 * scale * ops.mass_t).tocsr()
    extension = _trace_constrained_fit(ops, H, np.zeros(3 * mesh.n_vertices), trace, operation="build_b_epsilon")
    extension_field = FEField("vector3", extension, mesh)
    h, w, coeffs = decompose_solenoidal(extension_field, setup.basis, setup.cut_basis, ops, check=False)

    dw = nodal_average(mesh, np.einsum("nal,nak->nlk", w.values[mesh.tets], mesh.grad_bary)).reshape(-1, 3, 3)
    kernels = rot_kernels_at(motion, None, mesh.vertices, t)
    rot_part = kernels.rot_cutoff(cutoff.theta.values, cutoff.grad_theta.values, w.values, dw)
    target = nodal_average(mesh, h.values) + rot_part
    target_flat = target.T.ravel()
    b_eps = _trace_constrained_fit(ops, ops.mass_t, ops.mass_t @ target_flat, trace, operation="build_b_epsilon")
    b_field = FEField("vector3", b_eps, mesh)

    bnodes = mesh.boundary_nodes
    h_beta = np.zeros((mesh.n_cells, 3))
    if mesh.K and setup.basis.alpha is not None:
        for c, eta in zip(setup.basis.alpha @ fluxes[1:], setup.basis.eta):
            h_beta += float(c) * eta.values
    return BEpsilon(
        time=t,
        field=b_field,
        extension=extension_field,
        h=h,
        w=w,
        rot_part=FEField("vector3", rot_part, mesh),
        coeffs_h=coeffs,
        fluxes=fluxes,
        flux_imbalance=imbalance,
        discrete_imbalance=flux_imbalance(raw),
        trace_correction=correction,
        trace_error=float(np.abs(b_eps[bnodes] - trace[bnodes]).max()) / trace_scale if trace_scale > 0 else 0.0,
        div_residual=divergence_residual(b_field, ops),
        h_beta_l3=_l3_norm(ops, h_beta),
    )


@dataclass(frozen=True, eq=False)
class GalerkinFrame:
    """Reduced operators of the coefficient system at one time.

    Matrices act on Υ coordinates with rows indexing the test field.
    ``linear`` collects Stokes, transport and the b̃-coupling; ``trilinear``
    is the skew convection form; ``load`` is ⟨F̃, Υ_k⟩_t.
    """

    time: float
    mu: np.ndarray
    X: np.ndarray
    gram: np.ndarray
    gram_rate: np.ndarray
    stiffness: np.ndarray
    transport: np.ndarray
    convective: np.ndarray
    linear: np.ndarray
    trilinear: np.ndarray
    load: np.ndarray
    source_K: float
    b_norm_h1: float


def _lower_half(X: np.ndarray) -> np.ndarray:
    """Φ(X): strict lower triangle plus half the diagonal."""
    return np.tril(X, -1) + 0.5 * np.diag(np.diag(X))


def _trilinear(Y: np.ndarray, U: np.ndarray, cov: np.ndarray, max_workers: int) -> np.ndarray:
    """T[k, a, b] = ⟨N[Υ_a, Υ_b], Υ_k⟩_t, one slab per b."""

    def slab(b: int) -> np.ndarray:
        return np.einsum("knqi,anql,nqil->ka", Y, U, cov[b], optimize=True)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        slabs = list(pool.map(slab, range(U.shape[0])))
    return np.stack(slabs, axis=2)


@dataclass(eq=False)
class PeriodicProblem:
    """Data of one time-periodic run: geometry, Galerkin basis, boundary data and forcing.

    Frames, decomposition setups and extensions are cached by phase t mod T.
    b̃_ε is built exactly on ``b_samples`` equally spaced phases; between them
    its values and its s-derivative come from the periodic trigonometric
    interpolant of those samples.
    """

    mesh: ReferenceMesh
    motion: DomainMotion
    basis: GalerkinBasis
    period_T: float
    steps: int = 128
    beta: FieldData | None = None
    forcing: FieldData | None = None
    cutoff: CutoffProfile | None = None
    K_constant: float = 1.0
    smallness_margin: float | None = None
    max_workers: int = 1
    b_samples: int = 9
    _frames: dict[float, GalerkinFrame] = field(default_factory=dict, repr=False)
    _extensions: dict[float, BEpsilon] = field(default_factory=dict, repr=False)
    _setups: dict[float, DecompositionSetup] = field(default_factory=dict, repr=False)
    _rule: BoundaryRule | None = field(default=None, repr=False)
    _spectrum: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim_m(self) -> int:
        """Number of Galerkin modes."""
        return self.basis.m

    @property
    def dt(self) -> float:
        """Runge–Kutta step on the period grid."""
        return self.period_T / self.steps

    @property
    def has_boundary_data(self) -> bool:
        """Whether boundary data and a cut-off are set."""
        return self.beta is not None and self.cutoff is not None

    @property
    def sample_times(self) -> np.ndarray:
        """Phases on which b̃_ε is built exactly."""
        return self.period_T * np.arange(self.b_samples) / self.b_samples

    def phase(self, t: float) -> float:
        """Return t mod T, rounded for use as a cache key."""
        tm = float(t) % self.period_T
        if self.period_T - tm < 1e-12 * self.period_T:
            tm = 0.0
        return round(tm, 12)

    def decomposition_setup(self, t: float) -> DecompositionSetup:
        """Harmonic basis and factorized operators at phase t, built once."""
        key = self.phase(t)
        if key not in self._setups:
            self._setups[key] = prepare_decomposition(self.mesh, self.motion, key, max_workers=self.max_workers)
        return self._setups[key]

    def b_epsilon(self, t: float) -> BEpsilon | None:
        """Return the exact extension at time t, or None without boundary data."""
        if not self.has_boundary_data:
            return None
        key = self.phase(t)
        if key not in self._extensions:
            if self._rule is None:
                self._rule = boundary_quadrature(self.mesh)
            self._extensions[key] = build_b_epsilon(
                self.mesh, self.motion, key, self.beta, self.cutoff, setup=self.decomposition_setup(key), rule=self._rule
            )
        return self._extensions[key]

    def _b_series(self, t: float, derivative: bool) -> np.ndarray:
        if self._spectrum is None:
            samples = [self.b_epsilon(s).field.values for s in self.sample_times]
            self._spectrum = np.fft.rfft(np.stack(samples), axis=0)
        n = self.b_samples
        omega = 2.0 * np.pi / self.period_T * np.arange(self._spectrum.shape[0])
        factor = np.full(omega.size, 2.0, dtype=complex)
        factor[0] = 1.0
        if n % 2 == 0:
            factor[-1] = 1.0
        factor *= np.exp(1j * omega * self.phase(t))
        if derivative:
            factor *= 1j * omega
        return np.real(np.tensordot(factor, self._spectrum, axes=1)) / n

    def b_values(self, t: float) -> np.ndarray | None:
        """Nodal b̃_ε at time t (nv, 3), or None without boundary data."""
        return self._b_series(t, derivative=False) if self.has_boundary_data else None

    def b_rate(self, t: float) -> np.ndarray:
        """∂_s b̃_ε at time t, nodal (nv, 3)."""
        if not self.has_boundary_data:
            return np.zeros((self.mesh.n_vertices, 3))
        return self._b_series(t, derivative=True)

    def frame(self, t: float) -> GalerkinFrame:
        """Return the reduced operators at time t."""
        key = self.phase(t)
        if key not in self._frames:
            self._frames[key] = _assemble_frame(self, key)
        return self._frames[key]

    def F_tilde(self, t: float) -> np.ndarray:
        """⟨F̃(t), Υ_k⟩_t for every mode."""
        return self.frame(t).load


def _assemble_frame(problem: PeriodicProblem, t: float, with_data: bool = True) -> GalerkinFrame:
    mesh, basis = problem.mesh, problem.basis
    geo = _QuadGeometry.from_metric(mesh, quadrature_metric(mesh, problem.motion, t))
    U = basis.values_qp
    cov = geo.covariant(U, basis.grads)
    Y = np.einsum("nq,nqij,knqj->knqi", geo.weight, geo.g_low, U)

    gram = np.einsum("knqi,anqi->ka", Y, U)
    gram_rate = np.einsum("nqij,knqi,anqj->ka", geo.mass_rate, U, U)
    stiffness = np.einsum("nq,nqij,nqkl,bnqik,anqjl->ba", geo.weight, geo.g_low, geo.g_up, cov, cov, optimize=True)
    transport = np.einsum("knqi,anqi->ka", Y, geo.transport(U, cov))
    mu = _orthonormal_factor(gram, operation="ode_rhs")
    basis.psi_cache[t] = mu

    m = basis.m
    load = np.zeros(m)
    convective = np.zeros((m, m))
    coupling = np.zeros((m, m))
    trilinear = np.zeros((m, m, m))
    f_sq = rate_sq = b_h1_sq = 0.0
    if with_data:
        T = _trilinear(Y, U, cov, problem.max_workers)
        trilinear = 0.5 * (T - T.transpose(2, 1, 0))
        if problem.forcing is not None:
            f_qp = geo.pushforward(problem.forcing, t)
            load += np.einsum("knqi,nqi->k", Y, f_qp)
            f_sq = geo.norm_sq(f_qp)
        b_nodal = problem.b_values(t)
        if b_nodal is not None and np.any(b_nodal):
            b_qp, b_grads = _nodal_jets(mesh, b_nodal)
            cov_b = geo.covariant(b_qp, b_grads)
            rate_qp, _ = _nodal_jets(mesh, problem.b_rate(t))
            self_advection = np.einsum("nql,nqil->nqi", b_qp, cov_b)
            load -= np.einsum("knqi,nqi->k", Y, rate_qp + geo.transport(b_qp, cov_b) + self_advection)
            load -= np.einsum("nq,nqij,nqkl,nqik,anqjl->a", geo.weight, geo.g_low, geo.g_up, cov_b, cov, optimize=True)
            advected_by_b = np.einsum("knqi,nql,anqil->ka", Y, b_qp, cov, optimize=True)
            convective = np.einsum("knqi,anql,nqil->ka", Y, U, cov_b, optimize=True)
            coupling = 0.5 * (advected_by_b - advected_by_b.T) + convective
            rate_sq = geo.norm_sq(rate_qp)
            b_h1_sq = geo.norm_sq(b_qp) + geo.grad_norm_sq(cov_b)

    linear = stiffness + 0.5 * (transport - transport.T) + 0.5 * gram_rate + coupling
    source_K = problem.K_constant * (f_sq + rate_sq + b_h1_sq + b_h1_sq**2)
    return GalerkinFrame(
        time=t,
        mu=mu,
        X=mu @ gram_rate @ mu.T,
        gram=gram,
        gram_rate=gram_rate,
        stiffness=stiffness,
        transport=transport,
        convective=convective,
        linear=linear,
        trilinear=trilinear,
        load=load,
        source_K=source_K,
        b_norm_h1=float(np.sqrt(b_h1_sq)),
    )


def _reduced_rhs(frame: GalerkinFrame, c: np.ndarray) -> np.ndarray:
    """r(c) in Υ coordinates."""
    return -frame.linear @ c - np.einsum("kab,a,b->k", frame.trilinear, c, c) + frame.load


def ode_rhs(h: np.ndarray, t: float, problem: PeriodicProblem) -> np.ndarray:
    """Return dh/dt of the Galerkin coefficients at time t."""
    frame = problem.frame(t)
    c = frame.mu.T @ h
    return frame.mu @ _reduced_rhs(frame, c) + _lower_half(frame.X).T @ h


def velocity_at(problem: PeriodicProblem, h: np.ndarray, t: float) -> np.ndarray:
    """Nodal reference velocity ũ = b̃_ε + Σ h_k ψ_k at time t, (nv, 3)."""
    c = problem.frame(t).mu.T @ h
    u = np.einsum("k,knd->nd", c, problem.basis.upsilon)
    b_nodal = problem.b_values(t)
    return u + b_nodal if b_nodal is not None else u


@dataclass
class TrajectoryState:
    """Coefficients h_k over a time grid with the per-step energy ledger."""

    times: np.ndarray
    h: np.ndarray
    ledger: list[dict[str, float]]
    iterate_index: int = 0

    def __post_init__(self) -> None:
        """Reject non-finite coefficients."""
        if not np.all(np.isfinite(self.h)):
            raise BlowupDetected("trajectory holds non-finite coefficients", operation="integrate")

    @property
    def final(self) -> np.ndarray:
        """Coefficients at the last time."""
        return self.h[-1]

    def column(self, name: str) -> np.ndarray:
        """One ledger column as an array."""
        return np.array([row[name] for row in self.ledger])


def _ledger_row(problem: PeriodicProblem, t: float, h: np.ndarray) -> dict[str, float]:
    frame = problem.frame(t)
    c = frame.mu.T @ h
    R = frame.mu @ _reduced_rhs(frame, c)
    hdot = R + _lower_half(frame.X).T @ h
    dissipation = float(c @ frame.stiffness @ c)
    convective = float(c @ frame.convective @ c)
    source = float(frame.load @ c)
    rate = float(h @ hdot)
    return {
        "t": float(t),
        "kinetic": 0.5 * float(h @ h),
        "dissipation": dissipation,
        "convective": convective,
        "source": source,
        "K": frame.source_K,
        "rate": rate,
        "rate_transport": float(h @ R + c @ frame.transport @ c),
        "edi_defect": rate + dissipation + convective - source,
        "energy_step_defect": 0.0,
        "b_norm_h1": frame.b_norm_h1,
    }


def _power(problem: PeriodicProblem, t: float, h: np.ndarray) -> float:
    """Source minus dissipation minus convective term at (t, h), the right side of d/dt ½|h|²."""
    frame = problem.frame(t)
    c = frame.mu.T @ h
    return float(frame.load @ c - c @ frame.stiffness @ c - c @ frame.convective @ c)


def integrate(
    problem: PeriodicProblem,
    a: np.ndarray,
    t0: float,
    t1: float,
    dt: float | None = None,
    iterate_index: int = 0,
) -> TrajectoryState:
    """Integrate the coefficient system with the classical Runge–Kutta scheme.

    The ledger records kinetic energy ½|h|², dissipation ‖∇_g u‖²_t, the
    convective term (u·∇b, u), the source ⟨F̃, u⟩_t, K(t), the exact rate
    h·ḣ and the rate ⟨∂_s u, u⟩_t + ⟨Mu, u⟩_t built from the strong transport
    term, plus a Gronwall envelope. ``energy_step_defect`` compares each step's
    kinetic increment with the Runge–Kutta stage quadrature of source minus
    dissipation minus convective work; it is O(dt⁵) per step.

    Raises:
        ValueError: if dt exceeds T/64.
        BlowupDetected: if kinetic energy exceeds 1e6 times the initial plus source budget.
    """
    dt = problem.dt if dt is None else float(dt)
    if dt > problem.period_T / MIN_STEPS * (1.0 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds T/{MIN_STEPS}")
    n = max(1, int(round((t1 - t0) / dt)))
    dt = (t1 - t0) / n
    times = t0 + dt * np.arange(n + 1)
    h = np.array(a, dtype=float)
    states = [h.copy()]
    ledger = [_ledger_row(problem, times[0], h)]
    budget = ledger[0]["kinetic"] + 1.0
    for step in range(n):
        t = times[step]
        k1 = ode_rhs(h, t, problem)
        y2 = h + 0.5 * dt * k1
        k2 = ode_rhs(y2, t + 0.5 * dt, problem)
        y3 = h + 0.5 * dt * k2
        k3 = ode_rhs(y3, t + 0.5 * dt, problem)
        y4 = h + dt * k3
        k4 = ode_rhs(y4, t + dt, problem)
        work = dt / 6.0 * (
            _power(problem, t, h) + 2.0 * _power(problem, t + 0.5 * dt, y2) + 2.0 * _power(problem, t + 0.5 * dt, y3) + _power(problem, t + dt, y4)
        )
        h = h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(h)):
            raise BlowupDetected(f"non-finite coefficients at t={times[step + 1]:g}", operation="integrate")
        row = _ledger_row(problem, times[step + 1], h)
        row["energy_step_defect"] = row["kinetic"] - ledger[-1]["kinetic"] - work
        budget += 0.5 * dt * (ledger[-1]["K"] + row["K"])
        if row["kinetic"] > BLOWUP_FACTOR * budget:
            raise BlowupDetected(f"kinetic energy {row['kinetic']:.3e} left the envelope at t={row['t']:g}", operation="integrate")
        states.append(h.copy())
        ledger.append(row)
    _gronwall(problem, ledger, float(np.dot(a, a)))
    return TrajectoryState(times=times, h=np.array(states), ledger=ledger, iterate_index=iterate_index)


def _gronwall(problem: PeriodicProblem, ledger: list[dict[str, float]], initial: float) -> None:
    """Add ‖u‖² ≤ exp(∫C(‖b‖⁴+1))(‖a‖² + ∫K) to every ledger row."""
    growth = source = 0.0
    for i, row in enumerate(ledger):
        if i:
            prev = ledger[i - 1]
            step = row["t"] - prev["t"]
            growth += 0.5 * step * problem.K_constant * (prev["b_norm_h1"] ** 4 + row["b_norm_h1"] ** 4 + 2.0)
            source += 0.5 * step * (prev["K"] + row["K"])
        row["gronwall_bound"] = float(np.exp(growth) * (initial + source))
        row["gronwall_ok"] = float(2.0 * row["kinetic"] <= row["gronwall_bound"] * (1.0 + 1e-9) + 1e-300)


@dataclass(frozen=True)
class SmallnessReport:
    """sup_t C_s‖h_β(t)‖_{L³} over the sampled times."""

    margin: float
    passed: bool
    samples: list[dict[str, float]]


def check_smallness(problem: PeriodicProblem, n_samples: int | None = None) -> SmallnessReport:
    """Evaluate the smallness margin on n_samples equally spaced times of one period.

    Defaults to the phases on which b̃_ε is built, so no extra builds are needed.
    """
    samples = []
    times = problem.sample_times if n_samples is None else np.linspace(0.0, problem.period_T, n_samples, endpoint=False)
    for t in times:
        ext = problem.b_epsilon(t)
        l3 = ext.h_beta_l3 if ext is not None else 0.0
        samples.append({"t": float(t), "h_beta_l3": l3, "margin": C_SOBOLEV * l3})
    margin = max(s["margin"] for s in samples)
    problem.smallness_margin = margin
    return SmallnessReport(margin=margin, passed=margin < 1.0, samples=samples)


def decay_rate(problem: PeriodicProblem, n_samples: int = 4) -> float:
    """Return γ = (1 − margin)/C_p² with C_p the largest measured Poincaré constant on the sample times."""
    margin = problem.smallness_margin
    if margin is None:
        margin = check_smallness(problem).margin
    c_p = max(poincare_constant(problem.mesh, problem.motion, t) for t in np.linspace(0.0, problem.period_T, n_samples, endpoint=False))
    return (1.0 - margin) / c_p**2


def ball_radius(problem: PeriodicProblem, gamma: float) -> float:
    """Smallest R with R²(1 − e^{−γT}) ≥ ∫₀ᵀ e^{−γ(T−τ)} 2K(τ) dτ (trapezoid on the step grid)."""
    if gamma <= 0.0:
        return float("inf")
    T = problem.period_T
    taus = np.linspace(0.0, T, problem.steps + 1)
    integrand = np.array([np.exp(-gamma * (T - tau)) * 2.0 * problem.frame(tau).source_K for tau in taus])
    integral = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(taus)))
    return float(np.sqrt(integral / (1.0 - np.exp(-gamma * T))))


@dataclass
class PeriodicResult:
    """Outcome of the Poincaré-map iteration."""

    a: np.ndarray
    trajectory: TrajectoryState
    residual_history: list[float]
    iterations: int
    radius: float | None
    ball_violations: int
    accelerator: str


@dataclass
class PoincareIteration:
    """Stepwise fixed-point iteration a ← P(a) for the Poincaré map P over one period.

    Starts as Picard iteration damped by 0.5 and switches to Anderson(3) once
    the residual drops by less than half per iteration.
    """

    problem: PeriodicProblem
    a: np.ndarray
    radius: float | None = None
    tol: float = PERIODIC_TOL
    history: list[float] = field(default_factory=list)
    ball_violations: int = 0
    trajectory: TrajectoryState | None = None
    mixer: AndersonMixer | None = None
    converged: bool = False

    @property
    def iterations(self) -> int:
        """Number of map evaluations so far."""
        return len(self.history)

    def step(self) -> float:
        """Evaluate P(a), record the residual and advance ``a`` unless converged."""
        it = self.iterations + 1
        self.trajectory = integrate(self.problem, self.a, 0.0, self.problem.period_T, iterate_index=it)
        image = self.trajectory.final
        residual = float(np.linalg.norm(image - self.a))
        self.history.append(residual)
        if self.radius is not None and np.linalg.norm(image) > self.radius * (1.0 + BALL_SLACK):
            self.ball_violations += 1
        status("🔁", f"poincaré iterate {it}: residual {residual:.3e}, ‖P(a)‖ {np.linalg.norm(image):.3e}")
        if residual <= self.tol:
            self.converged = True
            return residual
        if self.mixer is None and len(self.history) >= 2 and self.history[-1] > STALL_RATIO * self.history[-2]:
            self.mixer = AndersonMixer(depth=3)
        self.a = self.mixer.update(self.a, image) if self.mixer else self.a + PICARD_DAMPING * (image - self.a)
        return residual

    def result(self) -> PeriodicResult:
        """Package the converged iterate."""
        if self.trajectory is None:
            raise NoConvergence("no iterate evaluated", operation="find_periodic")
        return PeriodicResult(
            a=self.a,
            trajectory=self.trajectory,
            residual_history=list(self.history),
            iterations=self.iterations,
            radius=self.radius,
            ball_violations=self.ball_violations,
            accelerator="anderson" if self.mixer else "picard",
        )

    def failure(self) -> NoConvergence:
        """The error reported when the iteration budget is spent."""
        return NoConvergence(
            f"Poincaré map residual {self.history[-1]:.3e} above {self.tol:.0e} after {self.iterations} iterations",
            residual_history=list(self.history),
            operation="find_periodic",
        )


@track(name="find_periodic")
def find_periodic(
    problem: PeriodicProblem,
    radius: float | None = None,
    max_iters: int = 50,
    tol: float = PERIODIC_TOL,
    a0: np.ndarray | None = None,
) -> PeriodicResult:
    """Run `PoincareIteration` until ‖P(a) − a‖ ≤ ``tol``.

    Raises:
        NoConvergence: after ``max_iters`` iterations, with the residual history.
    """
    a = np.zeros(problem.dim_m) if a0 is None else np.array(a0, dtype=float)
    iteration = PoincareIteration(problem=problem, a=a, radius=radius, tol=tol)
    while iteration.iterations < max_iters:
        iteration.step()
        if iteration.converged:
            return iteration.result()
    raise iteration.failure()


def steady_state(problem: PeriodicProblem, t: float = 0.0, h0: np.ndarray | None = None) -> np.ndarray:
    """Solve ode_rhs(h, t) = 0 for the coefficients of the frozen-time stationary state.

    Raises:
        NoConvergence: if the nonlinear solve fails.
    """
    h0 = np.zeros(problem.dim_m) if h0 is None else h0
    sol = scipy.optimize.root(lambda h: ode_rhs(h, t, problem), h0, method="hybr", tol=1e-13)
    if not sol.success:
        raise NoConvergence(f"steady solve failed: {sol.message}", residual_history=[float(np.linalg.norm(sol.fun))], operation="steady_state")
    return sol.x


def truncation_energy_defect(trajectory: TrajectoryState) -> float:
    """Time-averaged kinetic energy outside the first m/2 modes, relative to the total."""
    half = trajectory.h.shape[1] // 2
    total = float(np.mean(np.sum(trajectory.h**2, axis=1)))
    tail = float(np.mean(np.sum(trajectory.h[:, half:] ** 2, axis=1)))
    return tail / total if total > 0 else 0.0


def annulus_smallness_closed_form(R0: float, R1: float, flux: float) -> dict[str, float]:
    """Closed-form ‖h_β‖_{L³} on the shell R1 < |x| < R0 for flux Φ through the inner sphere.

    h_β = −Φ x/(4π|x|³) integrates to |Φ|(4π)^{-2/3}3^{-1/3}(R1⁻³ − R0⁻³)^{1/3};
    ``printed`` uses the constant 2^{-2/3}3^{-1/3}π^{-2/3} in its place.
    """
    shell = (1.0 / R1**3 - 1.0 / R0**3) ** (1.0 / 3.0)
    derived = abs(flux) * (4.0 * np.pi) ** (-2.0 / 3.0) * 3.0 ** (-1.0 / 3.0) * shell
    printed = abs(flux) * 2.0 ** (-2.0 / 3.0) * 3.0 ** (-1.0 / 3.0) * np.pi ** (-2.0 / 3.0) * shell
    return {
        "l3_derived": float(derived),
        "l3_printed": float(printed),
        "margin_derived": float(C_SOBOLEV * derived),
        "margin_printed": float(C_SOBOLEV * printed),
    }


def dilation_scaling_check(margins: np.ndarray, lambdas: np.ndarray) -> float:
    """Relative spread (max − min)/mean of margin(t)·λ(t)."""
    scaled = np.asarray(margins) * np.asarray(lambdas)
    mean = float(np.mean(scaled))
    return float((scaled.max() - scaled.min()) / mean) if mean > 0 else 0.0


def stable_steps(problem: PeriodicProblem) -> int:
    """Smallest power-of-two multiple of ``steps`` keeping RK4 stable for the Stokes part at t = 0."""
    frame = _assemble_frame(problem, 0.0, with_data=False)
    sym = frame.mu @ (0.5 * (frame.linear + frame.linear.T)) @ frame.mu.T
    lam_max = float(np.linalg.eigvalsh(sym).max())
    steps = max(problem.steps, MIN_STEPS)
    while problem.period_T / steps * lam_max > RK4_STABILITY:
        steps *= 2
    return steps


def make_periodic_problem(
    mesh: ReferenceMesh,
    motion: DomainMotion,
    m: int,
    period_T: float | None = None,
    steps: int = 128,
    beta: FieldData | None = None,
    forcing: FieldData | None = None,
    rho: float = 0.25,
    delta: float = 0.1,
    d_star: float = 0.5,
    max_workers: int = 1,
    basis: GalerkinBasis | None = None,
    b_samples: int = 9,
) -> PeriodicProblem:
    """Assemble a periodic problem, refining ``steps`` until the explicit scheme is stable.

    K(t) uses C = 2·max(1, C_p²) from Young's inequality with weight ½ and
    the Poincaré inequality at t = 0. ``b_samples`` phases carry exact builds
    of b̃_ε.
    """
    period_T = motion.period_T if period_T is None else period_T
    basis = basis or build_upsilon(mesh, m)
    c_p = poincare_constant(mesh, motion, 0.0)
    problem = PeriodicProblem(
        mesh=mesh,
        motion=motion,
        basis=basis,
        period_T=period_T,
        steps=max(int(steps), MIN_STEPS),
        beta=beta,
        forcing=forcing,
        cutoff=build_cutoff(mesh, rho, delta, d_star=d_star) if beta is not None else None,
        K_constant=2.0 * max(1.0, c_p**2),
        max_workers=max_workers,
        b_samples=max(1, int(b_samples)),
    )
    refined = stable_steps(problem)
    if refined != problem.steps:
        status("⏱️", f"steps raised from {problem.steps} to {refined} for stability")
        problem.steps = refined
    return problem

