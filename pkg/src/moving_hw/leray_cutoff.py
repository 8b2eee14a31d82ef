"""Boundary cut-off θ_ρ = Θ(d(y), ρ) and the Leray pairing it controls.

ξ is the logarithmic ramp between e^{-2/ρ} and e^{-1/ρ}; Θ is its mollification
with the bump χ_λ. θ equals 1 where d < ½e^{-2/ρ}, vanishes where
d > 2e^{-1/ρ} and satisfies |∇θ| ≤ 2√3 ρ/d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import roots_legendre

from moving_hw.errors import BadParameters
from moving_hw.geometry_kernel import rot_kernels_at
from moving_hw.mesh_disc import SHAPE_AT_QP, FEField, ReferenceMesh, quadrature_metric
from moving_hw.motions import DomainMotion

GAUSS_POINTS = 64
TABLE_POINTS = 1024
CANDIDATE_FACETS = 16
RHO_LADDER = (0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625)


def xi_profile(z: np.ndarray | float, rho: float) -> np.ndarray:
    """Logarithmic ramp ξ(z, ρ): 1 below e^{-2/ρ}, ρ log(e^{-1/ρ}/z) in between, 0 above e^{-1/ρ}."""
    z = np.asarray(z, dtype=float)
    lo, hi = np.exp(-2.0 / rho), np.exp(-1.0 / rho)
    ramp = rho * np.log(hi / np.clip(z, lo, hi))
    return np.where(z < lo, 1.0, np.where(z > hi, 0.0, ramp))


def _xi_slope(z: np.ndarray, rho: float) -> np.ndarray:
    lo, hi = np.exp(-2.0 / rho), np.exp(-1.0 / rho)
    inside = (z >= lo) & (z <= hi)
    return np.where(inside, -rho / np.where(inside, z, 1.0), 0.0)


def _bump_rule() -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes s on (−1, 1) and weights of the normalized bump χ(s)."""
    nodes, weights = roots_legendre(GAUSS_POINTS)
    bump = np.exp(-1.0 / (1.0 - nodes**2))
    weights = weights * bump
    return nodes, weights / weights.sum()


def theta_profile(z: np.ndarray | float, rho: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Return Θ(z) = ∫ χ_λ(z′) ξ(z − z′) dz′ and Θ′(z) by Gauss quadrature of the bump."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    nodes, weights = _bump_rule()
    shifted = z[:, None] - lam * nodes[None, :]
    return xi_profile(shifted, rho) @ weights, _xi_slope(shifted, rho) @ weights


def check_parameters(rho: float, delta: float, lam: float, d_star: float) -> None:
    """Validate 2δ < ρ, λ < ¼e^{-2/δ} and 0 < ρ < min(1, −1/log d*).

    Raises:
        BadParameters: listing the first violated constraint.
    """
    if not 0.0 < d_star < 1.0:
        raise BadParameters(f"collar width d*={d_star} must lie in (0, 1)", operation="build_cutoff")
    rho_star = min(1.0, -1.0 / np.log(d_star))
    if not 0.0 < rho < rho_star:
        raise BadParameters(f"rho={rho} must lie in (0, {rho_star:.4g}) for d*={d_star}", operation="build_cutoff")
    if not 0.0 < 2.0 * delta < rho:
        raise BadParameters(f"need 0 < 2*delta < rho, got delta={delta}, rho={rho}", operation="build_cutoff")
    if not 0.0 < lam < 0.25 * np.exp(-2.0 / delta):
        raise BadParameters(f"need lambda < exp(-2/delta)/4 = {0.25 * np.exp(-2.0 / delta):.3e}, got {lam:.3e}", operation="build_cutoff")


@dataclass(frozen=True)
class ThetaTable:
    """Θ and Θ′ tabulated on log-spaced z between the plateau and the support edge."""

    rho: float
    lam: float
    z: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray

    @classmethod
    def build(cls, rho: float, lam: float, n: int = TABLE_POINTS) -> ThetaTable:
        """Tabulate Θ on [¼e^{-2/ρ}, 4e^{-1/ρ}]."""
        z = np.geomspace(0.25 * np.exp(-2.0 / rho), 4.0 * np.exp(-1.0 / rho), n)
        theta, dtheta = theta_profile(z, rho, lam)
        return cls(rho=rho, lam=lam, z=z, theta=theta, dtheta=dtheta)

    def __call__(self, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolate Θ(d), Θ′(d); 1 and 0 below the table, 0 above it."""
        d = np.asarray(d, dtype=float)
        logd = np.log(np.maximum(d, self.z[0]))
        logz = np.log(self.z)
        theta = np.interp(logd, logz, self.theta, left=1.0, right=0.0)
        dtheta = np.interp(logd, logz, self.dtheta, left=0.0, right=0.0)
        below = d < self.z[0]
        return np.where(below, 1.0, theta), np.where(below, 0.0, dtheta)


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points to p (n, 1, 3) on triangles (n, k, 3) by face/edge cases."""
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    projected = p - np.einsum("nkd,nkd->nk", p - a, normal)[..., None] * normal
    # barycentrics of the projection
    v0, v1, v2 = ab, ac, projected - a
    d00 = np.einsum("nkd,nkd->nk", v0, v0)
    d01 = np.einsum("nkd,nkd->nk", v0, v1)
    d11 = np.einsum("nkd,nkd->nk", v1, v1)
    d20 = np.einsum("nkd,nkd->nk", v2, v0)
    d21 = np.einsum("nkd,nkd->nk", v2, v1)
    denom = d00 * d11 - d01**2
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    inside = (v >= 0) & (w >= 0) & (v + w <= 1)
    best = projected.copy()
    best_dist = np.where(inside, np.linalg.norm(projected - p, axis=-1), np.inf)
    for s0, s1 in ((a, b), (b, c), (c, a)):
        seg = s1 - s0
        tpar = np.clip(np.einsum("nkd,nkd->nk", p - s0, seg) / np.einsum("nkd,nkd->nk", seg, seg), 0.0, 1.0)
        point = s0 + tpar[..., None] * seg
        dist = np.linalg.norm(point - p, axis=-1)
        better = dist < best_dist
        best = np.where(better[..., None], point, best)
        best_dist = np.where(better, dist, best_dist)
    return best


def boundary_distance(mesh: ReferenceMesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact distance from ``points`` to the faceted boundary, and the unit gradient of d.

    Candidates are the 16 facets with the nearest centroids; the gradient is
    zero where d vanishes.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.vertices[mesh.boundary_facets]
    tree = cKDTree(tri.mean(axis=1))
    k = min(CANDIDATE_FACETS, tri.shape[0])
    _, idx = tree.query(points, k=k)
    idx = np.asarray(idx).reshape(points.shape[0], k)
    cand = tri[idx]
    closest = _closest_on_triangles(points[:, None, :], cand[:, :, 0], cand[:, :, 1], cand[:, :, 2])
    dist = np.linalg.norm(closest - points[:, None, :], axis=-1)
    pick = dist.argmin(axis=1)
    rows = np.arange(points.shape[0])
    d = dist[rows, pick]
    direction = points - closest[rows, pick]
    grad = np.divide(direction, d[:, None], out=np.zeros_like(direction), where=d[:, None] > 0)
    return d, grad


def distance_to_boundary(mesh: ReferenceMesh) -> FEField:
    """Nodal distance to ∂Ω̃, exactly zero on boundary nodes."""
    d, _ = boundary_distance(mesh, mesh.vertices)
    d[mesh.boundary_nodes] = 0.0
    return FEField("scalar", d, mesh)


@dataclass(frozen=True, eq=False)
class CutoffProfile:
    """θ_ρ on nodes and quadrature points together with the parameters that built it."""

    rho: float
    delta: float
    lam: float
    d_star: float
    distance: FEField
    theta: FEField
    grad_theta: FEField
    d_qp: np.ndarray
    theta_qp: np.ndarray
    grad_theta_qp: np.ndarray
    interpolation_error: float
    diagnostics: dict[str, float] = field(default_factory=dict)


def build_cutoff(
    mesh: ReferenceMesh,
    rho: float,
    delta: float,
    d_star: float = 0.5,
    lam: float | None = None,
    seed: int = 0,
) -> CutoffProfile:
    """Build θ_ρ = Θ(d, ρ) on the mesh.

    λ defaults to e^{-2/δ}/8. The tabulated Θ is checked against direct
    quadrature at 32 random nodes.

    Raises:
        BadParameters: if the parameter constraints fail.
    """
    lam = float(np.exp(-2.0 / delta) / 8.0) if lam is None else float(lam)
    check_parameters(rho, delta, lam, d_star)
    table = ThetaTable.build(rho, lam)
    distance = distance_to_boundary(mesh)
    theta, dtheta = table(distance.values)
    plateau = distance.values < 0.5 * np.exp(-2.0 / rho)
    outside = distance.values > 2.0 * np.exp(-1.0 / rho)
    theta = np.where(plateau, 1.0, np.where(outside, 0.0, np.clip(theta, 0.0, 1.0)))
    _, grad_d = boundary_distance(mesh, mesh.vertices)
    grad_d[mesh.boundary_nodes] = 0.0
    grad_nodes = dtheta[:, None] * grad_d

    qp = mesh.quadrature_points.reshape(-1, 3)
    d_qp, grad_d_qp = boundary_distance(mesh, qp)
    theta_qp, dtheta_qp = table(d_qp)
    theta_qp = np.clip(theta_qp, 0.0, 1.0)
    grad_theta_qp = dtheta_qp[:, None] * grad_d_qp

    rng = np.random.Generator(np.random.Philox(seed))
    probe = rng.choice(mesh.n_vertices, size=min(32, mesh.n_vertices), replace=False)
    direct, _ = theta_profile(np.maximum(distance.values[probe], table.z[0]), rho, lam)
    direct = np.where(distance.values[probe] < table.z[0], 1.0, direct)
    interp_err = float(np.abs(direct - table(distance.values[probe])[0]).max())

    positive = d_qp > 0
    bound_ratio = np.linalg.norm(grad_theta_qp[positive], axis=1) * d_qp[positive] / (2.0 * np.sqrt(3.0) * rho)
    return CutoffProfile(
        rho=rho,
        delta=delta,
        lam=lam,
        d_star=d_star,
        distance=distance,
        theta=FEField("scalar", theta, mesh),
        grad_theta=FEField("vector3", grad_nodes, mesh),
        d_qp=d_qp.reshape(mesh.n_cells, 4),
        theta_qp=theta_qp.reshape(mesh.n_cells, 4),
        grad_theta_qp=grad_theta_qp.reshape(mesh.n_cells, 4, 3),
        interpolation_error=interp_err,
        diagnostics={
            "gradient_bound_ratio": float(bound_ratio.max()) if bound_ratio.size else 0.0,
            "support_nodes": int(np.count_nonzero(theta > 0)),
            "plateau_nodes": int(np.count_nonzero(plateau)),
        },
    )


@dataclass(frozen=True)
class LerayPairing:
    """⟨N[u,u], Rot(t)[θ, w]⟩_t with its ratio to ‖∇_y u‖²."""

    value: float
    grad_norm_sq: float
    ratio: float
    trace_defect: float


def leray_pairing(
    u: FEField,
    profile: CutoffProfile,
    w: FEField,
    motion: DomainMotion,
    t: float,
    anchor_t0: float | None = None,
) -> LerayPairing:
    """Evaluate ∫ g_ij (u^n ∇_n u^i) Rot(t)[θ, w]^j J dy with the four-point rule."""
    mesh = u.mesh
    nt = mesh.n_cells
    metric = quadrature_metric(mesh, motion, t)
    g_low = metric.g_lower.reshape(nt, 4, 3, 3)
    gamma = metric.christoffel.reshape(nt, 4, 3, 3, 3)
    weight = (mesh.volumes[:, None] * metric.J.reshape(nt, 4)) / 4.0

    u_qp = np.einsum("aq,nad->nqd", SHAPE_AT_QP, u.values[mesh.tets])
    du = np.einsum("nai,nak->nik", u.values[mesh.tets], mesh.grad_bary)
    cov = du[:, None] + np.einsum("nqikm,nqm->nqik", gamma, u_qp)
    advect = np.einsum("nqk,nqik->nqi", u_qp, cov)

    w_qp = np.einsum("aq,nad->nqd", SHAPE_AT_QP, w.values[mesh.tets]).reshape(-1, 3)
    dw = np.repeat(np.einsum("nal,nak->nlk", w.values[mesh.tets], mesh.grad_bary), 4, axis=0)
    kernels = rot_kernels_at(motion, anchor_t0, mesh.quadrature_points.reshape(-1, 3), t)
    rot = kernels.rot_cutoff(profile.theta_qp.ravel(), profile.grad_theta_qp.reshape(-1, 3), w_qp, dw).reshape(nt, 4, 3)

    value = float(np.einsum("nq,nqij,nqi,nqj->", weight, g_low, advect, rot))
    grad_sq = float(np.einsum("n,nik,nik->", mesh.volumes, du, du))
    trace = float(np.abs(u.values[mesh.boundary_nodes]).max()) if mesh.boundary_nodes.size else 0.0
    return LerayPairing(value=value, grad_norm_sq=grad_sq, ratio=value / grad_sq if grad_sq > 0 else 0.0, trace_defect=trace)


def hardy_constant(mesh: ReferenceMesh, u: FEField) -> float:
    """Measured C in ‖u/d‖_{L²} ≤ C ‖∇u‖_{L²} for a zero-trace nodal field."""
    d, _ = boundary_distance(mesh, mesh.quadrature_points.reshape(-1, 3))
    d = d.reshape(mesh.n_cells, 4)
    u_qp = np.einsum("aq,nad->nqd", SHAPE_AT_QP, u.values[mesh.tets])
    weighted = np.einsum("n,nqd->", mesh.volumes / 4.0, (u_qp / d[..., None]) ** 2)
    du = np.einsum("nai,nak->nik", u.values[mesh.tets], mesh.grad_bary)
    grad = float(np.einsum("n,nik,nik->", mesh.volumes, du, du))
    return float(np.sqrt(weighted / grad)) if grad > 0 else 0.0


@dataclass
class RhoSelection:
    """Outcome of the ρ ladder search."""

    rho: float
    achieved: bool
    ladder: list[dict[str, float]]


def select_rho(
    epsilon: float,
    u: FEField,
    w: FEField,
    motion: DomainMotion,
    times: list[float],
    d_star: float = 0.5,
    ladder: tuple[float, ...] = RHO_LADDER,
) -> RhoSelection:
    """Return the largest ρ on the ladder whose pairing ratio is at most ε at every time.

    δ follows ρ as ρ/4 so that 2δ < ρ holds along the ladder.
    """
    mesh = u.mesh
    rows: list[dict[str, float]] = []
    rho_star = min(1.0, -1.0 / np.log(d_star))
    for rho in ladder:
        if rho >= rho_star:
            continue
        profile = build_cutoff(mesh, rho, rho / 4.0, d_star=d_star)
        worst = max(abs(leray_pairing(u, profile, w, motion, t).ratio) for t in times)
        rows.append({"rho": rho, "max_ratio": worst})
        if worst <= epsilon:
            return RhoSelection(rho=rho, achieved=True, ladder=rows)
    return RhoSelection(rho=rows[-1]["rho"] if rows else float("nan"), achieved=False, ladder=rows)
