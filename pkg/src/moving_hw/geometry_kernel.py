"""Pullback geometry of a moving domain.

All quantities are evaluated at reference points y (vectorized over a leading
batch axis) from the jet of x = φ⁻¹(y, t): B = ∂x/∂y, A = B⁻¹ = ∂y/∂x. The
physical point-based entry points (`metric_at`, `pushforward`) first map x to
y with φ.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from moving_hw.errors import DegenerateLevelSet, SingularJacobian
from moving_hw.motions import DomainMotion, MapJet, anchored_motion

LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    LEVI_CIVITA[_i, _j, _k] = 1.0
    LEVI_CIVITA[_i, _k, _j] = -1.0
_EVEN_PERMUTATIONS = (LEVI_CIVITA > 0).astype(float)

ANALYTIC_TOL = 1e-7
FD_TOL = 1e-4


def _batch(points: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(points, dtype=float)
    return arr.reshape(-1, 3), arr.ndim == 1


@dataclass(frozen=True)
class MetricSample:
    """Pointwise metric data, batched over a leading axis of n points.

    ``christoffel[n, k, i, j]`` is Γ^k_ij; ``dy_dx`` is A, ``dx_dy`` is B and
    ``dx_dy_dt`` is ∂B/∂t at fixed y. ``dy_dt`` is the velocity ∂y/∂t of the
    reference image of a fixed physical point.
    """

    point: np.ndarray
    ref_point: np.ndarray
    time: float
    g_upper: np.ndarray
    g_lower: np.ndarray
    christoffel: np.ndarray
    J: np.ndarray
    dJ_ds: np.ndarray
    dg_lower_ds: np.ndarray
    dg_upper_ds: np.ndarray
    dy_dx: np.ndarray
    dx_dy: np.ndarray
    dx_dy_dt: np.ndarray
    dy_dt: np.ndarray

    def single(self) -> MetricSample:
        """Drop the batch axis of a one-point sample."""
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        for name, value in values.items():
            if isinstance(value, np.ndarray):
                values[name] = value[0]
        return MetricSample(**values)


def metric_from_jet(jet: MapJet, ref_points: np.ndarray, t: float) -> MetricSample:
    """Build a `MetricSample` from the jet of φ⁻¹ at ``ref_points``."""
    B = jet.d1
    det = np.linalg.det(B)
    if np.any(det <= 1e-12):
        raise SingularJacobian(f"det(∂x/∂y) min {det.min():.3e} at t={t}", operation="metric_at")
    A = np.linalg.inv(B)
    B_t = jet.d1t
    g_upper = np.einsum("nik,njk->nij", A, A)
    g_lower = np.einsum("nki,nkj->nij", B, B)
    christoffel = np.einsum("nkl,nlij->nkij", A, jet.d2)
    trace = np.einsum("nkl,nlk->n", A, B_t)
    dg_lower = np.einsum("nki,nkj->nij", B_t, B) + np.einsum("nki,nkj->nij", B, B_t)
    A_t = -np.einsum("nia,nab,nbj->nij", A, B_t, A)
    dg_upper = np.einsum("nik,njk->nij", A_t, A) + np.einsum("nik,njk->nij", A, A_t)
    return MetricSample(
        point=jet.value,
        ref_point=np.asarray(ref_points, dtype=float).reshape(-1, 3),
        time=float(t),
        g_upper=g_upper,
        g_lower=g_lower,
        christoffel=christoffel,
        J=det,
        dJ_ds=det * trace,
        dg_lower_ds=dg_lower,
        dg_upper_ds=dg_upper,
        dy_dx=A,
        dx_dy=B,
        dx_dy_dt=B_t,
        dy_dt=-np.einsum("nij,nj->ni", A, jet.dt),
    )


def reference_metric(motion: DomainMotion, y: np.ndarray, t: float) -> MetricSample:
    """Evaluate the metric at reference points ``y`` (batched)."""
    pts, _ = _batch(y)
    return metric_from_jet(motion.phi_inv.jet(pts, t), pts, t)


def metric_at(motion: DomainMotion, x: np.ndarray, t: float) -> MetricSample:
    """Evaluate the metric at physical point(s) ``x`` of Ω(t).

    A single point returns unbatched fields; an (n, 3) array keeps the batch.
    """
    pts, single = _batch(x)
    y = motion.forward(pts, t)
    sample = reference_metric(motion, y, t)
    return sample.single() if single else sample


def pushforward(motion: DomainMotion, u: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    """Return ũ^i = Σ_ℓ ∂y^i/∂x^ℓ u^ℓ for vectors ``u`` attached at physical points ``x``."""
    pts, single = _batch(x)
    vec = np.asarray(u, dtype=float).reshape(-1, 3)
    A = motion.phi.jet(pts, t).d1
    out = np.einsum("nij,nj->ni", A, vec)
    return out[0] if single else out


def pullback(motion: DomainMotion, u_tilde: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    """Return u^i = Σ_ℓ ∂x^i/∂y^ℓ ũ^ℓ for vectors attached at reference points ``y``."""
    pts, single = _batch(y)
    vec = np.asarray(u_tilde, dtype=float).reshape(-1, 3)
    B = motion.phi_inv.jet(pts, t).d1
    out = np.einsum("nij,nj->ni", B, vec)
    return out[0] if single else out


def divergence_defect(motion: DomainMotion, y: np.ndarray, t: float, u: np.ndarray, du_dx: np.ndarray) -> np.ndarray:
    """Return div_y ũ − div_x u for a field with value ``u`` and Jacobian ``du_dx`` at x = φ⁻¹(y, t).

    div_y ũ is expanded exactly: ∂_k(A^k_m u^m) = (∂_k A^k_m) u^m + A^k_m ∂_n u^m B^n_k.
    """
    pts, _ = _batch(y)
    jet = motion.phi_inv.jet(pts, t)
    B = jet.d1
    A = np.linalg.inv(B)
    dA = -np.einsum("nka,nabk,nbm->nm", A, jet.d2, A)
    u = np.asarray(u, dtype=float).reshape(-1, 3)
    du = np.asarray(du_dx, dtype=float).reshape(-1, 3, 3)
    div_y = np.einsum("nm,nm->n", dA, u) + np.einsum("nkm,nmj,njk->n", A, du, B)
    return div_y - np.einsum("nii->n", du)


@dataclass(frozen=True)
class KernelTensors:
    """Kernel coefficients of Rot(t), the boundary operator S and their time derivatives.

    ``R1[n,i,j,k,l]`` multiplies w̃^l, ``R2[n,i,j,k,l]`` multiplies ∂w̃^l/∂x̃^k;
    ``Rdot1[n,i,l]`` and ``Rdot2[n,i,k,l]`` are the time derivatives already
    summed over the free indices, as they enter Ṙot.
    """

    R1: np.ndarray
    R2: np.ndarray
    S: np.ndarray
    Gdot: np.ndarray
    Rdot1: np.ndarray
    Rdot2: np.ndarray
    point: np.ndarray
    time: float

    def rot(self, w: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Apply Rot(t) to a field with value ``w`` (n,3) and gradient ``dw[n,l,k] = ∂_k w̃^l``."""
        return np.einsum("nijkl,nl->ni", self.R1, w) + np.einsum("nijkl,nlk->ni", self.R2, dw)

    def rot_cutoff(self, theta: np.ndarray, dtheta: np.ndarray, w: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Apply Rot(t)[θ, w] = Rot(t)(θw) given θ, ∇θ, w and ∇w."""
        product_grad = theta[:, None, None] * dw + np.einsum("nl,nk->nlk", w, dtheta)
        return self.rot(theta[:, None] * w, product_grad)

    def rot_dot(self, w: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Apply Ṙot(t) = ∂_t Rot(t)."""
        return np.einsum("nil,nl->ni", self.Rdot1, w) + np.einsum("nikl,nlk->ni", self.Rdot2, dw)


def _rot_kernels(A: np.ndarray, B: np.ndarray, B2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R1 = np.einsum("nij,jmp,nkm,npkl->nijkl", A, LEVI_CIVITA, A, B2)
    R2 = np.einsum("nij,jmp,nkm,npl->nijkl", A, LEVI_CIVITA, A, B)
    return R1, R2


def kernels_from_jet(jet: MapJet, t: float) -> KernelTensors:
    """Build Rot/S kernels and their time derivatives from a jet of the inverse chart."""
    B, B2 = jet.d1, jet.d2
    A = np.linalg.inv(B)
    B_t, B2_t = jet.d1t, jet.d2t
    A_t = -np.einsum("nia,nab,nbj->nij", A, B_t, A)
    R1, R2 = _rot_kernels(A, B, B2)
    R1_t = (
        np.einsum("nij,jmp,nkm,npkl->nijkl", A_t, LEVI_CIVITA, A, B2)
        + np.einsum("nij,jmp,nkm,npkl->nijkl", A, LEVI_CIVITA, A_t, B2)
        + np.einsum("nij,jmp,nkm,npkl->nijkl", A, LEVI_CIVITA, A, B2_t)
    )
    R2_t = (
        np.einsum("nij,jmp,nkm,npl->nijkl", A_t, LEVI_CIVITA, A, B)
        + np.einsum("nij,jmp,nkm,npl->nijkl", A, LEVI_CIVITA, A_t, B)
        + np.einsum("nij,jmp,nkm,npl->nijkl", A, LEVI_CIVITA, A, B_t)
    )
    S = np.einsum("nij,jmp,nmk,npl->nijkl", A, _EVEN_PERMUTATIONS, B, B)
    gdot = np.einsum("nik,njk->nij", A_t, A) + np.einsum("nik,njk->nij", A, A_t)
    return KernelTensors(
        R1=R1,
        R2=R2,
        S=S,
        Gdot=gdot,
        Rdot1=R1_t.sum(axis=(2, 3)),
        Rdot2=R2_t.sum(axis=2),
        point=jet.value,
        time=float(t),
    )


def _chart_for(motion: DomainMotion, anchor_t0: float | None) -> DomainMotion:
    if anchor_t0 is None or motion.anchor_t0 == anchor_t0:
        return motion
    return anchored_motion(motion, anchor_t0)


def rot_kernels_at(motion: DomainMotion, anchor_t0: float | None, x_tilde: np.ndarray, t: float) -> KernelTensors:
    """Evaluate Rot(t) kernels of the chart anchored at ``anchor_t0`` at points ``x_tilde`` of Ω(t₀).

    With ``anchor_t0=None`` the motion's own reference domain is used.
    """
    pts, _ = _batch(x_tilde)
    chart = _chart_for(motion, anchor_t0)
    return kernels_from_jet(chart.phi_inv.jet(pts, t), t)


@dataclass(frozen=True)
class BoundaryOperators:
    """B1[u, v] (pushforward of the cross product) and B2[u, v] = g_kl u^k v^l."""

    S: np.ndarray
    g_lower: np.ndarray

    def b1(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Return B1[u,v]^i = Σ S^i_jkl (u^k v^l − u^l v^k)."""
        return np.einsum("nijkl,nk,nl->ni", self.S, u, v) - np.einsum("nijkl,nl,nk->ni", self.S, u, v)

    def b2(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Return B2[u,v] = Σ g_kl u^k v^l."""
        return np.einsum("nkl,nk,nl->n", self.g_lower, u, v)


def boundary_operators_at(motion: DomainMotion, anchor_t0: float | None, x_tilde: np.ndarray, t: float) -> BoundaryOperators:
    """Return the boundary operators of the anchored chart at boundary points ``x_tilde``."""
    pts, _ = _batch(x_tilde)
    chart = _chart_for(motion, anchor_t0)
    jet = chart.phi_inv.jet(pts, t)
    kernels = kernels_from_jet(jet, t)
    return BoundaryOperators(S=kernels.S, g_lower=np.einsum("nki,nkj->nij", jet.d1, jet.d1))


@dataclass(frozen=True)
class BoundaryChart:
    """Level-set description G̃ of a boundary patch in reference coordinates.

    ∇G̃ must point out of the fluid region.
    """

    label: str
    level_set: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NormalSample:
    """Normals at boundary points together with D = |∇_x G|² and E = |∇_x̃ G̃|²."""

    nu: np.ndarray
    D: np.ndarray
    E: np.ndarray


def sphere_chart(radius: float, inward: bool = False, label: str = "sphere") -> BoundaryChart:
    """Chart of a sphere; ``inward`` flips the normal for an inner (cavity) boundary."""
    sign = -1.0 if inward else 1.0

    def level(p: np.ndarray) -> np.ndarray:
        return sign * (np.linalg.norm(p, axis=1) - radius)

    def grad(p: np.ndarray) -> np.ndarray:
        return sign * p / np.linalg.norm(p, axis=1)[:, None]

    return BoundaryChart(label=label, level_set=level, gradient=grad)


def torus_chart(major_R: float, minor_r: float, label: str = "torus") -> BoundaryChart:
    """Chart of the solid torus surface around the x₃ axis."""

    def tube(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho = np.hypot(p[:, 0], p[:, 1])
        radial = np.stack([p[:, 0] / rho * (rho - major_R), p[:, 1] / rho * (rho - major_R), p[:, 2]], axis=1)
        return radial, np.linalg.norm(radial, axis=1)

    def level(p: np.ndarray) -> np.ndarray:
        return tube(p)[1] - minor_r

    def grad(p: np.ndarray) -> np.ndarray:
        radial, dist = tube(p)
        return radial / dist[:, None]

    return BoundaryChart(label=label, level_set=level, gradient=grad)


def facet_chart(centroids: np.ndarray, normals: np.ndarray, label: str = "facets") -> BoundaryChart:
    """Signed-distance chart from triangulated boundary facets with outward unit ``normals``."""
    tree = cKDTree(centroids)

    def level(p: np.ndarray) -> np.ndarray:
        _, idx = tree.query(p)
        return np.einsum("ni,ni->n", p - centroids[idx], normals[idx])

    def grad(p: np.ndarray) -> np.ndarray:
        _, idx = tree.query(p)
        return normals[idx]

    return BoundaryChart(label=label, level_set=level, gradient=grad)


def normal_sample(chart: BoundaryChart, motion: DomainMotion, x_tilde: np.ndarray, t: float) -> NormalSample:
    """Return ν̃ ∝ Σ_k g^{ik} ∂G̃/∂x̃^k at boundary points, normalized to unit Euclidean length."""
    pts, _ = _batch(x_tilde)
    grad = np.asarray(chart.gradient(pts), dtype=float).reshape(-1, 3)
    E = np.einsum("ni,ni->n", grad, grad)
    if np.any(np.sqrt(E) < 1e-10):
        raise DegenerateLevelSet(f"|∇G̃| below 1e-10 on chart '{chart.label}'", operation="normal_at")
    g_upper = reference_metric(motion, pts, t).g_upper
    raised = np.einsum("nik,nk->ni", g_upper, grad)
    D = np.einsum("ni,ni->n", grad, raised)
    nu = raised / np.linalg.norm(raised, axis=1)[:, None]
    return NormalSample(nu=nu, D=D, E=E)


def normal_at(chart: BoundaryChart, motion: DomainMotion, x_tilde: np.ndarray, t: float) -> np.ndarray:
    """Return the unit outward normal ν̃(x̃, t); a single point returns a single vector."""
    pts, single = _batch(x_tilde)
    nu = normal_sample(chart, motion, pts, t).nu
    return nu[0] if single else nu


@dataclass(frozen=True)
class FieldJet:
    """A vector field ũ at reference points: value[n,i], grad[n,i,k] = ∂_k ũ^i, hess[n,i,k,l]."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None


@dataclass(frozen=True)
class TransformedOperators:
    """Pointwise values of L ũ, M ũ and N[ũ, ṽ]."""

    L: np.ndarray | None
    M: np.ndarray
    N: np.ndarray


def covariant_gradient(christoffel: np.ndarray, u: FieldJet) -> np.ndarray:
    """Return ∇_k ũ^i = ∂_k ũ^i + Γ^i_kl ũ^l, indexed [n, i, k]."""
    return u.grad + np.einsum("nikl,nl->nik", christoffel, u.value)


def transformed_operators_at(motion: DomainMotion, y: np.ndarray, t: float, u: FieldJet, v: FieldJet | None = None) -> TransformedOperators:
    """Evaluate L ũ, M ũ and N[ũ, ṽ] (ṽ defaults to ũ) at reference points ``y``.

    L needs ``u.hess``; it is skipped (None) when the Hessian is absent.
    """
    pts, _ = _batch(y)
    jet = motion.phi_inv.jet(pts, t)
    metric = metric_from_jet(jet, pts, t)
    gamma = metric.christoffel
    A = metric.dy_dx
    v = v or u
    Du = covariant_gradient(gamma, u)
    Dv = covariant_gradient(gamma, v)
    M = (
        np.einsum("nikl,nl,nk->ni", gamma, metric.dy_dt, u.value)
        + np.einsum("nil,nlk,nk->ni", A, metric.dx_dy_dt, u.value)
        + np.einsum("nk,nik->ni", metric.dy_dt, u.grad)
    )
    N = np.einsum("nj,nij->ni", u.value, Dv)
    L = None
    if u.hess is not None:
        dA = -np.einsum("nia,nabj,nbm->nimj", A, jet.d2, A)
        dgamma = np.einsum("nimj,nmkl->niklj", dA, jet.d2) + np.einsum("nim,nmklj->niklj", A, jet.d3)
        d_Du = u.hess + np.einsum("niklj,nl->nikj", dgamma, u.value) + np.einsum("nikl,nlj->nikj", gamma, u.grad)
        DDu = np.einsum("nikj->nijk", d_Du) + np.einsum("nijm,nmk->nijk", gamma, Du) - np.einsum("nmjk,nim->nijk", gamma, Du)
        L = np.einsum("njk,nijk->ni", metric.g_upper, DDu)
    return TransformedOperators(L=L, M=M, N=N)


@dataclass
class GeometryReport:
    """Maximum residual per identity over all samples."""

    motion: str
    analytic: bool
    tolerance: float
    residuals: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """True when every residual is within tolerance."""
        return all(value <= self.tolerance for value in self.residuals.values())

    def failures(self) -> dict[str, float]:
        """Return the identities above tolerance."""
        return {name: value for name, value in self.residuals.items() if value > self.tolerance}

    def record(self, name: str, value: float) -> None:
        """Keep the running maximum for ``name``."""
        self.residuals[name] = max(self.residuals.get(name, 0.0), float(value))


def verify_geometry_identities(motion: DomainMotion, sample_points: np.ndarray, times: list[float]) -> GeometryReport:
    """Evaluate the pullback identities at reference ``sample_points`` for every time.

    Residuals: Kronecker duality, Σ_ℓ Γ^ℓ_iℓ = 0, the J and g_ij time derivative
    formulas, Σ ∂x^ℓ/∂y^k ∂²y^k/∂x^ℓ∂x^i = 0, the converse time identity,
    the 𝒢 representation and the spatial constancy of det. Analytic motions
    also check the derivatives of Σ_ℓ Γ^ℓ_iℓ in space and time.
    """
    pts, _ = _batch(sample_points)
    report = GeometryReport(motion=motion.name, analytic=motion.analytic, tolerance=ANALYTIC_TOL if motion.analytic else FD_TOL)
    eye = np.eye(3)
    for t in times:
        inv = motion.phi_inv.jet(pts, t)
        fwd = motion.phi.jet(inv.value, t)
        metric = metric_from_jet(inv, pts, t)
        A_x, B = fwd.d1, inv.d1
        report.record("kronecker", max(np.abs(np.einsum("nil,nlj->nij", B, A_x) - eye).max(), np.abs(np.einsum("nil,nlj->nij", A_x, B) - eye).max()))
        report.record("christoffel_trace", np.abs(np.einsum("nlil->ni", metric.christoffel)).max())
        report.record("christoffel_symmetry", np.abs(metric.christoffel - np.swapaxes(metric.christoffel, 2, 3)).max())
        report.record("metric_inverse", np.abs(np.einsum("nik,nkj->nij", metric.g_upper, metric.g_lower) - eye).max())
        # dJ/ds from the inverse chart against d/dt (1/det ∂y/∂x) from the forward chart
        det_A = np.linalg.det(A_x)
        dJ_forward = -np.einsum("nij,nji->n", np.linalg.inv(A_x), fwd.d1t) / det_A
        report.record("dJ_ds", (np.abs(metric.dJ_ds - dJ_forward) / (1.0 + np.abs(metric.dJ_ds))).max())
        g, Bt, A = metric.g_lower, inv.d1t, metric.dy_dx
        dg_formula = np.einsum("njk,nkl,nli->nij", g, A, Bt) + np.einsum("nik,nkl,nlj->nij", g, A, Bt)
        report.record("dg_ds", np.abs(metric.dg_lower_ds - dg_formula).max())
        report.record("inverse_christoffel_trace", np.abs(np.einsum("nlk,nkli->ni", B, fwd.d2)).max())
        converse = np.einsum("nlk,nkl->n", B, fwd.d1t) + np.einsum("nkl,nlk->n", A, Bt)
        report.record("converse_time_identity", np.abs(converse).max())
        gdot_formula = -np.einsum("nik,nkj->nij", Bt, A_x) - np.einsum("njk,nki->nij", Bt, A_x)
        gdot_formula = np.einsum("nia,nab,njb->nij", A, gdot_formula, A)
        report.record("gdot_representation", np.abs(metric.dg_upper_ds - gdot_formula).max())
        report.record("det_constancy", (np.ptp(det_A) / np.abs(det_A).max()))
        if motion.analytic:
            dA = -np.einsum("nia,nabj,nbm->nimj", A, inv.d2, A)
            dgamma = np.einsum("nimj,nmkl->niklj", dA, inv.d2) + np.einsum("nim,nmklj->niklj", A, inv.d3)
            report.record("christoffel_trace_gradient", np.abs(np.einsum("nlilj->nij", dgamma)).max())
            A_t = -np.einsum("nia,nab,nbm->nim", A, Bt, A)
            dgamma_t = np.einsum("nim,nmkl->nikl", A_t, inv.d2) + np.einsum("nim,nmkl->nikl", A, inv.d2t)
            report.record("christoffel_trace_rate", np.abs(np.einsum("nlil->ni", dgamma_t)).max())
    return report


@dataclass
class MotionReport:
    """Residuals of the `DomainMotion` invariants."""

    motion: str
    residuals: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """True when every invariant holds."""
        return all(self.residuals[name] <= self.tolerances[name] for name in self.residuals)


def validate_motion(motion: DomainMotion, points: np.ndarray, times: list[float]) -> MotionReport:
    """Check round-trip, Kronecker duality, constant positive determinant and periodicity.

    Raises:
        SingularJacobian: if det(∂φ/∂x) is not strictly positive at a sample.
    """
    pts, _ = _batch(points)
    report = MotionReport(
        motion=motion.name,
        tolerances={"round_trip": 1e-10, "kronecker": 1e-8, "det_constancy": 1e-8, "periodicity": 1e-10},
    )
    scale = 1.0 + np.linalg.norm(pts, axis=1)
    for name in report.tolerances:
        report.residuals[name] = 0.0
    for t in times:
        x = motion.inverse(pts, t)
        back = motion.forward(x, t)
        report.residuals["round_trip"] = max(report.residuals["round_trip"], float((np.linalg.norm(back - pts, axis=1) / scale).max()))
        A = motion.phi.jet(x, t).d1
        B = motion.phi_inv.jet(pts, t).d1
        report.residuals["kronecker"] = max(report.residuals["kronecker"], float(np.abs(np.einsum("nil,nlj->nij", B, A) - np.eye(3)).max()))
        det = np.linalg.det(A)
        if np.any(det <= 0.0):
            raise SingularJacobian(f"det(∂φ/∂x) = {det.min():.3e} at t={t}", operation="validate_motion")
        report.residuals["det_constancy"] = max(report.residuals["det_constancy"], float(np.ptp(det) / det.max()))
        shifted = motion.inverse(pts, t + motion.period_T)
        report.residuals["periodicity"] = max(report.residuals["periodicity"], float((np.linalg.norm(shifted - x, axis=1) / scale).max()))
    return report
