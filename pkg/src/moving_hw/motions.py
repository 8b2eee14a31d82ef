"""Domain motions: the diffeomorphism φ(·,t), its inverse and their derivative jets.

A motion maps the physical domain Ω(t) onto the fixed reference domain Ω̃
(`y = φ(x, t)`) and back (`x = φ⁻¹(y, t)`). Every geometric quantity in the
package is computed from the jets returned here, so derivatives are produced
once, either symbolically (built-in motions, via sympy) or by fourth-order
central differences of user callables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Protocol

import numpy as np
import sympy as sp

from moving_hw.errors import MovingHWError, SingularJacobian

FD_STEP = 1.0e-4
_STENCIL = ((-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0))


@dataclass(frozen=True)
class MapJet:
    """Values and derivatives of a map F: (point, t) -> point at n points.

    Index convention: the output component comes first, derivative indices
    follow in the order they were taken, e.g. ``d2[n, i, a, b] = ∂²F^i/∂a∂b``.
    """

    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    dt: np.ndarray
    d1t: np.ndarray
    d2t: np.ndarray
    dtt: np.ndarray
    d1tt: np.ndarray


class MapSupply(Protocol):
    """Anything that can produce a `MapJet` at a batch of points."""

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        """Return the jet of the map at ``points`` (shape (n, 3)) and time ``t``."""
        ...

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        """Return only the map values."""
        ...


def _as_points(points: np.ndarray) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    return arr.reshape(-1, 3)


class SymbolicMap:
    """Map given by sympy expressions in (x1, x2, x3, t), lambdified per derivative order."""

    def __init__(self, exprs: list[sp.Expr], symbols: tuple[sp.Symbol, ...]) -> None:
        """Differentiate ``exprs`` symbolically and compile every jet entry."""
        x = symbols[:3]
        t = symbols[3]
        d1 = [[sp.diff(f, xa) for xa in x] for f in exprs]
        d2 = [[[sp.diff(d1[i][a], xb) for xb in x] for a in range(3)] for i in range(3)]
        d3 = [[[[sp.diff(d2[i][a][b], xc) for xc in x] for b in range(3)] for a in range(3)] for i in range(3)]
        dt = [sp.diff(f, t) for f in exprs]
        d1t = [[sp.diff(d1[i][a], t) for a in range(3)] for i in range(3)]
        d2t = [[[sp.diff(d2[i][a][b], t) for b in range(3)] for a in range(3)] for i in range(3)]
        dtt = [sp.diff(f, t) for f in dt]
        d1tt = [[sp.diff(d1t[i][a], t) for a in range(3)] for i in range(3)]
        self._orders: dict[str, tuple[tuple[int, ...], Callable[..., Any]]] = {}
        for name, nested, shape in (
            ("value", list(exprs), (3,)),
            ("d1", d1, (3, 3)),
            ("d2", d2, (3, 3, 3)),
            ("d3", d3, (3, 3, 3, 3)),
            ("dt", dt, (3,)),
            ("d1t", d1t, (3, 3)),
            ("d2t", d2t, (3, 3, 3)),
            ("dtt", dtt, (3,)),
            ("d1tt", d1tt, (3, 3)),
        ):
            flat = list(np.asarray(nested, dtype=object).ravel())
            self._orders[name] = (shape, sp.lambdify(symbols, flat, modules="numpy", cse=True))

    def _eval(self, name: str, pts: np.ndarray, t: float) -> np.ndarray:
        shape, fn = self._orders[name]
        n = pts.shape[0]
        raw = fn(pts[:, 0], pts[:, 1], pts[:, 2], float(t))
        cols = [np.broadcast_to(np.asarray(v, dtype=float), (n,)) for v in raw]
        return np.stack(cols, axis=-1).reshape((n, *shape))

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        """Evaluate the map."""
        return self._eval("value", _as_points(points), t)

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        """Evaluate every compiled derivative order."""
        pts = _as_points(points)
        return MapJet(**{name: self._eval(name, pts, t) for name in self._orders})


def _space_derivative(fun: Callable[[np.ndarray, float], np.ndarray]) -> Callable[[np.ndarray, float], np.ndarray]:
    def deriv(pts: np.ndarray, t: float) -> np.ndarray:
        h = FD_STEP * (1.0 + np.linalg.norm(pts, axis=1))
        columns = []
        for a in range(3):
            shift = np.zeros(3)
            shift[a] = 1.0
            acc = sum(w * fun(pts + s * h[:, None] * shift, t) for s, w in _STENCIL)
            columns.append(acc / (12.0 * h).reshape((-1,) + (1,) * (acc.ndim - 1)))
        return np.stack(columns, axis=-1)

    return deriv


def _time_derivative(fun: Callable[[np.ndarray, float], np.ndarray]) -> Callable[[np.ndarray, float], np.ndarray]:
    def deriv(pts: np.ndarray, t: float) -> np.ndarray:
        h = FD_STEP * (1.0 + abs(t))
        return sum(w * fun(pts, t + s * h) for s, w in _STENCIL) / (12.0 * h)

    return deriv


class FiniteDifferenceMap:
    """Map given by a numpy callable; derivatives by nested 4th-order central differences."""

    def __init__(self, func: Callable[[np.ndarray, float], np.ndarray]) -> None:
        """Wrap ``func(points (n,3), t) -> (n,3)``."""
        self._func = func
        space, time = _space_derivative, _time_derivative
        self._d1 = space(self._call)
        self._d2 = space(self._d1)
        self._d3 = space(self._d2)
        self._dt = time(self._call)
        self._d1t = time(self._d1)
        self._d2t = time(self._d2)
        self._dtt = time(self._dt)
        self._d1tt = time(self._d1t)

    def _call(self, pts: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(self._func(pts, t), dtype=float).reshape(-1, 3)

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        """Evaluate the wrapped callable."""
        return self._call(_as_points(points), t)

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        """Difference the callable up to third order in space and second in time."""
        pts = _as_points(points)
        return MapJet(
            value=self._call(pts, t),
            d1=self._d1(pts, t),
            d2=self._d2(pts, t),
            d3=self._d3(pts, t),
            dt=self._dt(pts, t),
            d1t=self._d1t(pts, t),
            d2t=self._d2t(pts, t),
            dtt=self._dtt(pts, t),
            d1tt=self._d1tt(pts, t),
        )


def _chain(outer: MapJet, inner: MapJet, outer_moves: bool) -> MapJet:
    """Jet of F = outer ∘ inner where exactly one of the two depends on time."""
    P1, P2, P3 = outer.d1, outer.d2, outer.d3
    Q1, Q2, Q3 = inner.d1, inner.d2, inner.d3
    d1 = np.einsum("nim,nma->nia", P1, Q1)
    d2 = np.einsum("nimp,nma,npb->niab", P2, Q1, Q1) + np.einsum("nim,nmab->niab", P1, Q2)
    d3 = (
        np.einsum("nimpr,nma,npb,nrc->niabc", P3, Q1, Q1, Q1)
        + np.einsum("nimp,nmab,npc->niabc", P2, Q2, Q1)
        + np.einsum("nimp,nmac,npb->niabc", P2, Q2, Q1)
        + np.einsum("nimp,nma,npbc->niabc", P2, Q1, Q2)
        + np.einsum("nim,nmabc->niabc", P1, Q3)
    )
    if outer_moves:
        # inner fixed: only the outer time derivatives survive
        dt = outer.dt
        d1t = np.einsum("nim,nma->nia", outer.d1t, Q1)
        d2t = np.einsum("nimp,nma,npb->niab", outer.d2t, Q1, Q1) + np.einsum("nim,nmab->niab", outer.d1t, Q2)
        dtt = outer.dtt
        d1tt = np.einsum("nim,nma->nia", outer.d1tt, Q1)
    else:
        Qt, Q1t, Q2t, Qtt, Q1tt = inner.dt, inner.d1t, inner.d2t, inner.dtt, inner.d1tt
        dt = np.einsum("nim,nm->ni", P1, Qt)
        d1t = np.einsum("nimp,np,nma->nia", P2, Qt, Q1) + np.einsum("nim,nma->nia", P1, Q1t)
        d2t = (
            np.einsum("nimpr,nr,nma,npb->niab", P3, Qt, Q1, Q1)
            + np.einsum("nimp,nma,npb->niab", P2, Q1t, Q1)
            + np.einsum("nimp,nma,npb->niab", P2, Q1, Q1t)
            + np.einsum("nimr,nr,nmab->niab", P2, Qt, Q2)
            + np.einsum("nim,nmab->niab", P1, Q2t)
        )
        dtt = np.einsum("nimp,nm,np->ni", P2, Qt, Qt) + np.einsum("nim,nm->ni", P1, Qtt)
        d1tt = (
            np.einsum("nimpr,nr,np,nma->nia", P3, Qt, Qt, Q1)
            + np.einsum("nimp,np,nma->nia", P2, Qtt, Q1)
            + np.einsum("nimp,np,nma->nia", P2, Qt, Q1t)
            + np.einsum("nimr,nr,nma->nia", P2, Qt, Q1t)
            + np.einsum("nim,nma->nia", P1, Q1tt)
        )
    return MapJet(value=outer.value, d1=d1, d2=d2, d3=d3, dt=dt, d1t=d1t, d2t=d2t, dtt=dtt, d1tt=d1tt)


class _AnchoredForward:
    """x ↦ φ⁻¹(φ(x, t), t₀): the moving map composed with the frozen inverse."""

    def __init__(self, phi: MapSupply, phi_inv: MapSupply, t0: float) -> None:
        self._phi, self._phi_inv, self._t0 = phi, phi_inv, t0

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        return self._phi_inv.value(self._phi.value(points, t), self._t0)

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        inner = self._phi.jet(points, t)
        outer = self._phi_inv.jet(inner.value, self._t0)
        return _chain(outer, inner, outer_moves=False)


class _AnchoredInverse:
    """x̃ ↦ φ⁻¹(φ(x̃, t₀), t): the frozen map composed with the moving inverse."""

    def __init__(self, phi: MapSupply, phi_inv: MapSupply, t0: float) -> None:
        self._phi, self._phi_inv, self._t0 = phi, phi_inv, t0

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        return self._phi_inv.value(self._phi.value(points, self._t0), t)

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        inner = self._phi.jet(points, self._t0)
        outer = self._phi_inv.jet(inner.value, t)
        return _chain(outer, inner, outer_moves=True)


@dataclass(frozen=True)
class DomainMotion:
    """The diffeomorphism Φ = (φ, t) together with its inverse.

    Attributes:
        name: Motion identifier used in configs and reports.
        phi: Supply of y = φ(x, t) and its jets.
        phi_inv: Supply of x = φ⁻¹(y, t) and its jets.
        period_T: Period of the motion.
        probe_point: A reference-domain point used to sample J(t).
        analytic: True when jets are symbolic, False for finite differences.
        static: True when the motion does not depend on time.
        anchor_t0: Anchor time when this is a composite chart, else None.
        params: Parameters the motion was built from.
    """

    name: str
    phi: MapSupply
    phi_inv: MapSupply
    period_T: float
    probe_point: tuple[float, float, float] = (0.5, 0.0, 0.0)
    analytic: bool = True
    static: bool = False
    anchor_t0: float | None = None
    params: dict[str, float] = field(default_factory=dict)

    def forward(self, x: np.ndarray, t: float) -> np.ndarray:
        """Map physical points to reference points."""
        return self.phi.value(x, t)

    def inverse(self, y: np.ndarray, t: float) -> np.ndarray:
        """Map reference points to physical points."""
        return self.phi_inv.value(y, t)

    def jacobian_J(self, t: float) -> float:
        """Return J(t) = det(∂x/∂y), sampled at the probe point."""
        jet = self.phi_inv.jet(np.asarray([self.probe_point]), t)
        det = float(np.linalg.det(jet.d1[0]))
        if det <= 1e-12:
            raise SingularJacobian(f"det(∂x/∂y) = {det:.3e} at t={t}", operation="jacobian_J")
        return det

    def frozen_at(self, t0: float) -> DomainMotion:
        """Return the static motion that keeps the chart fixed at time ``t0``."""
        return DomainMotion(
            name=f"{self.name}@{t0:g}",
            phi=_Frozen(self.phi, t0),
            phi_inv=_Frozen(self.phi_inv, t0),
            period_T=self.period_T,
            probe_point=self.probe_point,
            analytic=self.analytic,
            static=True,
            params=dict(self.params),
        )


class _Frozen:
    """A map supply whose time derivatives vanish."""

    def __init__(self, base: MapSupply, t0: float) -> None:
        self._base, self._t0 = base, t0

    def value(self, points: np.ndarray, t: float) -> np.ndarray:
        return self._base.value(points, self._t0)

    def jet(self, points: np.ndarray, t: float) -> MapJet:
        jet = self._base.jet(points, self._t0)
        return MapJet(
            value=jet.value,
            d1=jet.d1,
            d2=jet.d2,
            d3=jet.d3,
            dt=np.zeros_like(jet.dt),
            d1t=np.zeros_like(jet.d1t),
            d2t=np.zeros_like(jet.d2t),
            dtt=np.zeros_like(jet.dtt),
            d1tt=np.zeros_like(jet.d1tt),
        )


def anchored_motion(motion: DomainMotion, t0: float) -> DomainMotion:
    """Return the composite chart x̃ = φ⁻¹(φ(x, t), t₀) re-anchored at ``t0``.

    Its reference domain is Ω(t₀); at t = t₀ it is the identity chart. Jets
    come from the chain rule applied to the stored jets of ``motion``.
    """
    probe = motion.inverse(np.asarray([motion.probe_point]), t0)[0]
    return DomainMotion(
        name=f"{motion.name}|anchor={t0:g}",
        phi=_AnchoredForward(motion.phi, motion.phi_inv, t0),
        phi_inv=_AnchoredInverse(motion.phi, motion.phi_inv, t0),
        period_T=motion.period_T,
        probe_point=(float(probe[0]), float(probe[1]), float(probe[2])),
        analytic=motion.analytic,
        static=motion.static,
        anchor_t0=t0,
        params=dict(motion.params),
    )


_X1, _X2, _X3, _T = sp.symbols("x1 x2 x3 t", real=True)
_SYMBOLS = (_X1, _X2, _X3, _T)


@lru_cache(maxsize=32)
def _symbolic_pair(kind: str, params: tuple[tuple[str, float], ...]) -> tuple[SymbolicMap, SymbolicMap]:
    p = dict(params)
    x = sp.Matrix([_X1, _X2, _X3])
    if kind == "identity":
        fwd = list(x)
        inv = list(x)
    elif kind == "dilation":
        lam = p["lambda0"] + p["amplitude"] * sp.sin(p["omega"] * _T)
        fwd = [xi / lam for xi in x]
        inv = [xi * lam for xi in x]
    elif kind == "shear":
        s = p["amplitude"] * sp.sin(p["omega"] * _T)
        fwd = [_X1 + s * _X2, _X2, _X3]
        inv = [_X1 - s * _X2, _X2, _X3]
    elif kind == "pulsating_annulus":
        R0, R1 = sp.Float(p["R0"]), sp.Float(p["R1"])
        r1_t = R1 + p["amplitude"] * sp.sin(p["omega"] * _T)
        c = (R1**3 - R0**3) / (r1_t**3 - R0**3)
        r = sp.sqrt(_X1**2 + _X2**2 + _X3**2)
        rho_fwd = (R0**3 + c * (r**3 - R0**3)) ** sp.Rational(1, 3)
        rho_inv = (R0**3 + (r**3 - R0**3) / c) ** sp.Rational(1, 3)
        fwd = [xi * rho_fwd / r for xi in x]
        inv = [xi * rho_inv / r for xi in x]
    else:
        raise MovingHWError(f"unknown motion '{kind}'", module="geometry_kernel", operation="make_motion")
    return SymbolicMap(fwd, _SYMBOLS), SymbolicMap(inv, _SYMBOLS)


def identity_motion(period_T: float = 1.0) -> DomainMotion:
    """Return the identity motion φ(x, t) = x."""
    fwd, inv = _symbolic_pair("identity", ())
    return DomainMotion(name="identity", phi=fwd, phi_inv=inv, period_T=period_T, static=True)


def dilation_motion(lambda0: float = 1.0, amplitude: float = 0.1, period_T: float = 2 * np.pi) -> DomainMotion:
    """Return φ(x, t) = x/λ(t) with λ(t) = λ0 + a·sin(2πt/T)."""
    params = {"lambda0": lambda0, "amplitude": amplitude, "omega": 2 * np.pi / period_T}
    fwd, inv = _symbolic_pair("dilation", tuple(sorted(params.items())))
    return DomainMotion(
        name="dilation",
        phi=fwd,
        phi_inv=inv,
        period_T=period_T,
        static=amplitude == 0.0,
        params=params,
    )


def dilation_lambda(motion: DomainMotion, t: float) -> float:
    """Return λ(t) of a dilation motion."""
    p = motion.params
    return float(p["lambda0"] + p["amplitude"] * np.sin(p["omega"] * t))


def shear_motion(amplitude: float = 0.1, period_T: float = 2 * np.pi) -> DomainMotion:
    """Return φ(x, t) = x + a·sin(2πt/T)·(x₂, 0, 0)."""
    params = {"amplitude": amplitude, "omega": 2 * np.pi / period_T}
    fwd, inv = _symbolic_pair("shear", tuple(sorted(params.items())))
    return DomainMotion(name="shear", phi=fwd, phi_inv=inv, period_T=period_T, static=amplitude == 0.0, params=params)


def pulsating_annulus_motion(R0: float = 2.0, R1: float = 1.0, amplitude: float = 0.05, period_T: float = 1.0) -> DomainMotion:
    """Return the shell map whose inner radius pulsates as R1 + a·sin(2πt/T).

    The radial profile ρ(r)³ = R0³ + c(t)(r³ − R0³) keeps the outer sphere
    fixed and has the spatially constant Jacobian det(∂y/∂x) = c(t).
    """
    params = {"R0": R0, "R1": R1, "amplitude": amplitude, "omega": 2 * np.pi / period_T}
    fwd, inv = _symbolic_pair("pulsating_annulus", tuple(sorted(params.items())))
    return DomainMotion(
        name="pulsating_annulus",
        phi=fwd,
        phi_inv=inv,
        period_T=period_T,
        probe_point=(0.5 * (R0 + R1), 0.0, 0.0),
        static=amplitude == 0.0,
        params=params,
    )


def annulus_inner_radius(motion: DomainMotion, t: float) -> float:
    """Return R1(t) of a pulsating annulus motion."""
    p = motion.params
    return float(p["R1"] + p["amplitude"] * np.sin(p["omega"] * t))


def callable_motion(
    phi: Callable[[np.ndarray, float], np.ndarray],
    phi_inv: Callable[[np.ndarray, float], np.ndarray],
    period_T: float,
    probe_point: tuple[float, float, float] = (0.5, 0.0, 0.0),
    name: str = "callable",
) -> DomainMotion:
    """Wrap user callables; derivatives come from finite differences."""
    return DomainMotion(
        name=name,
        phi=FiniteDifferenceMap(phi),
        phi_inv=FiniteDifferenceMap(phi_inv),
        period_T=period_T,
        probe_point=probe_point,
        analytic=False,
    )


def finite_difference_twin(motion: DomainMotion) -> DomainMotion:
    """Return the same motion with its derivatives re-supplied by finite differences."""
    return callable_motion(motion.phi.value, motion.phi_inv.value, motion.period_T, motion.probe_point, name=f"{motion.name}[fd]")


def make_motion(name: str, params: dict[str, float] | None = None) -> DomainMotion:
    """Build a built-in motion by name, as selected in run configurations."""
    params = dict(params or {})
    period = float(params.pop("period", params.pop("T", 1.0)))
    if name == "identity":
        return identity_motion(period)
    if name == "dilation":
        return dilation_motion(params.get("lambda0", 1.0), params.get("amplitude", 0.1), period)
    if name == "shear":
        return shear_motion(params.get("amplitude", 0.1), period)
    if name == "pulsating_annulus":
        return pulsating_annulus_motion(params.get("R0", 2.0), params.get("R1", 1.0), params.get("amplitude", 0.05), period)
    raise MovingHWError(f"unknown motion '{name}'", module="geometry_kernel", operation="make_motion")


BUILTIN_MOTIONS = ("identity", "dilation", "shear", "pulsating_annulus")
