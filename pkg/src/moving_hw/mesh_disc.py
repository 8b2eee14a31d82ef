"""Tetrahedral discretization of the reference domain and weighted FE assembly.

Scalars and vector components are continuous P1; gradients, curls and the
decomposition parts are P0 cell vectors. Vector fields are stored in
pushforward (contravariant) components; flattened vectors are component-major.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.linalg
import scipy.sparse as sps
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh

from moving_hw.errors import InvalidMesh, InvalidRadii, UnknownLabel
from moving_hw.geometry_kernel import LEVI_CIVITA, MetricSample, reference_metric
from moving_hw.motions import DomainMotion

QUAD_ALPHA = 0.5854101966249685
QUAD_BETA = 0.1381966011250105
# shape function a evaluated at quadrature point q
SHAPE_AT_QP = np.full((4, 4), QUAD_BETA)
np.fill_diagonal(SHAPE_AT_QP, QUAD_ALPHA)

_LOCAL_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
_LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

FieldKind = Literal["scalar", "vector3", "cell_vector3"]


@dataclass(frozen=True, eq=False)
class ReferenceMesh:
    """Tetrahedral mesh of Ω̃ with labeled boundary components and oriented cut surfaces.

    Boundary facets are oriented with outward normals; label 0 is the outer
    component Γ₀. Cut facets carry labels ℓ = 1..L and are oriented along the
    planar cut normal ``cut_normals[ℓ-1]``.
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_facets: np.ndarray
    boundary_labels: np.ndarray
    cut_facets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))
    cut_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cut_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    cut_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    name: str = "mesh"
    params: dict[str, float] = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        """Number of vertices."""
        return int(self.vertices.shape[0])

    @property
    def n_cells(self) -> int:
        """Number of tetrahedra."""
        return int(self.tets.shape[0])

    @property
    def K(self) -> int:
        """Number of inner boundary components (Γ₁..Γ_K)."""
        return int(self.boundary_labels.max()) if self.boundary_labels.size else 0

    @property
    def L(self) -> int:
        """Number of cut surfaces."""
        return int(self.cut_normals.shape[0])

    @cached_property
    def _edge_matrix(self) -> np.ndarray:
        v = self.vertices[self.tets]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)

    @cached_property
    def volumes(self) -> np.ndarray:
        """Cell volumes |K|."""
        return np.linalg.det(self._edge_matrix) / 6.0

    @cached_property
    def grad_bary(self) -> np.ndarray:
        """Reference gradients of the barycentric coordinates, shape (nt, 4, 3)."""
        inv = np.linalg.inv(self._edge_matrix)
        grads = np.empty((self.n_cells, 4, 3))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return grads

    @cached_property
    def centroids(self) -> np.ndarray:
        """Cell centroids."""
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        """Four quadrature points per cell, shape (nt, 4, 3)."""
        return np.einsum("aq,nad->nqd", SHAPE_AT_QP, self.vertices[self.tets])

    @cached_property
    def facet_geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """Areas and outward unit normals of the boundary facets."""
        return _triangle_geometry(self.vertices, self.boundary_facets)

    @cached_property
    def boundary_vertex_labels(self) -> np.ndarray:
        """Γ label of every vertex, −1 for interior vertices."""
        labels = np.full(self.n_vertices, -1, dtype=int)
        labels[self.boundary_facets.ravel()] = np.repeat(self.boundary_labels, 3)
        return labels

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Indices of vertices on ∂Ω̃."""
        return np.flatnonzero(self.boundary_vertex_labels >= 0)

    @property
    def interior_nodes(self) -> np.ndarray:
        """Indices of vertices off ∂Ω̃."""
        return np.flatnonzero(self.boundary_vertex_labels < 0)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted outward unit normals at boundary vertices (zero inside)."""
        areas, normals = self.facet_geometry
        acc = np.zeros((self.n_vertices, 3))
        for corner in range(3):
            np.add.at(acc, self.boundary_facets[:, corner], areas[:, None] * normals)
        norm = np.linalg.norm(acc, axis=1)
        out = np.zeros_like(acc)
        mask = norm > 0
        out[mask] = acc[mask] / norm[mask, None]
        return out

    @cached_property
    def face_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique sorted faces and the (up to two) cells sharing each, −1 padded."""
        faces = np.sort(self.tets[:, _LOCAL_FACES].reshape(-1, 3), axis=1)
        unique, inverse = np.unique(faces, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        cells = np.repeat(np.arange(self.n_cells), 4)
        owners = np.full((unique.shape[0], 2), -1, dtype=int)
        order = np.argsort(inverse, kind="stable")
        first = np.ones(order.size, dtype=bool)
        first[1:] = inverse[order][1:] != inverse[order][:-1]
        owners[inverse[order][first], 0] = cells[order][first]
        owners[inverse[order][~first], 1] = cells[order][~first]
        return unique, owners

    @cached_property
    def boundary_facet_cells(self) -> np.ndarray:
        """Cell owning each boundary facet."""
        faces, owners = self.face_table
        nv = self.n_vertices
        keys = (faces[:, 0] * nv + faces[:, 1]) * nv + faces[:, 2]
        b = np.sort(self.boundary_facets, axis=1)
        wanted = (b[:, 0] * nv + b[:, 1]) * nv + b[:, 2]
        return owners[np.searchsorted(keys, wanted), 0]

    def cut_nodes(self, label: int) -> np.ndarray:
        """Vertices of the cut surface Σ_label."""
        if label < 1 or label > self.L:
            raise UnknownLabel(f"cut surface {label} not on mesh '{self.name}'", operation="cut_nodes")
        return np.unique(self.cut_facets[self.cut_labels == label])

    @cached_property
    def cut_seeds(self) -> np.ndarray:
        """Cellwise P1 jump seeds σ_ℓ, shape (L, nt, 4).

        σ_ℓ is 1 at Σ_ℓ nodes of cells behind the cut (negative side of ν_ℓ)
        and 0 otherwise, so it jumps by −1 when Σ_ℓ is crossed along ν_ℓ.
        """
        seeds = np.zeros((self.L, self.n_cells, 4))
        for ell in range(1, self.L + 1):
            on_cut = np.zeros(self.n_vertices, dtype=bool)
            on_cut[self.cut_nodes(ell)] = True
            side = (self.centroids - self.cut_points[ell - 1]) @ self.cut_normals[ell - 1]
            behind = (side < 0.0)[:, None]
            seeds[ell - 1] = (on_cut[self.tets] & behind).astype(float)
        return seeds

    def quality(self) -> dict[str, float]:
        """Return simple cell quality metrics."""
        edges = self.vertices[self.tets[:, _LOCAL_EDGES[:, 1]]] - self.vertices[self.tets[:, _LOCAL_EDGES[:, 0]]]
        longest = np.linalg.norm(edges, axis=2).max(axis=1)
        ratio = longest**3 / (6.0 * np.sqrt(2.0) * self.volumes)
        return {
            "min_volume": float(self.volumes.min()),
            "max_edge": float(longest.max()),
            "max_shape_ratio": float(ratio.max()),
        }


def _triangle_geometry(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = vertices[triangles]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    return 0.5 * norm, cross / norm[:, None]


def _orient(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    tets = tets.copy()
    v = vertices[tets]
    det = np.einsum("ni,ni->n", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), v[:, 3] - v[:, 0])
    flip = det < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets


def _kuhn_split(corners: np.ndarray) -> np.ndarray:
    """Split hexes given by 8 corners (bit order dx + 2dy + 4dz) into 6 tets each."""
    tets = []
    for p0, p1, _ in permutations(range(3)):
        b0 = 1 << p0
        b1 = b0 | (1 << p1)
        tets.append(np.stack([corners[:, 0], corners[:, b0], corners[:, b1], corners[:, 7]], axis=1))
    return np.concatenate(tets, axis=0)


def _compact(vertices: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    used = np.unique(tets)
    remap = np.full(vertices.shape[0], -1, dtype=int)
    remap[used] = np.arange(used.size)
    return vertices[used], remap[tets], used


def build_mesh(
    vertices: np.ndarray,
    tets: np.ndarray,
    name: str,
    params: dict[str, float] | None = None,
    cut_mask: np.ndarray | None = None,
    cut_normal: np.ndarray | None = None,
    cut_point: np.ndarray | None = None,
) -> ReferenceMesh:
    """Orient cells, extract and label boundary facets, and collect one planar cut surface.

    ``cut_mask`` flags vertices lying on the cut plane; every interior face with
    three flagged vertices becomes a facet of Σ₁.
    """
    tets = _orient(vertices, np.asarray(tets, dtype=int))
    skeleton = ReferenceMesh(
        vertices=vertices,
        tets=tets,
        boundary_facets=np.zeros((0, 3), dtype=int),
        boundary_labels=np.zeros(0, dtype=int),
    )
    faces, owners = skeleton.face_table
    is_boundary = owners[:, 1] < 0
    bfaces = faces[is_boundary]
    opposite = _opposite_vertex(tets[owners[is_boundary, 0]], bfaces)
    p = vertices[bfaces]
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.einsum("ni,ni->n", normal, vertices[opposite] - p[:, 0]) > 0
    bfaces[inward] = bfaces[inward][:, [0, 2, 1]]
    labels = _label_components(vertices, bfaces)

    cut_facets = np.zeros((0, 3), dtype=int)
    cut_labels = np.zeros(0, dtype=int)
    normals = np.zeros((0, 3))
    points = np.zeros((0, 3))
    if cut_mask is not None and cut_normal is not None and cut_point is not None:
        interior = faces[~is_boundary]
        on_cut = cut_mask[interior].all(axis=1)
        cut_facets = interior[on_cut].copy()
        q = vertices[cut_facets]
        n_cut = np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0])
        flip = n_cut @ cut_normal < 0
        cut_facets[flip] = cut_facets[flip][:, [0, 2, 1]]
        cut_labels = np.ones(cut_facets.shape[0], dtype=int)
        normals = np.asarray(cut_normal, dtype=float)[None, :]
        points = np.asarray(cut_point, dtype=float)[None, :]

    return ReferenceMesh(
        vertices=vertices,
        tets=tets,
        boundary_facets=bfaces,
        boundary_labels=labels,
        cut_facets=cut_facets,
        cut_labels=cut_labels,
        cut_normals=normals,
        cut_points=points,
        name=name,
        params=dict(params or {}),
    )


def _opposite_vertex(cells: np.ndarray, faces: np.ndarray) -> np.ndarray:
    in_face = (cells[:, :, None] == faces[:, None, :]).any(axis=2)
    return cells[~in_face]


def _label_components(vertices: np.ndarray, facets: np.ndarray) -> np.ndarray:
    nv = vertices.shape[0]
    rows = np.concatenate([facets[:, 0], facets[:, 1], facets[:, 2]])
    cols = np.concatenate([facets[:, 1], facets[:, 2], facets[:, 0]])
    graph = sps.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(nv, nv))
    _, comp = csgraph.connected_components(graph, directed=False)
    facet_comp = comp[facets[:, 0]]
    distinct = np.unique(facet_comp)
    reach = {c: np.linalg.norm(vertices[facets[facet_comp == c]].reshape(-1, 3), axis=1).max() for c in distinct}
    ordered = sorted(distinct, key=lambda c: -reach[c])
    mapping = {c: k for k, c in enumerate(ordered)}
    return np.array([mapping[c] for c in facet_comp], dtype=int)


def _grid_corners(shape: tuple[int, int, int], keep: np.ndarray, index: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    cells = np.argwhere(keep)
    corners = np.empty((cells.shape[0], 8), dtype=int)
    for bits in range(8):
        offset = np.array([bits & 1, (bits >> 1) & 1, (bits >> 2) & 1])
        corners[:, bits] = index(cells + offset)
    return corners


def _inner_block(n: int, ratio: float, layers: int | None) -> int:
    if layers is not None:
        n_in = n - 2 * layers
    else:
        n_in = max(2, int(round(ratio * n)))
        if (n - n_in) % 2:
            n_in = n_in + 1 if n_in + 1 <= n - 2 else n_in - 1
    if n_in < 2 or n_in > n - 2 or (n - n_in) % 2:
        raise InvalidMesh(f"cannot fit an inner block of {n_in} cells into resolution {n}", operation="generate_annulus_mesh")
    return n_in


def generate_annulus_mesh(R0: float, R1: float, resolution: int, layers: int | None = None) -> ReferenceMesh:
    """Mesh the spherical shell R1 < |y| < R0 by radially mapping a cube shell.

    ``resolution`` cells span each edge of the outer cube face; ``layers``
    optionally fixes the number of radial cell layers.
    """
    if not 0.0 < R1 < R0:
        raise InvalidRadii(f"need 0 < R1 < R0, got R0={R0}, R1={R1}", operation="generate_annulus_mesh")
    n = int(resolution)
    if n < 4:
        raise InvalidMesh(f"resolution must be at least 4, got {n}", operation="generate_annulus_mesh")
    n_in = _inner_block(n, R1 / R0, layers)
    m = (n - n_in) // 2
    idx = np.arange(n)
    I, Jg, Kg = np.meshgrid(idx, idx, idx, indexing="ij")
    inside = (I >= m) & (I < m + n_in) & (Jg >= m) & (Jg < m + n_in) & (Kg >= m) & (Kg < m + n_in)

    def vid(ijk: np.ndarray) -> np.ndarray:
        return (ijk[:, 0] * (n + 1) + ijk[:, 1]) * (n + 1) + ijk[:, 2]

    corners = _grid_corners((n, n, n), ~inside, vid)
    g = -1.0 + 2.0 * np.arange(n + 1) / n
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    verts, tets, _ = _compact(P, _kuhn_split(corners))
    s = np.abs(verts).max(axis=1)
    s_in = n_in / n
    radius = R1 + (s - s_in) / (1.0 - s_in) * (R0 - R1)
    verts = verts / np.linalg.norm(verts, axis=1)[:, None] * radius[:, None]
    return build_mesh(verts, tets, name="annulus", params={"R0": R0, "R1": R1, "resolution": n, "layers": m})


def generate_ball_mesh(R: float, resolution: int) -> ReferenceMesh:
    """Mesh the ball |y| < R by radially mapping a cube grid (K = 0, L = 0)."""
    if R <= 0.0:
        raise InvalidRadii(f"radius must be positive, got {R}", operation="generate_ball_mesh")
    n = int(resolution)
    if n < 2:
        raise InvalidMesh(f"resolution must be at least 2, got {n}", operation="generate_ball_mesh")

    def vid(ijk: np.ndarray) -> np.ndarray:
        return (ijk[:, 0] * (n + 1) + ijk[:, 1]) * (n + 1) + ijk[:, 2]

    corners = _grid_corners((n, n, n), np.ones((n, n, n), dtype=bool), vid)
    g = -1.0 + 2.0 * np.arange(n + 1) / n
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    s = np.abs(P).max(axis=1)
    r = np.linalg.norm(P, axis=1)
    scale = np.divide(s, r, out=np.zeros_like(r), where=r > 0) * R
    return build_mesh(P * scale[:, None], _kuhn_split(corners), name="ball", params={"R": R, "resolution": n})


def generate_solid_torus_mesh(major_R: float, minor_r: float, resolution: int) -> ReferenceMesh:
    """Mesh the solid torus around the y₃ axis with one cut disk Σ₁ in the plane y₂ = 0, y₁ > 0.

    The disk cross-section has ``resolution`` cells per side; 4·resolution
    slices go around the ring. Σ₁ is oriented along +y₂ (increasing angle).
    """
    if not 0.0 < minor_r < major_R:
        raise InvalidRadii(f"need 0 < r < R, got R={major_R}, r={minor_r}", operation="generate_solid_torus_mesh")
    n = int(resolution)
    if n < 2:
        raise InvalidMesh(f"resolution must be at least 2, got {n}", operation="generate_solid_torus_mesh")
    n_phi = 4 * n

    def vid(ijk: np.ndarray) -> np.ndarray:
        return (ijk[:, 0] * (n + 1) + ijk[:, 1]) * n_phi + ijk[:, 2] % n_phi

    corners = _grid_corners((n, n, n_phi), np.ones((n, n, n_phi), dtype=bool), vid)
    g = -1.0 + 2.0 * np.arange(n + 1) / n
    U, V = np.meshgrid(g, g, indexing="ij")
    s = np.maximum(np.abs(U), np.abs(V))
    r = np.hypot(U, V)
    scale = np.divide(s, r, out=np.zeros_like(r), where=r > 0) * minor_r
    a, b = (U * scale).ravel(), (V * scale).ravel()
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    A, PHI = np.meshgrid(a, phi, indexing="ij")
    B, _ = np.meshgrid(b, phi, indexing="ij")
    verts = np.stack([(major_R + A) * np.cos(PHI), (major_R + A) * np.sin(PHI), B], axis=-1).reshape(-1, 3)
    slice_index = np.tile(np.arange(n_phi), (n + 1) ** 2)
    return build_mesh(
        verts,
        _kuhn_split(corners),
        name="solid_torus",
        params={"major_R": major_R, "minor_r": minor_r, "resolution": n},
        cut_mask=slice_index == 0,
        cut_normal=np.array([0.0, 1.0, 0.0]),
        cut_point=np.array([major_R, 0.0, 0.0]),
    )


@dataclass
class TopologyReport:
    """Counts behind the cut-surface validation."""

    n_vertices: int
    n_edges: int
    n_faces: int
    n_cells: int
    euler_characteristic: int
    K: int
    L: int
    betti_1: int
    cut_euler: list[int]
    cut_betti_1: int
    dual_connected_after_cut: bool
    min_volume: float

    @property
    def valid(self) -> bool:
        """True when the cut surfaces are disks that kill every handle without disconnecting."""
        return (
            self.L == self.betti_1
            and self.cut_betti_1 == 0
            and self.dual_connected_after_cut
            and all(chi == 1 for chi in self.cut_euler)
            and self.min_volume > 0.0
        )


def validate_topology(mesh: ReferenceMesh, strict: bool = True) -> TopologyReport:
    """Count the Euler characteristic and Betti number and check the cut surfaces.

    b₁ = 1 + K − χ for a domain in ℝ³ whose boundary has K + 1 components;
    cutting along L disks adds L to χ and must leave b₁ = 0 and the dual
    graph connected.

    Raises:
        InvalidMesh: when ``strict`` and the report is not valid.
    """
    edges = np.unique(np.sort(mesh.tets[:, _LOCAL_EDGES].reshape(-1, 2), axis=1), axis=0)
    faces, owners = mesh.face_table
    chi = mesh.n_vertices - edges.shape[0] + faces.shape[0] - mesh.n_cells
    betti_1 = 1 + mesh.K - chi
    cut_euler = []
    for ell in range(1, mesh.L + 1):
        tri = mesh.cut_facets[mesh.cut_labels == ell]
        cut_edges = np.unique(np.sort(tri[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1), axis=0)
        cut_euler.append(int(np.unique(tri).size - cut_edges.shape[0] + tri.shape[0]))
    cut_keys = {tuple(f) for f in np.sort(mesh.cut_facets, axis=1)}
    interior = owners[:, 1] >= 0
    keep = interior & np.array([tuple(f) not in cut_keys for f in faces])
    pairs = owners[keep]
    graph = sps.coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(mesh.n_cells, mesh.n_cells))
    n_comp, _ = csgraph.connected_components(graph, directed=False)
    report = TopologyReport(
        n_vertices=mesh.n_vertices,
        n_edges=int(edges.shape[0]),
        n_faces=int(faces.shape[0]),
        n_cells=mesh.n_cells,
        euler_characteristic=int(chi),
        K=mesh.K,
        L=mesh.L,
        betti_1=int(betti_1),
        cut_euler=cut_euler,
        cut_betti_1=int(1 + mesh.K - (chi + sum(cut_euler))),
        dual_connected_after_cut=n_comp == 1,
        min_volume=float(mesh.volumes.min()),
    )
    if strict and not report.valid:
        raise InvalidMesh(
            f"topology check failed: L={report.L}, b1={report.betti_1}, cut b1={report.cut_betti_1}, "
            f"cut euler={report.cut_euler}, connected={report.dual_connected_after_cut}, min volume={report.min_volume:.3e}",
            operation="validate_topology",
        )
    return report


def write_mesh(mesh: ReferenceMesh, path: str | Path) -> Path:
    """Write the plain-text mesh format; cut facets carry negative labels −ℓ."""
    path = Path(path)
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"tets {mesh.n_cells}")
    lines += [" ".join(str(int(i)) for i in tet) for tet in mesh.tets]
    n_facets = mesh.boundary_facets.shape[0] + mesh.cut_facets.shape[0]
    lines.append(f"facets {n_facets}")
    lines += [f"{a} {b} {c} {label}" for (a, b, c), label in zip(mesh.boundary_facets, mesh.boundary_labels)]
    lines += [f"{a} {b} {c} {-label}" for (a, b, c), label in zip(mesh.cut_facets, mesh.cut_labels)]
    lines.append(f"cuts {mesh.L}")
    lines += [
        " ".join(f"{v:.17g}" for v in (*normal, *point))
        for normal, point in zip(mesh.cut_normals, mesh.cut_points)
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_mesh(path: str | Path, name: str | None = None) -> ReferenceMesh:
    """Read a mesh written by `write_mesh`.

    Raises:
        InvalidMesh: on a malformed file.
    """
    path = Path(path)
    rows = [line.split() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    sections: dict[str, list[list[str]]] = {}
    pos = 0
    try:
        while pos < len(rows):
            key, count = rows[pos][0], int(rows[pos][1])
            sections[key] = rows[pos + 1 : pos + 1 + count]
            pos += 1 + count
        vertices = np.array(sections["vertices"], dtype=float).reshape(-1, 3)
        tets = np.array(sections["tets"], dtype=int).reshape(-1, 4)
        facets = np.array(sections.get("facets", []), dtype=int).reshape(-1, 4)
        cuts = np.array(sections.get("cuts", []), dtype=float).reshape(-1, 6)
    except (KeyError, IndexError, ValueError) as exc:
        raise InvalidMesh(f"malformed mesh file {path}: {exc}", operation="read_mesh") from exc
    boundary = facets[:, 3] >= 0
    return ReferenceMesh(
        vertices=vertices,
        tets=_orient(vertices, tets),
        boundary_facets=facets[boundary, :3],
        boundary_labels=facets[boundary, 3],
        cut_facets=facets[~boundary, :3],
        cut_labels=-facets[~boundary, 3],
        cut_normals=cuts[:, :3],
        cut_points=cuts[:, 3:],
        name=name or path.stem,
    )


@dataclass(frozen=True, eq=False)
class FEField:
    """A discrete field: P1 scalar, P1 vector (nv, 3) or P0 cell vector (nt, 3)."""

    kind: FieldKind
    values: np.ndarray
    mesh: ReferenceMesh

    def __post_init__(self) -> None:
        """Check the coefficient count against the mesh."""
        expected = {
            "scalar": (self.mesh.n_vertices,),
            "vector3": (self.mesh.n_vertices, 3),
            "cell_vector3": (self.mesh.n_cells, 3),
        }[self.kind]
        if self.values.shape != expected:
            raise InvalidMesh(f"{self.kind} field has shape {self.values.shape}, expected {expected}", operation="FEField")

    @property
    def flat(self) -> np.ndarray:
        """Component-major flattening."""
        return self.values.T.ravel() if self.values.ndim == 2 else self.values

    @classmethod
    def from_flat(cls, kind: FieldKind, flat: np.ndarray, mesh: ReferenceMesh) -> FEField:
        """Rebuild a field from its component-major flattening."""
        if kind == "scalar":
            return cls(kind, np.asarray(flat, dtype=float), mesh)
        return cls(kind, np.asarray(flat, dtype=float).reshape(3, -1).T.copy(), mesh)

    def to_cells(self) -> FEField:
        """Cell average of a nodal vector field."""
        if self.kind != "vector3":
            return self
        return FEField("cell_vector3", self.values[self.mesh.tets].mean(axis=1), self.mesh)

    @classmethod
    def zeros(cls, kind: FieldKind, mesh: ReferenceMesh) -> FEField:
        """Return the zero field of ``kind``."""
        shape = {"scalar": (mesh.n_vertices,), "vector3": (mesh.n_vertices, 3), "cell_vector3": (mesh.n_cells, 3)}[kind]
        return cls(kind, np.zeros(shape), mesh)

    def __add__(self, other: FEField) -> FEField:
        """Add two fields of the same kind."""
        return FEField(self.kind, self.values + other.values, self.mesh)

    def __sub__(self, other: FEField) -> FEField:
        """Subtract two fields of the same kind."""
        return FEField(self.kind, self.values - other.values, self.mesh)

    def __mul__(self, scale: float) -> FEField:
        """Scale the field."""
        return FEField(self.kind, self.values * scale, self.mesh)

    __rmul__ = __mul__


def _vector_dofs(mesh: ReferenceMesh) -> np.ndarray:
    """Global component-major DOFs of each cell, ordered (a, m), shape (nt, 12)."""
    nv = mesh.n_vertices
    return (mesh.tets[:, :, None] + nv * np.arange(3)[None, None, :]).reshape(mesh.n_cells, 12)


def _scatter(local: np.ndarray, row_dofs: np.ndarray, col_dofs: np.ndarray, shape: tuple[int, int]) -> sps.csr_matrix:
    rows = np.broadcast_to(row_dofs[:, :, None], local.shape)
    cols = np.broadcast_to(col_dofs[:, None, :], local.shape)
    return sps.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def quadrature_metric(mesh: ReferenceMesh, motion: DomainMotion, t: float) -> MetricSample:
    """Metric at the four quadrature points of every cell (batch of nt·4)."""
    return reference_metric(motion, mesh.quadrature_points.reshape(-1, 3), t)


@dataclass(frozen=True, eq=False)
class WeightedOperators:
    """Operators of the weighted inner products at one time.

    Attributes:
        lap_Lt: Σ_K |K| J ∇φ_a·G_K ∇φ_b with G_K the cell mean of g^ij.
        mass_scalar: J-weighted scalar P1 mass.
        mass_t: vector P1 mass weighted by g_ij J (component-major).
        stiffness_t: vector P1 ⟨∇_g ũ, ∇_g ṽ⟩_t including Christoffel terms.
        grad: reference gradient, P1 scalar → P0 cell vector.
        div: P1-tested weak divergence J ∫ φ_a div ũ.
        curl: reference curl, P1 vector → P0 cell vector.
        lower: nodal index lowering by g_ij(y_a).
        rot: Rot_h = J⁻¹ curl ∘ lower.
        cell_mass: P0 inner product |K| J G_K⁻¹.
        normal_trace: rows ñ_a·w̃_a for boundary nodes a.
    """

    mesh: ReferenceMesh
    motion: DomainMotion
    time: float
    J: float
    dJ_ds: float
    g_upper_cell: np.ndarray
    g_lower_cell: np.ndarray
    qp_metric: MetricSample
    lap_Lt: sps.csr_matrix
    mass_scalar: sps.csr_matrix
    mass_t: sps.csr_matrix
    stiffness_t: sps.csr_matrix
    grad: sps.csr_matrix
    div: sps.csr_matrix
    curl: sps.csr_matrix
    lower: sps.csr_matrix
    rot: sps.csr_matrix
    cell_mass: sps.csr_matrix
    normal_trace: sps.csr_matrix

    def grad_cells(self, p: np.ndarray) -> np.ndarray:
        """Reference gradient of a P1 scalar, (nt, 3)."""
        return (self.grad @ p).reshape(3, -1).T

    def metric_grad(self, p: np.ndarray) -> np.ndarray:
        """Contravariant gradient G_K ∇p of a P1 scalar, (nt, 3)."""
        return np.einsum("nij,nj->ni", self.g_upper_cell, self.grad_cells(p))

    def rot_cells(self, w: np.ndarray) -> np.ndarray:
        """Rot_h of a nodal vector field (nv, 3), (nt, 3)."""
        return (self.rot @ w.T.ravel()).reshape(3, -1).T

    def cell_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """⟨a, b⟩_t for P0 cell vectors (nt, 3)."""
        return float(np.einsum("n,ni,nij,nj->", self.mesh.volumes * self.J, a, self.g_lower_cell, b))

    def cell_norm(self, a: np.ndarray) -> float:
        """L²_t norm of a P0 cell vector."""
        return float(np.sqrt(max(self.cell_inner(a, a), 0.0)))

    def flux_functional(self, seed: np.ndarray) -> np.ndarray:
        """Cell weights c with flux(b) = Σ_K c_K·b_K for P0 fields, from a cellwise P1 seed (nt, 4)."""
        grad_seed = np.einsum("na,nad->nd", seed, self.mesh.grad_bary)
        return (self.mesh.volumes * self.J)[:, None] * grad_seed


def scalar_stiffness(mesh: ReferenceMesh, cell_tensor: np.ndarray) -> sps.csr_matrix:
    """Return Σ_K |K| ∇φ_a·T_K ∇φ_b for a cellwise tensor T (nt, 3, 3)."""
    local = np.einsum("n,nad,nde,nbe->nab", mesh.volumes, mesh.grad_bary, cell_tensor, mesh.grad_bary)
    return _scatter(local, mesh.tets, mesh.tets, (mesh.n_vertices, mesh.n_vertices))


def assemble_weighted(mesh: ReferenceMesh, motion: DomainMotion, t: float) -> WeightedOperators:
    """Assemble all weighted operators of the reference mesh at time ``t``."""
    nv, nt = mesh.n_vertices, mesh.n_cells
    metric = quadrature_metric(mesh, motion, t)
    g_up = metric.g_upper.reshape(nt, 4, 3, 3)
    g_low = metric.g_lower.reshape(nt, 4, 3, 3)
    gamma = metric.christoffel.reshape(nt, 4, 3, 3, 3)
    J = float(metric.J.mean())
    dJ = float(metric.dJ_ds.mean())
    vol = mesh.volumes
    grads = mesh.grad_bary
    weight = (vol * J / 4.0)[:, None] * np.ones((1, 4))

    g_up_cell = g_up.mean(axis=1)
    g_low_cell = np.linalg.inv(g_up_cell)
    lap = scalar_stiffness(mesh, J * g_up_cell)
    mass_s_local = np.einsum("nq,aq,bq->nab", weight, SHAPE_AT_QP, SHAPE_AT_QP)
    mass_s = _scatter(mass_s_local, mesh.tets, mesh.tets, (nv, nv))

    dofs = _vector_dofs(mesh)
    mass_local = np.einsum("nq,aq,bq,nqmp->nambp", weight, SHAPE_AT_QP, SHAPE_AT_QP, g_low).reshape(nt, 12, 12)
    mass_t = _scatter(mass_local, dofs, dofs, (3 * nv, 3 * nv))
    eye = np.eye(3)
    # D[n,q,i,k,a,m]: coefficient of u_a^m in ∇_k ũ^i at quadrature point q
    D = np.einsum("im,nak->nikam", eye, grads)[:, None] + np.einsum("nqikm,aq->nqikam", gamma, SHAPE_AT_QP)
    WD = np.einsum("nqij,nqkl,nqjlbp->nqikbp", g_low, g_up, D, optimize=True)
    stiff_local = np.einsum("nq,nqikam,nqikbp->nambp", weight, D, WD, optimize=True).reshape(nt, 12, 12)
    stiffness_t = _scatter(stiff_local, dofs, dofs, (3 * nv, 3 * nv))

    cell_rows = np.arange(nt)[:, None] + nt * np.arange(3)[None, :]
    grad_local = np.einsum("nad->nda", grads)
    grad_op = _scatter(grad_local, cell_rows, mesh.tets, (3 * nt, nv))
    div_local = np.einsum("n,nbm->nbm", vol * J / 4.0, grads).reshape(nt, 1, 12)
    div_local = np.broadcast_to(div_local, (nt, 4, 12))
    div_op = _scatter(np.ascontiguousarray(div_local), mesh.tets, dofs, (nv, 3 * nv))
    curl_local = np.einsum("ikl,nak->nial", LEVI_CIVITA, grads).reshape(nt, 3, 12)
    curl_op = _scatter(curl_local, cell_rows, dofs, (3 * nt, 3 * nv))

    node_metric = reference_metric(motion, mesh.vertices, t).g_lower
    node_rows = np.arange(nv)[:, None] + nv * np.arange(3)[None, :]
    lower = _scatter(node_metric, node_rows, node_rows, (3 * nv, 3 * nv))
    rot = (curl_op @ lower / J).tocsr()
    cell_mass = _scatter((vol * J)[:, None, None] * g_low_cell, cell_rows, cell_rows, (3 * nt, 3 * nt))

    bnodes = mesh.boundary_nodes
    normals = mesh.vertex_normals[bnodes]
    trace_rows = np.repeat(np.arange(bnodes.size), 3)
    trace_cols = (bnodes[:, None] + nv * np.arange(3)[None, :]).ravel()
    normal_trace = sps.csr_matrix((normals.ravel(), (trace_rows, trace_cols)), shape=(bnodes.size, 3 * nv))

    return WeightedOperators(
        mesh=mesh,
        motion=motion,
        time=float(t),
        J=J,
        dJ_ds=dJ,
        g_upper_cell=g_up_cell,
        g_lower_cell=g_low_cell,
        qp_metric=metric,
        lap_Lt=lap,
        mass_scalar=mass_s,
        mass_t=mass_t,
        stiffness_t=stiffness_t,
        grad=grad_op,
        div=div_op,
        curl=curl_op,
        lower=lower,
        rot=rot,
        cell_mass=cell_mass,
        normal_trace=normal_trace,
    )


def parse_surface(surface: str, mesh: ReferenceMesh) -> tuple[str, int]:
    """Split ``gamma<k>`` / ``sigma<l>`` into kind and index, validating against the mesh."""
    name = surface.lower()
    for kind, limit, low in (("gamma", mesh.K, 0), ("sigma", mesh.L, 1)):
        if name.startswith(kind) and name[len(kind) :].isdigit():
            index = int(name[len(kind) :])
            if low <= index <= limit:
                return kind, index
    raise UnknownLabel(f"surface '{surface}' not on mesh '{mesh.name}'", operation="surface_flux")


def boundary_indicator(mesh: ReferenceMesh, k: int) -> np.ndarray:
    """P1 function equal to 1 at the nodes of Γ_k and 0 elsewhere."""
    return (mesh.boundary_vertex_labels == k).astype(float)


def surface_flux(
    field: FEField,
    surface: str,
    mesh: ReferenceMesh,
    motion: DomainMotion,
    t: float,
    ops: WeightedOperators | None = None,
) -> float:
    """Return the physical flux ∫ u·ν dS through Γ_k (outward) or Σ_ℓ (along ν_ℓ).

    Nodal fields use the facet centroid rule times J(t) (Piola factor). Cell
    fields use the weak flux Σ_K |K| J b_K·∇χ_K with χ the Γ_k node indicator
    or the cut seed, which is exact for weakly divergence-free fields.
    """
    kind, index = parse_surface(surface, mesh)
    if field.kind == "vector3":
        if kind == "gamma":
            mask = mesh.boundary_labels == index
            tri = mesh.boundary_facets[mask]
            areas, normals = mesh.facet_geometry[0][mask], mesh.facet_geometry[1][mask]
        else:
            tri = mesh.cut_facets[mesh.cut_labels == index]
            areas, normals = _triangle_geometry(mesh.vertices, tri)
        centroid_values = field.values[tri].mean(axis=1)
        J = motion.jacobian_J(t)
        return float(J * np.einsum("n,ni,ni->", areas, centroid_values, normals))
    if field.kind != "cell_vector3":
        raise UnknownLabel("flux needs a vector field", operation="surface_flux")
    ops = ops or assemble_weighted(mesh, motion, t)
    if kind == "gamma":
        seed = boundary_indicator(mesh, index)[mesh.tets]
    else:
        seed = mesh.cut_seeds[index - 1]
    return float(np.einsum("nd,nd->", ops.flux_functional(seed), field.values))


# degree-5 seven-point rule on a triangle: barycentric points and weights summing to 1
_TRI7_A = (0.059715871789770, 0.470142064105115, 0.470142064105115)
_TRI7_B = (0.797426985353087, 0.101286507323456, 0.101286507323456)
_TRI7_BARY = np.array(
    [[1 / 3, 1 / 3, 1 / 3]]
    + [list(np.roll(_TRI7_A, k)) for k in range(3)]
    + [list(np.roll(_TRI7_B, k)) for k in range(3)]
)
_TRI7_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


@dataclass(frozen=True)
class BoundaryRule:
    """Surface quadrature on ∂Ω̃: points, weights times outward unit normals, and Γ labels.

    ``chart`` is ``sphere``/``shell``/``torus`` when the rule lives on the exact
    reference surface, ``facet`` when it integrates over the boundary triangles.
    """

    points: np.ndarray
    weighted_normals: np.ndarray
    labels: np.ndarray
    chart: str


def _sphere_rule(radius: float, order: int, sign: float, label: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z, wz = np.polynomial.legendre.leggauss(order)
    phi = 2.0 * np.pi * np.arange(2 * order) / (2 * order)
    Z, PHI = np.meshgrid(z, phi, indexing="ij")
    s = np.sqrt(1.0 - Z**2)
    unit = np.stack([s * np.cos(PHI), s * np.sin(PHI), Z], axis=-1).reshape(-1, 3)
    weights = np.repeat(wz, phi.size) * radius**2 * (2.0 * np.pi / phi.size)
    return radius * unit, sign * weights[:, None] * unit, np.full(unit.shape[0], label)


def _torus_rule(major_R: float, minor_r: float, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = 2.0 * np.pi * np.arange(2 * order) / (2 * order)
    v = 2.0 * np.pi * np.arange(4 * order) / (4 * order)
    U, V = np.meshgrid(u, v, indexing="ij")
    ring = major_R + minor_r * np.cos(U)
    points = np.stack([ring * np.cos(V), ring * np.sin(V), minor_r * np.sin(U)], axis=-1).reshape(-1, 3)
    normals = np.stack([np.cos(U) * np.cos(V), np.cos(U) * np.sin(V), np.sin(U)], axis=-1).reshape(-1, 3)
    weights = (minor_r * ring).ravel() * (2.0 * np.pi / u.size) * (2.0 * np.pi / v.size)
    return points, weights[:, None] * normals, np.zeros(points.shape[0], dtype=int)


def boundary_quadrature(mesh: ReferenceMesh, order: int = 24) -> BoundaryRule:
    """Quadrature for ∮ v·n dS over ∂Ω̃.

    Generated balls, shells and solid tori use their exact reference surfaces
    (Gauss–Legendre × trapezoid on spheres, double trapezoid on the torus);
    any other mesh uses a degree-5 rule on each boundary facet.
    """
    p = mesh.params
    if mesh.name == "ball":
        points, wn, labels = _sphere_rule(p["R"], order, 1.0, 0)
        return BoundaryRule(points, wn, labels, "sphere")
    if mesh.name == "annulus":
        parts = [_sphere_rule(p["R0"], order, 1.0, 0), _sphere_rule(p["R1"], order, -1.0, 1)]
        points, wn, labels = (np.concatenate(items) for items in zip(*parts))
        return BoundaryRule(points, wn, labels, "shell")
    if mesh.name == "solid_torus":
        points, wn, labels = _torus_rule(p["major_R"], p["minor_r"], order)
        return BoundaryRule(points, wn, labels, "torus")
    areas, normals = mesh.facet_geometry
    corners = mesh.vertices[mesh.boundary_facets]
    points = np.einsum("qa,nad->nqd", _TRI7_BARY, corners).reshape(-1, 3)
    weights = np.outer(areas, _TRI7_WEIGHTS)
    wn = (weights[..., None] * normals[:, None, :]).reshape(-1, 3)
    return BoundaryRule(points, wn, np.repeat(mesh.boundary_labels, _TRI7_WEIGHTS.size), "facet")


def nodal_average(mesh: ReferenceMesh, cell_values: np.ndarray) -> np.ndarray:
    """Volume-weighted recovery of nodal values from cell values."""
    values = cell_values.reshape(mesh.n_cells, -1)
    acc = np.zeros((mesh.n_vertices, values.shape[1]))
    weight = np.zeros(mesh.n_vertices)
    for corner in range(4):
        np.add.at(acc, mesh.tets[:, corner], mesh.volumes[:, None] * values)
        np.add.at(weight, mesh.tets[:, corner], mesh.volumes)
    return acc / weight[:, None]


def _cell_gradient(mesh: ReferenceMesh, nodal: np.ndarray) -> np.ndarray:
    """Cellwise gradient of nodal P1 data (nv, d) → (nt, d, 3)."""
    return np.einsum("nad,nae->nde", nodal[mesh.tets].reshape(mesh.n_cells, 4, -1), mesh.grad_bary)


@dataclass(frozen=True)
class NormTriple:
    """L²_t, H¹_t and the broken (recovered) H² diagnostic."""

    L2_t: float
    H1_t: float
    H2_broken: float


def norms(field: FEField, mesh: ReferenceMesh, motion: DomainMotion, t: float, ops: WeightedOperators | None = None) -> NormTriple:
    """Return the weighted norms of a field; H² uses gradient recovery and is diagnostic only."""
    ops = ops or assemble_weighted(mesh, motion, t)
    weight = mesh.volumes * ops.J
    if field.kind == "scalar":
        c = field.values
        l2 = float(c @ (ops.mass_scalar @ c))
        semi = float(c @ (ops.lap_Lt @ c))
        first = ops.grad_cells(c)[:, None, :]
    elif field.kind == "vector3":
        c = field.flat
        l2 = float(c @ (ops.mass_t @ c))
        semi = float(c @ (ops.stiffness_t @ c))
        first = _cell_gradient(mesh, field.values)
    else:
        l2 = ops.cell_inner(field.values, field.values)
        nodal = nodal_average(mesh, field.values)
        recovered = FEField("vector3", nodal, mesh)
        semi = float(recovered.flat @ (ops.stiffness_t @ recovered.flat))
        first = _cell_gradient(mesh, nodal)
    second = _cell_gradient(mesh, nodal_average(mesh, first.reshape(mesh.n_cells, -1)))
    hess = float(np.einsum("n,nd->", weight, second.reshape(mesh.n_cells, -1) ** 2))
    l2, semi = max(l2, 0.0), max(semi, 0.0)
    return NormTriple(L2_t=float(np.sqrt(l2)), H1_t=float(np.sqrt(l2 + semi)), H2_broken=float(np.sqrt(l2 + semi + hess)))


def norm_equivalence_bounds(ops: WeightedOperators) -> tuple[float, float]:
    """Return (low, high) with low·‖ũ‖_euclid ≤ ‖ũ‖_t ≤ high·‖ũ‖_euclid for P1 vector fields."""
    weights = ops.qp_metric.g_lower * ops.qp_metric.J[:, None, None]
    eig = np.linalg.eigvalsh(weights)
    return float(np.sqrt(eig.min())), float(np.sqrt(eig.max()))


def poincare_constant(mesh: ReferenceMesh, motion: DomainMotion, t: float, ops: WeightedOperators | None = None) -> float:
    """Return C_p = σ₁^{-1/2} from the smallest Dirichlet eigenvalue σ₁ of the weighted Laplacian."""
    ops = ops or assemble_weighted(mesh, motion, t)
    inner = mesh.interior_nodes
    if inner.size == 0:
        raise InvalidMesh("mesh has no interior nodes", operation="poincare_constant")
    A = ops.lap_Lt[inner][:, inner].tocsc()
    M = ops.mass_scalar[inner][:, inner].tocsc()
    if inner.size < 8:
        sigma_1 = float(scipy.linalg.eigh(A.toarray(), M.toarray(), eigvals_only=True)[0])
    else:
        sigma_1 = float(eigsh(A, k=1, M=M, sigma=0.0, which="LM", return_eigenvectors=False)[0])
    return float(1.0 / np.sqrt(sigma_1))


def integration_by_parts_defect(mesh: ReferenceMesh, u: np.ndarray, q: np.ndarray) -> float:
    """Return ∫ q div u + ∫ u·∇q − ∮ q u·n for nodal P1 ``u`` (nv, 3) and ``q`` (nv,).

    The boundary term uses the edge-midpoint rule, exact for the quadratic
    integrand q·(u·n) on each facet.
    """
    vol = mesh.volumes
    grads = mesh.grad_bary
    div_u = np.einsum("nad,nad->n", u[mesh.tets], grads)
    grad_q = np.einsum("na,nad->nd", q[mesh.tets], grads)
    interior = np.sum(vol * div_u * q[mesh.tets].mean(axis=1)) + np.sum(vol * np.einsum("nd,nd->n", u[mesh.tets].mean(axis=1), grad_q))
    areas, normals = mesh.facet_geometry
    tri = mesh.boundary_facets
    boundary = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        q_mid = 0.5 * (q[tri[:, a]] + q[tri[:, b]])
        u_mid = 0.5 * (u[tri[:, a]] + u[tri[:, b]])
        boundary += np.sum(areas / 3.0 * q_mid * np.einsum("nd,nd->n", u_mid, normals))
    return float(interior - boundary)


def interpolate(mesh: ReferenceMesh, func: Callable[[np.ndarray], np.ndarray], kind: FieldKind = "vector3") -> FEField:
    """Nodal interpolant of ``func`` (cell-centroid values for ``cell_vector3``)."""
    points = mesh.centroids if kind == "cell_vector3" else mesh.vertices
    return FEField(kind, np.asarray(func(points), dtype=float), mesh)
