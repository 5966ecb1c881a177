"""Structured triangular mesh on a rectangle with a piecewise-linear basis.

Nodes are numbered row-major, ``n = j * nx + i`` with ``i`` along x.  Every
grid cell ``(i, j)`` is split along its lower-left to upper-right diagonal
into a lower triangle (element ``2 * cell``) and an upper triangle (element
``2 * cell + 1``), where ``cell = j * (nx - 1) + i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OutOfDomainError(ValueError):
    """Raised when a query point lies outside the mesh extent."""


# Barycentric coordinates down to -_BARY_TOL count as inside.  Makes points
# on shared edges deterministic under rounding.
_BARY_TOL = 1e-12


@dataclass(frozen=True)
class StructuredMesh:
    nx: int
    ny: int
    lx: float
    ly: float
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    dirichlet_nodes: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def h(self) -> float:
        """Minimum node spacing."""
        return min(self.hx, self.hy)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.lx, self.ly))

    def element_areas(self) -> np.ndarray:
        """Signed element areas (all positive for a valid mesh)."""
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three local basis functions, shape (ne, 3, 2)."""
        p = self.nodes[self.elements]
        x, y = p[..., 0], p[..., 1]
        two_area = 2.0 * self.element_areas()
        grads = np.empty((self.n_elements, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (y[:, b] - y[:, c]) / two_area
            grads[:, a, 1] = (x[:, c] - x[:, b]) / two_area
        return grads

    def node_elements(self) -> list[np.ndarray]:
        """Elements adjacent to each node."""
        order = np.argsort(self.elements.ravel(), kind="stable")
        owners = order // 3
        counts = np.bincount(self.elements.ravel(), minlength=self.n_nodes)
        return np.split(owners, np.cumsum(counts)[:-1])


def build_mesh(nx: int, ny: int, extent=(0.5, 0.5)) -> StructuredMesh:
    """Uniform triangulation of ``[0, Lx] x [0, Ly]`` with ``nx * ny`` nodes.

    Dirichlet nodes are those on the left and right edges (x = 0 and x = Lx);
    the bottom and top edges carry the natural (Neumann) condition.
    """
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise ValueError(f"need nx, ny >= 2, got nx={nx}, ny={ny}")
    lx, ly = (float(v) for v in extent)
    if not (np.isfinite(lx) and np.isfinite(ly)) or lx <= 0 or ly <= 0:
        raise ValueError(f"degenerate extent {extent!r}")
    nx, ny = int(nx), int(ny)

    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    i, j = i.ravel(), j.ravel()
    v00 = j * nx + i
    v10 = v00 + 1
    v01 = v00 + nx
    v11 = v01 + 1
    elements = np.empty((2 * v00.size, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([v00, v10, v11])
    elements[1::2] = np.column_stack([v00, v11, v01])

    col = np.arange(nx * ny) % nx
    dirichlet = np.flatnonzero((col == 0) | (col == nx - 1))
    return StructuredMesh(nx, ny, lx, ly, nodes, elements, dirichlet)


def barycentric(mesh: StructuredMesh, elems: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``points[k]`` with respect to ``elems[k]``."""
    p = mesh.nodes[mesh.elements[elems]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    r = points - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def locate_points(mesh: StructuredMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised point location.

    Returns ``(elements, bary)`` with ``bary`` clipped to be nonnegative and
    normalised.  Among elements containing a point (edges, vertices) the one
    with the lowest index is chosen.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    tol_x = 1e-12 * mesh.lx
    tol_y = 1e-12 * mesh.ly
    bad = ~(
        (pts[:, 0] >= -tol_x) & (pts[:, 0] <= mesh.lx + tol_x)
        & (pts[:, 1] >= -tol_y) & (pts[:, 1] <= mesh.ly + tol_y)
    )
    if np.any(bad):
        raise OutOfDomainError(f"point {pts[np.argmax(bad)].tolist()} outside the mesh extent")

    ncx, ncy = mesh.nx - 1, mesh.ny - 1
    ci = np.clip(np.floor(pts[:, 0] / mesh.hx).astype(np.int64), 0, ncx - 1)
    cj = np.clip(np.floor(pts[:, 1] / mesh.hy).astype(np.int64), 0, ncy - 1)

    n = pts.shape[0]
    best = np.full(n, np.iinfo(np.int64).max)
    best_bary = np.zeros((n, 3))
    # Candidate cells in the 3x3 neighbourhood; catches edge/vertex ties.
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            ii, jj = ci + di, cj + dj
            ok = (ii >= 0) & (ii < ncx) & (jj >= 0) & (jj < ncy)
            if not np.any(ok):
                continue
            idx = np.flatnonzero(ok)
            cell = jj[idx] * ncx + ii[idx]
            for half in (0, 1):
                elem = 2 * cell + half
                bary = barycentric(mesh, elem, pts[idx])
                inside = np.all(bary >= -_BARY_TOL, axis=1) & (elem < best[idx])
                sel = idx[inside]
                best[sel] = elem[inside]
                best_bary[sel] = bary[inside]

    if np.any(best == np.iinfo(np.int64).max):
        raise OutOfDomainError("point location failed")
    best_bary = np.clip(best_bary, 0.0, None)
    best_bary /= best_bary.sum(axis=1, keepdims=True)
    return best, best_bary


@dataclass(frozen=True)
class PointLocation:
    element: int
    bary: np.ndarray


def locate_point(mesh: StructuredMesh, p) -> PointLocation:
    elems, bary = locate_points(mesh, np.asarray(p, dtype=float).reshape(1, 2))
    return PointLocation(int(elems[0]), bary[0])


def basis_eval(mesh: StructuredMesh, loc: PointLocation) -> list[tuple[int, float]]:
    """(node, basis value) pairs of the three basis functions nonzero at ``loc``."""
    verts = mesh.elements[loc.element]
    return [(int(v), float(b)) for v, b in zip(verts, loc.bary)]


def interpolate(mesh: StructuredMesh, nodal: np.ndarray, points) -> np.ndarray:
    """Evaluate a piecewise-linear nodal field at points."""
    elems, bary = locate_points(mesh, points)
    return np.einsum("ij,ij->i", bary, np.asarray(nodal)[mesh.elements[elems]])
