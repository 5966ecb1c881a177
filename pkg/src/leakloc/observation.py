"""Laser line-of-sight observation operator.

Each beam runs from a laser to a mirror on the domain boundary.  Its row of
the observation matrix is built by cell-locator quadrature: the beam is cut
into equal segments, each segment midpoint is located in the mesh, and the
segment length is spread uniformly over the three nodes of that element.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import StructuredMesh, locate_points

EDGES = ("bottom", "top", "left", "right")


@dataclass(frozen=True)
class LaserConfig:
    sources: tuple = ((0.1, 0.1), (0.1, 0.4), (0.4, 0.1), (0.4, 0.4))
    mirrors_per_edge: int = 10
    n_seg: int = 200


@dataclass(frozen=True)
class Beam:
    origin: tuple
    target: tuple

    @property
    def length(self) -> float:
        return float(np.hypot(self.target[0] - self.origin[0], self.target[1] - self.origin[1]))


@dataclass(frozen=True)
class ObservationMatrix:
    matrix: sp.csr_matrix
    beams: list = field(repr=False)
    n_seg: int = 200

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other

    @property
    def T(self):
        return self.matrix.T


def mirror_positions(n: int, extent) -> list[tuple[float, float]]:
    """Mirror points ordered bottom, top, left, right; index i at fraction i/(n+1)."""
    lx, ly = extent
    fr = np.arange(1, n + 1) / (n + 1)
    out = []
    out += [(lx * f, 0.0) for f in fr]
    out += [(lx * f, ly) for f in fr]
    out += [(0.0, ly * f) for f in fr]
    out += [(lx, ly * f) for f in fr]
    return [(float(x), float(y)) for x, y in out]


def enumerate_beams(config: LaserConfig, extent) -> list[Beam]:
    lx, ly = extent
    if config.mirrors_per_edge < 1:
        raise ValueError("mirrors_per_edge must be >= 1")
    for s in config.sources:
        if not (0.0 < s[0] < lx and 0.0 < s[1] < ly):
            raise ValueError(f"laser source {s} is not strictly inside the domain")
    mirrors = mirror_positions(config.mirrors_per_edge, extent)
    beams = [Beam(tuple(map(float, s)), m) for s in config.sources for m in mirrors]
    if any(b.length <= 0 for b in beams):
        raise ValueError("zero-length beam")
    return beams


def assemble_observation(mesh: StructuredMesh, beams, n_seg: int = 200) -> ObservationMatrix:
    if n_seg < 1:
        raise ValueError("n_seg must be >= 1")
    nb = len(beams)
    origins = np.array([b.origin for b in beams], dtype=float).reshape(nb, 2)
    targets = np.array([b.target for b in beams], dtype=float).reshape(nb, 2)
    lengths = np.array([b.length for b in beams])

    frac = (np.arange(n_seg) + 0.5) / n_seg
    mids = origins[:, None, :] + frac[None, :, None] * (targets - origins)[:, None, :]
    elems, _ = locate_points(mesh, mids.reshape(-1, 2))

    seg = np.repeat(lengths / n_seg, n_seg)
    rows = np.repeat(np.arange(nb), 3 * n_seg)
    cols = mesh.elements[elems].ravel()
    vals = np.repeat(seg / 3.0, 3)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(nb, mesh.n_nodes)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return ObservationMatrix(mat, list(beams), n_seg)


def observe(A: ObservationMatrix, states: np.ndarray) -> np.ndarray:
    """Data matrix (beams x observation times) for nodal states (nodes x times)."""
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] != A.shape[1]:
        raise ValueError(f"state shape {states.shape} does not match {A.shape[1]} nodes")
    return np.asarray(A.matrix @ states)


def write_beam_table(path, beams) -> None:
    with open(path, "w") as fh:
        fh.write("# index origin_x origin_y target_x target_y length\n")
        for i, b in enumerate(beams):
            fh.write(
                f"{i} {b.origin[0]:.17g} {b.origin[1]:.17g} "
                f"{b.target[0]:.17g} {b.target[1]:.17g} {b.length:.17g}\n"
            )
