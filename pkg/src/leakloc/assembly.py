"""Exact P1 finite element operators for the convection-diffusion form.

All matrices follow the convention ``A[r, m] = form(phi_m, phi_r)``: rows
index test functions, columns index trial functions, so ``K @ u`` evaluates
the bilinear form against every test function.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .measure import DiracMeasure
from .mesh import StructuredMesh, locate_points


@dataclass(frozen=True)
class OperatorSet:
    M: sp.csr_matrix
    M_lump: np.ndarray
    K1: sp.csr_matrix
    C1: sp.csr_matrix
    C2: sp.csr_matrix
    M_bnd: sp.csr_matrix

    def stiffness(self, k0: float, c) -> sp.csr_matrix:
        """``K(x) = k0 K1 + c1 C1 + c2 C2``."""
        return (k0 * self.K1 + c[0] * self.C1 + c[1] * self.C2).tocsr()


def _csr(rows, cols, vals, n) -> sp.csr_matrix:
    mat = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def assemble_operators(mesh: StructuredMesh) -> OperatorSet:
    elems = mesh.elements
    area = mesh.element_areas()
    grads = mesh.basis_gradients()
    n = mesh.n_nodes

    rows = np.repeat(elems, 3, axis=1)  # r = test
    cols = np.tile(elems, (1, 3))       # m = trial

    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass = area[:, None, None] * local_mass[None]
    stiff = area[:, None, None] * np.einsum("erd,emd->erm", grads, grads)
    # int (d_d phi_m) phi_r = grad_d(phi_m) * |T| / 3, independent of r
    conv1 = np.broadcast_to((area / 3.0)[:, None, None] * grads[:, None, :, 0], (len(area), 3, 3))
    conv2 = np.broadcast_to((area / 3.0)[:, None, None] * grads[:, None, :, 1], (len(area), 3, 3))

    M = _csr(rows, cols, mass, n)
    K1 = _csr(rows, cols, stiff, n)
    C1 = _csr(rows, cols, conv1, n)
    C2 = _csr(rows, cols, conv2, n)
    M_lump = np.asarray(M.sum(axis=1)).ravel()
    return OperatorSet(M, M_lump, K1, C1, C2, _boundary_mass(mesh))


def _boundary_mass(mesh: StructuredMesh) -> sp.csr_matrix:
    """1-D P1 mass matrix on the Dirichlet edges x = 0 and x = Lx."""
    nx, ny, hy = mesh.nx, mesh.ny, mesh.hy
    rows, cols, vals = [], [], []
    for col in (0, nx - 1):
        ids = np.arange(ny) * nx + col
        a, b = ids[:-1], ids[1:]
        for r, m, w in ((a, a, 2.0), (b, b, 2.0), (a, b, 1.0), (b, a, 1.0)):
            rows.append(r)
            cols.append(m)
            vals.append(np.full(r.size, w * hy / 6.0))
    return _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), mesh.n_nodes)


def source_load(mesh: StructuredMesh, mu: DiracMeasure) -> np.ndarray:
    """Load vector ``f_r = sum_i beta_i phi_r(xi_i)`` of a Dirac measure."""
    f = np.zeros(mesh.n_nodes)
    if len(mu) == 0:
        return f
    elems, bary = locate_points(mesh, mu.locations)
    np.add.at(f, mesh.elements[elems].ravel(), (bary * mu.rates[:, None]).ravel())
    return f


def boundary_load(ops: OperatorSet, g: np.ndarray) -> np.ndarray:
    """Contribution ``M_bnd g`` of nodal boundary data to the load."""
    return ops.M_bnd @ g


def apply_dirichlet(op, nodes, value: float = 0.0):
    """Impose Dirichlet conditions on a matrix (identity rows) or a vector."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if sp.issparse(op):
        mat = sp.csr_matrix(op, copy=True)
        if nodes.size == 0:
            return mat
        keep = np.ones(mat.shape[0])
        keep[nodes] = 0.0
        mat = sp.diags(keep) @ mat
        ident = np.zeros(mat.shape[0])
        ident[nodes] = 1.0
        mat = (mat + sp.diags(ident)).tocsr()
        mat.eliminate_zeros()
        mat.sort_indices()
        return mat
    vec = np.array(op, dtype=float, copy=True)
    vec[nodes] = value
    return vec
