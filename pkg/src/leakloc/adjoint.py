"""Data misfit, its discrete adjoint, and the reduced gradient.

For sub-step states ``u_0..u_S`` with ``u_{s+1} = B u_s + dt P Ml^{-1} f``
and misfit ``1/2 sum_i |A u_{i n_sub} - b_i|^2`` over the observation times,
the adjoint ``lam_s`` (derivative of the misfit w.r.t. ``u_s``) satisfies

    lam_S = 0,   lam_s = B^T lam_{s+1} + A^T r_i  (injection when s = i n_sub).

Everything below is the exact derivative of that discrete misfit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import OperatorSet
from .forward import InstabilityError, PhysicalParams, SimSpec, StateTrajectory, Stepper, K_BOX, C_BOX
from .measure import DiracMeasure
from .mesh import StructuredMesh, barycentric, locate_points
from .observation import ObservationMatrix, observe


@dataclass(frozen=True)
class RegConfig:
    alpha: float = 1.5e-6
    k_weight: float = 3.0
    c_weight: float = 0.0005
    k_box: tuple = K_BOX
    c_box: tuple = C_BOX


@dataclass(frozen=True)
class ObjectiveValue:
    data_misfit: float
    radon: float
    k_penalty: float
    c_penalty: float
    feasible: bool = True

    @property
    def total(self) -> float:
        if not self.feasible:
            return float("inf")
        return self.data_misfit + self.radon + self.k_penalty + self.c_penalty


def residual(A: ObservationMatrix, traj: StateTrajectory, b: np.ndarray) -> np.ndarray:
    return observe(A, traj.observed) - b


def data_misfit(A: ObservationMatrix, traj: StateTrajectory, b: np.ndarray, weight: float = 1.0) -> float:
    r = residual(A, traj, b)
    return 0.5 * weight * float(np.vdot(r, r))


def objective(A, traj, b, mu: DiracMeasure, params: PhysicalParams, reg: RegConfig,
              k_tilde: float, c_tilde, data_weight: float = 1.0) -> ObjectiveValue:
    """``w/2 |A u - b|^2 + alpha |mu| + w_k/2 (k - k~)^2 + sum w_c/2 (c_i - c~_i)^2``.

    ``data_weight`` (``w``) defaults to 1, the plain least-squares misfit.
    """
    feasible = (
        bool(np.all(mu.rates >= 0))
        and reg.k_box[0] <= params.k0 <= reg.k_box[1]
        and all(reg.c_box[0] <= ci <= reg.c_box[1] for ci in params.c)
    )
    dc = np.asarray(params.c) - np.asarray(c_tilde)
    return ObjectiveValue(
        data_misfit=data_misfit(A, traj, b, data_weight),
        radon=reg.alpha * mu.radon_norm,
        k_penalty=0.5 * reg.k_weight * (params.k0 - k_tilde) ** 2,
        c_penalty=0.5 * reg.c_weight * float(dc @ dc),
        feasible=feasible,
    )


@dataclass
class AdjointTrajectory:
    fine: np.ndarray = field(repr=False)
    n_sub: int = 1


def solve_adjoint(mesh: StructuredMesh, ops: OperatorSet, params: PhysicalParams, A: ObservationMatrix,
                  resid: np.ndarray, spec: SimSpec, n_sub: int, stepper: Stepper | None = None) -> AdjointTrajectory:
    """Backward sweep with the transposed sub-step operator.

    ``resid`` is the (beams x n_t) residual at the observation times.
    """
    if stepper is None:
        stepper = Stepper(mesh, ops, params, spec.dt / n_sub)
    inject = backproject(A, resid)
    n_steps = spec.n_t * n_sub
    lam = np.zeros((mesh.n_nodes, n_steps + 1))
    cur = np.zeros(mesh.n_nodes)
    BT = stepper.BT
    for s in range(n_steps - 1, -1, -1):
        cur = BT @ cur
        if s % n_sub == 0:
            cur = cur + inject[:, s // n_sub]
        lam[:, s] = cur
    if not np.all(np.isfinite(cur)):
        raise InstabilityError("non-finite adjoint")
    return AdjointTrajectory(lam, n_sub)


def backproject(A: ObservationMatrix, resid: np.ndarray) -> np.ndarray:
    """``A^T r_i`` for every observation time, shape (nodes x n_t)."""
    return np.asarray(A.matrix.T @ resid)


@dataclass
class GradientBundle:
    v_field: np.ndarray
    g_k: float
    g_c: np.ndarray
    v_at_spikes: np.ndarray
    grad_v_at_spikes: np.ndarray


def dual_field(stepper: Stepper, adj: AdjointTrajectory) -> np.ndarray:
    """Nodal ``v`` with ``v(xi) = d misfit / d beta`` for a spike at ``xi``."""
    return stepper.load_scale * adj.fine[:, 1:].sum(axis=1)


def element_gradients(mesh: StructuredMesh, nodal: np.ndarray, grads=None) -> np.ndarray:
    """Constant gradient of a P1 field on every element, shape (ne, 2)."""
    if grads is None:
        grads = mesh.basis_gradients()
    return np.einsum("ead,ea->ed", grads, nodal[mesh.elements])


def field_gradient_at(mesh: StructuredMesh, nodal: np.ndarray, points, grads=None) -> np.ndarray:
    """Gradient of a P1 field at points.

    Inside an element this is the element gradient.  On an edge or vertex
    it is the mean over all elements touching the point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((pts.shape[0], 2))
    if pts.shape[0] == 0:
        return out
    eg = element_gradients(mesh, nodal, grads)
    elems, bary = locate_points(mesh, pts)
    for k in range(pts.shape[0]):
        if np.all(bary[k] > 1e-12):
            out[k] = eg[elems[k]]
            continue
        touching = _touching_elements(mesh, pts[k])
        out[k] = eg[touching].mean(axis=0)
    return out


def _touching_elements(mesh: StructuredMesh, p) -> np.ndarray:
    ncx, ncy = mesh.nx - 1, mesh.ny - 1
    ci = min(max(int(np.floor(p[0] / mesh.hx)), 0), ncx - 1)
    cj = min(max(int(np.floor(p[1] / mesh.hy)), 0), ncy - 1)
    cand = []
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            i, j = ci + di, cj + dj
            if 0 <= i < ncx and 0 <= j < ncy:
                cell = j * ncx + i
                cand += [2 * cell, 2 * cell + 1]
    cand = np.array(cand)
    bary = barycentric(mesh, cand, np.repeat(np.asarray(p, float)[None], cand.size, axis=0))
    return cand[np.all(bary >= -1e-12, axis=1)]


def gradient(mesh: StructuredMesh, ops: OperatorSet, params: PhysicalParams, mu: DiracMeasure,
             traj: StateTrajectory, adj: AdjointTrajectory, spec: SimSpec,
             stepper: Stepper | None = None) -> GradientBundle:
    n_sub = traj.n_sub
    if stepper is None:
        stepper = Stepper(mesh, ops, params, spec.dt / n_sub)
    v = dual_field(stepper, adj)

    # d u_{s+1} / d k = -dt P Ml^{-1} K1 u_s, paired with lam_{s+1}
    W = adj.fine[:, 1:] * stepper.load_scale[:, None]
    U = traj.fine[:, :-1]
    g_k = -float(np.vdot(W, ops.K1 @ U))
    g_c = -np.array([float(np.vdot(W, ops.C1 @ U)), float(np.vdot(W, ops.C2 @ U))])

    if len(mu):
        elems, bary = locate_points(mesh, mu.locations)
        v_at = np.einsum("ij,ij->i", bary, v[mesh.elements[elems]])
        grad_at = field_gradient_at(mesh, v, mu.locations)
    else:
        v_at = np.zeros(0)
        grad_at = np.zeros((0, 2))
    return GradientBundle(v, g_k, g_c, v_at, grad_at)
