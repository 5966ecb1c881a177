"""Inverse problem bundle: discretisation, data, and regularisation in one place."""
from __future__ import annotations

import numpy as np

from .adjoint import (
    GradientBundle,
    ObjectiveValue,
    RegConfig,
    gradient,
    objective,
    residual,
    solve_adjoint,
)
from .assembly import OperatorSet, source_load
from .forward import PhysicalParams, SimSpec, StateTrajectory, Stepper, cfl_substeps, solve_forward
from .measure import DiracMeasure
from .mesh import StructuredMesh, locate_points
from .observation import ObservationMatrix


class InverseProblem:
    """Everything needed to evaluate the objective and its gradient.

    ``n_sub`` is fixed at construction from the initial parameters and only
    ever grows (see :meth:`ensure_stable`), so the discrete objective does
    not jump back and forth between resolutions.

    ``data_weight`` multiplies the least-squares misfit.  :meth:`normalize`
    picks it so that the measure-gradient Lipschitz bound takes a given
    value, which fixes the balance between the misfit and the regularisers.
    """

    def __init__(self, mesh: StructuredMesh, ops: OperatorSet, A: ObservationMatrix, b: np.ndarray,
                 spec: SimSpec, reg: RegConfig, k_tilde: float, c_tilde, n_sub: int | None = None,
                 data_weight: float = 1.0):
        self.mesh = mesh
        self.ops = ops
        self.A = A
        self.b = np.asarray(b, dtype=float)
        self.spec = spec
        self.reg = reg
        self.k_tilde = float(k_tilde)
        self.c_tilde = tuple(float(v) for v in c_tilde)
        if self.b.shape != (A.shape[0], spec.n_t):
            raise ValueError(f"data shape {self.b.shape} != {(A.shape[0], spec.n_t)}")
        self.data_weight = float(data_weight)
        self.n_sub = n_sub or cfl_substeps(mesh, self.initial_params, spec.dt, spec.cfl_safety)
        self._steppers: dict = {}
        self.grads = mesh.basis_gradients()

    @property
    def initial_params(self) -> PhysicalParams:
        return PhysicalParams(self.k_tilde, self.c_tilde)

    def ensure_stable(self, params: PhysicalParams) -> bool:
        """Raise ``n_sub`` if ``params`` violate the CFL bound; True if changed."""
        need = cfl_substeps(self.mesh, params, self.spec.dt, self.spec.cfl_safety)
        if need > self.n_sub:
            self.n_sub = need
            self._steppers.clear()
            return True
        return False

    def set_substeps(self, n_sub: int) -> None:
        if n_sub != self.n_sub:
            self.n_sub = n_sub
            self._steppers.clear()

    def stepper(self, params: PhysicalParams) -> Stepper:
        key = (params.k0, params.c, self.n_sub)
        st = self._steppers.get(key)
        if st is None:
            if len(self._steppers) > 8:
                self._steppers.clear()
            st = Stepper(self.mesh, self.ops, params, self.spec.dt / self.n_sub)
            self._steppers[key] = st
        return st

    def forward(self, mu: DiracMeasure, params: PhysicalParams, load=None) -> StateTrajectory:
        return solve_forward(self.mesh, self.ops, params, mu, np.zeros(self.mesh.n_nodes), self.spec,
                             n_sub=self.n_sub, stepper=self.stepper(params), load=load)

    def value(self, mu: DiracMeasure, params: PhysicalParams, traj: StateTrajectory | None = None) -> ObjectiveValue:
        if traj is None:
            traj = self.forward(mu, params)
        return objective(self.A, traj, self.b, mu, params, self.reg, self.k_tilde, self.c_tilde,
                         self.data_weight)

    def gradient(self, mu: DiracMeasure, params: PhysicalParams, traj: StateTrajectory | None = None) -> GradientBundle:
        if traj is None:
            traj = self.forward(mu, params)
        st = self.stepper(params)
        r = self.data_weight * residual(self.A, traj, self.b)
        adj = solve_adjoint(self.mesh, self.ops, params, self.A, r, self.spec, self.n_sub, stepper=st)
        return gradient(self.mesh, self.ops, params, mu, traj, adj, self.spec, stepper=st)

    # -- linear responses -------------------------------------------------

    def propagate(self, loads: np.ndarray, params: PhysicalParams) -> np.ndarray:
        """Observed data for several load vectors at once, shape (k, beams, n_t)."""
        loads = np.atleast_2d(np.asarray(loads, dtype=float).T).T
        st = self.stepper(params)
        Q = st.load_scale[:, None] * loads
        U = np.zeros_like(Q)
        out = np.empty((loads.shape[1], self.A.shape[0], self.spec.n_t))
        Am = self.A.matrix
        for i in range(self.spec.n_t):
            out[:, :, i] = (Am @ U).T
            for _ in range(self.n_sub):
                U = st.B @ U + Q
        return out

    def spike_responses(self, locations, params: PhysicalParams) -> np.ndarray:
        """Data produced by unit-rate spikes at each location."""
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        if locations.shape[0] == 0:
            return np.zeros((0, self.A.shape[0], self.spec.n_t))
        loads = np.column_stack([
            source_load(self.mesh, DiracMeasure(p[None], [1.0])) for p in locations
        ])
        return self.propagate(loads, params)

    def normalize(self, lipschitz: float = 4.0, params: PhysicalParams | None = None) -> float:
        """Set ``data_weight`` so :meth:`lipschitz_measure` equals ``lipschitz``."""
        params = params or self.initial_params
        self.data_weight = 1.0
        self.data_weight = lipschitz / self.lipschitz_measure(params)
        return self.data_weight

    def lipschitz_measure(self, params: PhysicalParams, chunk: int = 256) -> float:
        """``w max_m |G e_m|^2`` over interior vertices, ``G`` the data map.

        Bounds ``w sup_{xi, xi'} <G phi(xi), G phi(xi')>`` since every
        ``phi(xi)`` is a convex combination of vertex indicators.
        """
        n = self.mesh.n_nodes
        interior = np.setdiff1d(np.arange(n), self.mesh.dirichlet_nodes)
        best = 0.0
        for start in range(0, interior.size, chunk):
            idx = interior[start:start + chunk]
            loads = np.zeros((n, idx.size))
            loads[idx, np.arange(idx.size)] = 1.0
            data = self.propagate(loads, params)
            best = max(best, float((data**2).sum(axis=(1, 2)).max()))
        return self.data_weight * best

    def parameter_jacobian(self, traj: StateTrajectory, params: PhysicalParams) -> np.ndarray:
        """Exact derivative of the observed data w.r.t. ``(k0, c1, c2)``.

        Tangent-linear sweep of the discrete scheme; shape (beams * n_t, 3).
        """
        st = self.stepper(params)
        n_sub = traj.n_sub
        ops = self.ops
        D = np.zeros((self.mesh.n_nodes, 3))
        cols = np.empty((3, self.A.shape[0], self.spec.n_t))
        Am = self.A.matrix
        for s in range(self.spec.n_t * n_sub):
            if s % n_sub == 0:
                cols[:, :, s // n_sub] = (Am @ D).T
            u = traj.fine[:, s]
            forcing = -np.column_stack([ops.K1 @ u, ops.C1 @ u, ops.C2 @ u]) * st.load_scale[:, None]
            D = st.B @ D + forcing
        return cols.reshape(3, -1).T

    def lipschitz_kc(self, traj: StateTrajectory, params: PhysicalParams) -> float:
        """Gauss-Newton curvature ``lambda_max(J^T J)`` in ``(k0, c)``."""
        J = self.parameter_jacobian(traj, params)
        return self.data_weight * float(np.linalg.eigvalsh(J.T @ J)[-1])

    def locate(self, points):
        return locate_points(self.mesh, points)
