"""Explicit Euler time stepping of the discrete convection-diffusion system.

One sub-step reads

    u <- P (u + dt * M_lump^{-1} (f - K(x) u))

where ``P`` zeroes the Dirichlet nodes.  Written as ``u <- B u + q`` with
``B = P (I - dt M_lump^{-1} K)`` and ``q = dt P M_lump^{-1} f``, which is the
form the adjoint sweep transposes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import OperatorSet, source_load
from .measure import DiracMeasure
from .mesh import StructuredMesh
from .observation import ObservationMatrix, assemble_observation, observe

log = logging.getLogger(__name__)

K_BOX = (0.001, 1.0)
C_BOX = (-1.0, 1.0)


class InstabilityError(FloatingPointError):
    """The explicit scheme produced non-finite values."""


@dataclass(frozen=True)
class PhysicalParams:
    k0: float
    c: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "k0", float(self.k0))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))

    def is_feasible(self) -> bool:
        return K_BOX[0] <= self.k0 <= K_BOX[1] and all(C_BOX[0] <= ci <= C_BOX[1] for ci in self.c)

    def as_array(self) -> np.ndarray:
        return np.array([self.k0, *self.c])


@dataclass(frozen=True)
class SimSpec:
    T: float = 1.0
    n_t: int = 50
    cfl_safety: float = 0.25

    @property
    def dt(self) -> float:
        """Coarse (observation) step."""
        return self.T / self.n_t


@dataclass
class StateTrajectory:
    """States at coarse times ``t_0..t_{n_t}`` plus every sub-step state."""

    coarse: np.ndarray
    fine: np.ndarray = field(repr=False)
    n_sub: int = 1

    @property
    def observed(self) -> np.ndarray:
        """States at the observation times ``t_0..t_{n_t - 1}``."""
        return self.coarse[:, :-1]


def cfl_substeps(mesh: StructuredMesh, params: PhysicalParams, dt: float, safety: float = 0.25) -> int:
    """Smallest ``n_sub`` with ``dt / n_sub <= safety * min(h^2 / k0, h / |c|_inf)``.

    With lumped P1 elements on this mesh the diffusive stability limit is
    ``h^2 / (4 k0)``, so ``safety = 0.25`` sits exactly on it.
    """
    if dt <= 0 or not (0 < safety <= 1):
        raise ValueError("need dt > 0 and safety in (0, 1]")
    h = mesh.h
    bound = h * h / params.k0 if params.k0 > 0 else np.inf
    bound = min(bound, h / (max(abs(c) for c in params.c) + 1e-12))
    bound *= safety
    return max(1, int(np.ceil(dt / bound - 1e-12)))


class Stepper:
    """Sub-step operators for fixed parameters and sub-step length."""

    def __init__(self, mesh: StructuredMesh, ops: OperatorSet, params: PhysicalParams, dt_sub: float):
        self.dt_sub = dt_sub
        keep = np.ones(mesh.n_nodes)
        keep[mesh.dirichlet_nodes] = 0.0
        self.keep = keep
        # dt P M_lump^{-1}, diagonal
        self.load_scale = dt_sub * keep / ops.M_lump
        K = ops.stiffness(params.k0, params.c)
        n = mesh.n_nodes
        self.B = (sp.diags(keep) @ (sp.identity(n, format="csr") - sp.diags(dt_sub / ops.M_lump) @ K)).tocsr()
        self.BT = self.B.T.tocsr()


def solve_forward(
    mesh: StructuredMesh,
    ops: OperatorSet,
    params: PhysicalParams,
    mu: DiracMeasure,
    u0,
    spec: SimSpec,
    n_sub: int | None = None,
    stepper: Stepper | None = None,
    load: np.ndarray | None = None,
) -> StateTrajectory:
    if n_sub is None:
        n_sub = cfl_substeps(mesh, params, spec.dt, spec.cfl_safety)
    if stepper is None:
        stepper = Stepper(mesh, ops, params, spec.dt / n_sub)
    f = source_load(mesh, mu) if load is None else load
    q = stepper.load_scale * f
    B = stepper.B

    n_steps = spec.n_t * n_sub
    fine = np.empty((mesh.n_nodes, n_steps + 1))
    u = np.array(u0, dtype=float).reshape(mesh.n_nodes)
    fine[:, 0] = u
    for s in range(n_steps):
        u = B @ u + q
        fine[:, s + 1] = u
    if not np.all(np.isfinite(u)):
        raise InstabilityError(f"non-finite state with n_sub={n_sub}; increase sub-steps")
    return StateTrajectory(fine[:, ::n_sub].copy(), fine, n_sub)


def min_value(traj: StateTrajectory) -> float:
    """Smallest state value; negative values flag a positivity violation."""
    return float(traj.fine.min())


@dataclass(frozen=True)
class NoiseSpec:
    data: float = 0.01
    k: float = 0.02
    c: float = 0.2


def simulate_data(
    mesh: StructuredMesh,
    ops: OperatorSet,
    A: ObservationMatrix,
    true_params: PhysicalParams,
    true_mu: DiracMeasure,
    spec: SimSpec,
    noise: NoiseSpec = NoiseSpec(),
    rng_seed: int = 0,
    mitigate_inverse_crime: bool = True,
):
    """Synthetic measurements and noisy parameter readings.

    Returns ``(b, k_tilde, c_tilde, trajectory)``.  With
    ``mitigate_inverse_crime`` the truth is computed with twice the CFL
    sub-steps and twice the beam segments used for reconstruction.
    """
    n_sub = cfl_substeps(mesh, true_params, spec.dt, spec.cfl_safety)
    A_true = A
    if mitigate_inverse_crime:
        n_sub *= 2
        A_true = assemble_observation(mesh, A.beams, 2 * A.n_seg)
    traj = solve_forward(mesh, ops, true_params, true_mu, np.zeros(mesh.n_nodes), spec, n_sub=n_sub)
    clean = observe(A_true, traj.observed)
    m = traj.fine.min()
    if m < -1e-10:
        log.warning("truth trajectory has negative values (min %.3e)", m)

    rng = np.random.default_rng(rng_seed)
    rms = float(np.sqrt(np.mean(clean**2)))
    b = clean + noise.data * rms * rng.standard_normal(clean.shape)
    k_t = true_params.k0 * (1.0 + noise.k * rng.standard_normal())
    k_t = float(np.clip(k_t, *K_BOX))
    c_t = np.asarray(true_params.c) * (1.0 + noise.c * rng.standard_normal(2))
    c_t = tuple(float(v) for v in np.clip(c_t, *C_BOX))
    return b, k_t, c_t, traj


def write_snapshot(path, mesh: StructuredMesh, values, t: float) -> None:
    """Plain-text grid: header ``nx ny Lx Ly t`` then row-major nodal values."""
    vals = np.asarray(values, dtype=float).reshape(mesh.ny, mesh.nx)
    with open(path, "w") as fh:
        fh.write(f"{mesh.nx} {mesh.ny} {mesh.lx:.17g} {mesh.ly:.17g} {t:.17g}\n")
        for row in vals:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns ``(header dict, values)``."""
    with open(path) as fh:
        head = fh.readline().split()
        vals = np.loadtxt(fh, ndmin=2)
    header = {"nx": int(head[0]), "ny": int(head[1]), "lx": float(head[2]), "ly": float(head[3]), "t": float(head[4])}
    return header, vals.ravel()
