"""Consistency checks for the discrete forward/adjoint pair and the gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import dual_field, solve_adjoint
from .forward import PhysicalParams
from .measure import DiracMeasure
from .mesh import locate_points
from .problem import InverseProblem


def dot_test(problem: InverseProblem, params: PhysicalParams, trials: int = 10, seed: int = 0) -> list[float]:
    """Relative gaps ``|<G f, y> - <f, G^T y>| / (|G f||y| + |f||G^T y|)``.

    ``G`` maps a nodal load vector to observed data, ``G^T`` is the
    backward sweep followed by the time sum that yields the dual field.
    """
    rng = np.random.default_rng(seed)
    st = problem.stepper(params)
    out = []
    for _ in range(trials):
        f = rng.standard_normal(problem.mesh.n_nodes)
        y = rng.standard_normal((problem.A.shape[0], problem.spec.n_t))
        Gf = problem.propagate(f[:, None], params)[0]
        adj = solve_adjoint(problem.mesh, problem.ops, params, problem.A, y, problem.spec, problem.n_sub, stepper=st)
        Gty = dual_field(st, adj)
        lhs, rhs = float(np.vdot(Gf, y)), float(np.vdot(f, Gty))
        scale = np.linalg.norm(Gf) * np.linalg.norm(y) + np.linalg.norm(f) * np.linalg.norm(Gty)
        out.append(abs(lhs - rhs) / scale)
    return out


def central_diff(fun, x: float, h: float) -> float:
    """Fourth-order central difference."""
    return (-fun(x + 2 * h) + 8 * fun(x + h) - 8 * fun(x - h) + fun(x - 2 * h)) / (12 * h)


@dataclass
class GradientCheck:
    g_k: float
    g_c: np.ndarray
    rates: np.ndarray
    locations: np.ndarray

    @property
    def worst_exact(self) -> float:
        """Largest error among the k, c and rate derivatives."""
        return float(max(self.g_k, *self.g_c, *self.rates))

    @property
    def worst_location(self) -> float:
        return float(self.locations.max()) if self.locations.size else 0.0


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def interior_points(problem: InverseProblem, m: int, rng, margin: float = 0.05) -> np.ndarray:
    """Random points whose barycentric coordinates all exceed ``margin``."""
    lx, ly = problem.mesh.lx, problem.mesh.ly
    pts = []
    while len(pts) < m:
        p = rng.uniform((0.1 * lx, 0.1 * ly), (0.9 * lx, 0.9 * ly))
        _, bary = locate_points(problem.mesh, p[None])
        if bary.min() > margin:
            pts.append(p)
    return np.array(pts)


def random_state(problem: InverseProblem, m: int = 3, seed: int = 0):
    """Feasible ``(mu, params)`` near the measured parameters."""
    rng = np.random.default_rng(seed)
    locs = interior_points(problem, m, rng)
    rates = rng.uniform(0.02, 0.08, m)
    k0 = problem.k_tilde * rng.uniform(0.9, 1.1)
    c = np.asarray(problem.c_tilde) + rng.uniform(-0.1, 0.1, 2)
    return DiracMeasure(locs, rates), PhysicalParams(k0, np.clip(c, -1, 1))


def gradient_check(problem: InverseProblem, mu: DiracMeasure, params: PhysicalParams,
                   h: float = 1e-5, h_rate: float = 1e-6, seed: int = 0) -> GradientCheck:
    """Adjoint gradient of the data misfit against finite differences.

    Location derivatives use a random direction and a step far below the
    distance to the nearest element edge, so the stencil stays inside
    one element.
    """
    rng = np.random.default_rng(seed)
    g = problem.gradient(mu, params)

    def misfit(m, p):
        return problem.value(m, p).data_misfit

    err_k = _rel(g.g_k, central_diff(lambda k: misfit(mu, PhysicalParams(k, params.c)), params.k0, h))
    err_c = []
    for d in range(2):
        def fc(v, d=d):
            c = list(params.c)
            c[d] = v
            return misfit(mu, PhysicalParams(params.k0, c))
        err_c.append(_rel(g.g_c[d], central_diff(fc, params.c[d], h)))

    err_r, err_x = [], []
    hl = 1e-4 * problem.mesh.h
    for i in range(len(mu)):
        def fr(v, i=i):
            r = mu.rates.copy()
            r[i] = v
            return misfit(DiracMeasure(mu.locations, r), params)
        err_r.append(_rel(g.v_at_spikes[i], central_diff(fr, mu.rates[i], h_rate)))

        ang = rng.uniform(0, 2 * np.pi)
        dirn = np.array([np.cos(ang), np.sin(ang)])

        def fx(s, i=i):
            locs = mu.locations.copy()
            locs[i] = locs[i] + s * dirn
            return misfit(DiracMeasure(locs, mu.rates), params)
        fd = central_diff(fx, 0.0, hl)
        err_x.append(_rel(mu.rates[i] * g.grad_v_at_spikes[i] @ dirn, fd))
    return GradientCheck(err_k, np.array(err_c), np.array(err_r), np.array(err_x))
