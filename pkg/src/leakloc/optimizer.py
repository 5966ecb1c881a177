"""Forward-backward and sliding forward-backward methods on Dirac measures.

Each outer iteration linearises the data misfit in the measure, inserts the
global minimiser of the dual field ``v`` as a candidate spike, re-optimises
all spike rates under a Radon-norm-squared proximal penalty, and takes a
proximal gradient step on the scalar diffusion and convection parameters.
The sliding variant first moves the spikes down the gradient of ``v``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import GradientBundle, RegConfig
from .forward import PhysicalParams
from .measure import DiracMeasure
from .mesh import StructuredMesh
from .problem import InverseProblem

log = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    """Non-finite objective or other unrecoverable solver failure."""


@dataclass(frozen=True)
class OptConfig:
    """Step sizes and schedules.

    ``tau`` defaults to ``tau_factor / lipschitz``; ``lipschitz=None``
    computes the bound from the problem instead.  ``sigma`` defaults to
    ``tau``, capped by ``sigma_factor`` over the Gauss-Newton curvature in
    ``(k, c)`` when ``sigma_safeguard`` is set.  The cap is refreshed every
    ``sigma_period`` iterations and whenever the support size changes or
    the total mass grows by half since the last refresh.  A step whose
    ``(k, c)`` move raises the objective is redone with the old parameters
    and ``sigma`` is halved for the rest of the run.
    """

    tau: float | None = None
    lipschitz: float | None = 4.0
    tau_factor: float = 0.99
    sigma: float | None = None
    sigma_factor: float = 0.99
    sigma_period: int = 10
    sigma_safeguard: bool = True
    theta: float = 4.0
    eps0: float = 1e-6
    merge_radius: float = 0.1
    merge_period: int = 10
    merge_tol_factor: float = 1e-3
    merge_tol_decay: float = 0.9
    max_outer: int = 5000
    slide_shrink: float = 0.5
    slide_max_tries: int = 5
    weight_floor: float = 1e-3
    inner_max_sweeps: int = 10_000
    fix_kc: bool = False

    def eps(self, n: int) -> float:
        """Summable inexactness tolerance for iteration ``n``."""
        return self.eps0 / (n + 1) ** 2


@dataclass
class State:
    mu: DiracMeasure
    params: PhysicalParams


@dataclass
class IterationRecord:
    iter: int
    value: float
    cpu_time: float
    n_spikes: int
    inner_iters: int
    k0: float
    c1: float
    c2: float
    slide: bool = False
    merged: bool = False

    FIELDS = ("iter", "value", "cpu_time", "n_spikes", "inner_iters", "k0", "c1", "c2", "slide", "merged")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


# -- insertion ---------------------------------------------------------------

def insert_candidate(v_field: np.ndarray, mesh: StructuredMesh):
    """Global minimiser of the P1 field ``v``: its smallest nodal value."""
    idx = int(np.argmin(v_field))
    return mesh.nodes[idx].copy(), float(v_field[idx])


# -- finite-dimensional rate problem -----------------------------------------

def surrogate_value(rates, v_values, prev_rates, alpha, tau) -> float:
    d = np.asarray(rates) - np.asarray(prev_rates)
    return float(np.dot(v_values, d) + alpha * np.sum(rates) + np.abs(d).sum() ** 2 / (2 * tau))


def support_residual(rates, v_values, prev_rates, alpha, tau) -> float:
    """Violation of the optimality conditions of the rate problem."""
    rates = np.asarray(rates, dtype=float)
    prev = np.asarray(prev_rates, dtype=float)
    a = np.asarray(v_values, dtype=float) + alpha
    d = rates - prev
    rt = np.abs(d).sum() / tau
    res = 0.0
    for ai, bi, di in zip(a, rates, d):
        if bi > 0:
            if di > 0:
                viol = abs(ai + rt)
            elif di < 0:
                viol = abs(ai - rt)
            else:
                viol = max(0.0, abs(ai) - rt)
        elif di < 0:
            viol = max(0.0, rt - ai)
        else:
            viol = max(0.0, -(ai + rt))
        res = max(res, viol)
    return res


def optimality_certificate(v_field, support_v, rates, prev_rates, alpha, tau) -> float:
    """Residual of the inexact optimality conditions of the measure step.

    Combines the support conditions with ``v + alpha + r / tau >= 0`` at
    every mesh node (no profitable new mass anywhere), where ``r`` is the
    Radon norm of the rate change.
    """
    rt = np.abs(np.asarray(rates) - np.asarray(prev_rates)).sum() / tau
    res = support_residual(rates, support_v, prev_rates, alpha, tau)
    if v_field is not None and len(v_field):
        res = max(res, max(0.0, -(float(np.min(v_field)) + alpha + rt)))
    return res


@dataclass
class InnerResult:
    rates: np.ndarray
    sweeps: int
    residual: float
    converged: bool
    values: list = field(default_factory=list, repr=False)


def greedy_rate_solve(v_values, prev_rates, alpha: float, tau: float) -> np.ndarray:
    """Exact minimiser of the rate surrogate.

    For a budget ``r = sum |b_i - b_i^n|`` the best linear gain comes from
    filling unit moves in order of cost: raising the rate with the smallest
    ``v_i + alpha`` (unbounded), or lowering rate ``i`` at cost
    ``-(v_i + alpha)`` (capacity ``b_i^n``).  Moves are filled while their
    cost plus ``r / tau`` stays negative.  Ties go to the lowest index.
    """
    a = np.asarray(v_values, dtype=float) + alpha
    prev = np.asarray(prev_rates, dtype=float)
    beta = prev.copy()
    if a.size == 0:
        return beta
    inc = int(np.argmin(a))
    moves = [(float(a[inc]), inc, np.inf, 1.0)]
    moves += [(float(-a[i]), i, float(prev[i]), -1.0) for i in range(a.size) if prev[i] > 0]
    moves.sort(key=lambda mv: (mv[0], mv[1]))
    r = 0.0
    for cost, i, cap, sign in moves:
        if cost + r / tau >= 0:
            break
        amount = min(cap, -tau * cost - r)
        beta[i] += sign * amount
        r += amount
    return np.maximum(beta, 0.0)


def inner_weight_solve(v_values, prev_rates, alpha: float, tau: float, eps: float,
                       max_sweeps: int = 10_000, track: bool = False,
                       patience: int = 50) -> InnerResult:
    """Cyclic coordinate descent on the rate surrogate

        sum_i v_i (b_i - b_i^n) + alpha sum_i b_i + (sum_i |b_i - b_i^n|)^2 / (2 tau),  b >= 0.

    Each coordinate update is the exact minimiser of a convex piecewise
    quadratic in one variable.  Shifting mass between two spikes with almost
    equal ``v`` needs a joint move, which coordinate descent makes only in
    tiny increments; after ``patience`` sweeps without meeting ``eps`` the
    exact :func:`greedy_rate_solve` finishes the job if it is better.
    """
    v = [float(x) for x in v_values]
    prev = [float(x) for x in prev_rates]
    m = len(v)
    beta = list(prev)
    d = [0.0] * m
    total = 0.0
    values = [surrogate_value(beta, v, prev, alpha, tau)] if track else []
    sweeps = 0
    res = support_residual(beta, v, prev, alpha, tau)
    while res > eps and sweeps < max_sweeps:
        if sweeps >= patience:
            exact = greedy_rate_solve(v, prev, alpha, tau)
            if surrogate_value(exact, v, prev, alpha, tau) <= surrogate_value(beta, v, prev, alpha, tau):
                beta = list(exact)
                res = support_residual(beta, v, prev, alpha, tau)
                if track:
                    values.append(surrogate_value(beta, v, prev, alpha, tau))
            break
        sweeps += 1
        changed = False
        for i in range(m):
            rest = total - abs(d[i])
            a = v[i] + alpha
            if -tau * a > rest:
                nd = -tau * a - rest
            elif tau * a > rest:
                nd = -min(tau * a - rest, prev[i])
            else:
                nd = 0.0
            if abs(nd - d[i]) > 1e-15 * (abs(d[i]) + abs(prev[i]) + 1e-300):
                changed = True
                d[i] = nd
                beta[i] = max(prev[i] + nd, 0.0)
                total = rest + abs(nd)
        # re-sum to keep rounding from drifting
        total = math.fsum(abs(x) for x in d)
        if track:
            values.append(surrogate_value(beta, v, prev, alpha, tau))
        res = support_residual(beta, v, prev, alpha, tau)
        if not changed:
            break
    converged = res <= eps
    if not converged and sweeps >= max_sweeps:
        log.warning("rate solve hit the sweep cap (%d), residual %.3e", max_sweeps, res)
    return InnerResult(np.array(beta), sweeps, res, converged, values)


# -- parameter prox ----------------------------------------------------------

def prox_kc(params: PhysicalParams, g_k: float, g_c, sigma: float, reg: RegConfig,
            k_tilde: float, c_tilde) -> PhysicalParams:
    """Closed-form prox of the quadratic-plus-box regulariser after a gradient step."""
    wk, wc = reg.k_weight, reg.c_weight
    k_temp = params.k0 - sigma * g_k
    k_new = (k_temp + wk * sigma * k_tilde) / (1.0 + wk * sigma)
    k_new = min(max(k_new, reg.k_box[0]), reg.k_box[1])
    c_new = []
    for ci, gi, ti in zip(params.c, g_c, c_tilde):
        ct = ci - sigma * gi
        cn = (ct + wc * sigma * ti) / (1.0 + wc * sigma)
        c_new.append(min(max(cn, reg.c_box[0]), reg.c_box[1]))
    return PhysicalParams(k_new, tuple(c_new))


# -- steps -------------------------------------------------------------------

@dataclass
class StepInfo:
    inner_iters: int = 0
    inner_residual: float = 0.0
    slide: bool = False


def fb_step(problem: InverseProblem, state: State, grads: GradientBundle, cfg: OptConfig,
            n: int, tau: float, sigma: float) -> tuple[State, StepInfo]:
    """One forward-backward step from ``state`` with gradients taken there."""
    mesh = problem.mesh
    reg = problem.reg
    mu = state.mu
    locs = mu.locations
    v_sup = grads.v_at_spikes
    prev = mu.rates

    cand, v_cand = insert_candidate(grads.v_field, mesh)
    dup = np.flatnonzero(np.all(locs == cand, axis=1)) if len(mu) else np.zeros(0, dtype=int)
    if dup.size == 0:
        locs = np.vstack([locs, cand[None]])
        v_sup = np.append(v_sup, v_cand)
        prev = np.append(prev, 0.0)

    res = inner_weight_solve(v_sup, prev, reg.alpha, tau, cfg.eps(n), cfg.inner_max_sweeps)
    new_mu = DiracMeasure(locs, res.rates).drop_zeros()

    if cfg.fix_kc:
        params = state.params
    else:
        params = prox_kc(state.params, grads.g_k, grads.g_c, sigma, reg, problem.k_tilde, problem.c_tilde)
    return State(new_mu, params), StepInfo(res.sweeps, res.residual)


def slide(mu: DiracMeasure, grad_v_at: np.ndarray, theta: float, tau: float, extent,
          scale: float = 1.0) -> DiracMeasure:
    """Move every spike by ``-scale * theta * tau * grad v`` and clamp to the domain."""
    if len(mu) == 0:
        return mu
    new = mu.locations - scale * theta * tau * np.asarray(grad_v_at)
    new[:, 0] = np.clip(new[:, 0], 0.0, extent[0])
    new[:, 1] = np.clip(new[:, 1], 0.0, extent[1])
    return DiracMeasure(new, mu.rates.copy())


def sliding_fb_step(problem: InverseProblem, state: State, grads: GradientBundle, value: float,
                    cfg: OptConfig, n: int, tau: float, sigma: float) -> tuple[State, StepInfo]:
    """Transport spikes along ``-grad v`` (with backtracking), then an FB step there.

    ``grads`` and ``value`` are the gradient and objective at ``state``.
    """
    extent = (problem.mesh.lx, problem.mesh.ly)
    g_use = grads
    accepted = False
    if len(state.mu) and np.any(grads.grad_v_at_spikes):
        scale = 1.0
        for _ in range(cfg.slide_max_tries):
            moved = slide(state.mu, grads.grad_v_at_spikes, cfg.theta, tau, extent, scale)
            traj = problem.forward(moved, state.params)
            val = problem.value(moved, state.params, traj).total
            if val <= value:
                accepted = True
                g_use = problem.gradient(moved, state.params, traj)
                state = State(moved, state.params)
                break
            scale *= cfg.slide_shrink
    new_state, info = fb_step(problem, state, g_use, cfg, n, tau, sigma)
    info.slide = accepted
    return new_state, info


# -- merging -----------------------------------------------------------------

def merge_spikes(problem: InverseProblem, state: State, radius: float, tol: float) -> tuple[State, int]:
    """Greedily merge spike pairs closer than ``radius``.

    Pairs are tried by descending distance (ties by index).  The lower-rate
    spike is absorbed into the higher-rate one when the objective grows by
    at most ``tol``.  Data for trial measures come from per-spike unit
    responses, which at fixed ``(k, c)`` is the same as a forward solve.
    """
    mu = state.mu
    m = len(mu)
    if m < 2:
        return state, 0
    locs = mu.locations.copy()
    rates = mu.rates.copy()
    pairs = []
    for i in range(m):
        for j in range(i + 1, m):
            dist = float(np.hypot(*(locs[i] - locs[j])))
            if dist <= radius:
                pairs.append((-dist, i, j))
    if not pairs:
        return state, 0
    pairs.sort()

    params = state.params
    resp = problem.spike_responses(locs, params)
    data = np.tensordot(rates, resp, axes=1)
    reg = problem.reg

    def total(d, r):
        resid = d - problem.b
        return 0.5 * problem.data_weight * float(np.vdot(resid, resid)) + reg.alpha * float(r.sum())

    current = total(data, rates)
    alive = np.ones(m, dtype=bool)
    merges = 0
    for _, i, j in pairs:
        if not (alive[i] and alive[j]):
            continue
        keep, drop = (i, j) if rates[i] >= rates[j] else (j, i)
        trial = data + rates[drop] * (resp[keep] - resp[drop])
        new_rates = rates.copy()
        new_rates[keep] += new_rates[drop]
        new_rates[drop] = 0.0
        val = total(trial, new_rates)
        if val <= current + tol:
            rates, data, current = new_rates, trial, val
            alive[drop] = False
            merges += 1
    if merges == 0:
        return state, 0
    return State(DiracMeasure(locs[alive], rates[alive]), params), merges


# -- driver ------------------------------------------------------------------

@dataclass
class RunResult:
    state: State
    records: list
    tau: float
    lipschitz: float


def run_optimizer(problem: InverseProblem, cfg: OptConfig, variant: str = "sliding",
                  initial: State | None = None, callback=None) -> RunResult:
    if variant not in ("basic", "sliding"):
        raise ValueError(f"unknown variant {variant!r}")
    state = initial or State(DiracMeasure(), problem.initial_params)

    if cfg.tau is not None:
        tau = cfg.tau
        lip = cfg.tau_factor / tau
    else:
        lip = cfg.lipschitz if cfg.lipschitz is not None else problem.lipschitz_measure(state.params)
        tau = cfg.tau_factor / lip
    sigma = cfg.sigma if cfg.sigma is not None else tau

    cpu0 = time.process_time()
    traj = problem.forward(state.mu, state.params)
    obj = problem.value(state.mu, state.params, traj)
    records = [IterationRecord(0, obj.total, 0.0, len(state.mu), 0, state.params.k0, *state.params.c)]
    merge_events = 0
    merge_tol0 = None
    curv_support, curv_mass = 0, 0.0
    sigma_scale = 1.0

    for n in range(cfg.max_outer):
        value = obj.total
        if not math.isfinite(value):
            raise OptimizerError(f"non-finite objective at iteration {n}")
        grads = problem.gradient(state.mu, state.params, traj)

        # the curvature scales like |mu|^2, so a cap computed before spikes
        # appeared or grew is stale; refresh on those events too
        if cfg.sigma_safeguard and not cfg.fix_kc and len(state.mu) and (
                n % cfg.sigma_period == 0 or len(state.mu) != curv_support
                or state.mu.radon_norm > 1.5 * curv_mass):
            curv = problem.lipschitz_kc(traj, state.params)
            curv_support, curv_mass = len(state.mu), state.mu.radon_norm
            base = cfg.sigma if cfg.sigma is not None else tau
            sigma = min(base, cfg.sigma_factor / curv) if curv > 0 else base

        prev_params, prev_sub = state.params, problem.n_sub
        step_sigma = sigma * sigma_scale
        if variant == "sliding" and cfg.slide_max_tries > 0:
            state, info = sliding_fb_step(problem, state, grads, value, cfg, n, tau, step_sigma)
        else:
            state, info = fb_step(problem, state, grads, cfg, n, tau, step_sigma)

        problem.ensure_stable(state.params)
        traj = problem.forward(state.mu, state.params)
        obj = problem.value(state.mu, state.params, traj)
        if cfg.sigma_safeguard and state.params != prev_params and not obj.total <= value + cfg.eps(n):
            # the (k, c) move overshot if the old parameters do better with the new measure
            sub = problem.n_sub
            problem.set_substeps(prev_sub)
            traj_old = problem.forward(state.mu, prev_params)
            obj_old = problem.value(state.mu, prev_params, traj_old)
            if obj_old.total < obj.total:
                state, traj, obj = State(state.mu, prev_params), traj_old, obj_old
                sigma_scale *= 0.5
                log.info("rejected (k, c) step at iteration %d; sigma scale %.3g", n + 1, sigma_scale)
            else:
                problem.set_substeps(sub)
        if problem.n_sub != prev_sub:
            log.info("raised sub-steps to %d at iteration %d", problem.n_sub, n + 1)

        merged = False
        if cfg.merge_period > 0 and (n + 1) % cfg.merge_period == 0 and len(state.mu) > 1:
            cur = problem.value(state.mu, state.params).total
            if merge_tol0 is None:
                merge_tol0 = cfg.merge_tol_factor * cur
            # the tolerance decays with each pass that actually merged something
            tol = merge_tol0 * cfg.merge_tol_decay ** merge_events
            state, count = merge_spikes(problem, state, cfg.merge_radius, tol)
            merged = count > 0
            merge_events += merged
            if merged:
                traj = problem.forward(state.mu, state.params)
                obj = problem.value(state.mu, state.params, traj)
        rec = IterationRecord(
            n + 1, obj.total, time.process_time() - cpu0, len(state.mu), info.inner_iters,
            state.params.k0, *state.params.c, slide=info.slide, merged=merged,
        )
        records.append(rec)
        if callback is not None:
            callback(rec, state)
    if not math.isfinite(obj.total):
        raise OptimizerError("non-finite objective at the final iterate")
    return RunResult(state, records, tau, lip)


def reported_sources(mu: DiracMeasure, floor: float = 1e-3) -> DiracMeasure:
    """Spikes with rate at least ``floor`` times the largest rate."""
    if len(mu) == 0:
        return mu
    keep = mu.rates >= floor * mu.rates.max()
    return DiracMeasure(mu.locations[keep], mu.rates[keep])
