"""End-to-end experiments: synthetic data, reconstruction, metrics and output files."""
from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .assembly import OperatorSet, assemble_operators
from .config import ExperimentConfig, dumps
from .forward import InstabilityError, StateTrajectory, simulate_data, write_snapshot
from .measure import DiracMeasure
from .mesh import StructuredMesh, build_mesh
from .observation import ObservationMatrix, assemble_observation, enumerate_beams, write_beam_table
from .optimizer import IterationRecord, OptimizerError, RunResult, reported_sources, run_optimizer
from .problem import InverseProblem

log = logging.getLogger(__name__)

SNAPSHOT_TIMES = (0.0, 0.2, 0.5, 0.7, 1.0)
MATCH_RADIUS = 0.1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2


@dataclass
class Setup:
    """Discretisation, synthetic data and the inverse problem for a config."""

    config: ExperimentConfig
    mesh: StructuredMesh
    ops: OperatorSet
    A: ObservationMatrix
    problem: InverseProblem
    truth_traj: StateTrajectory = field(repr=False)


def build_setup(cfg: ExperimentConfig) -> Setup:
    mesh = build_mesh(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.extent)
    ops = assemble_operators(mesh)
    beams = enumerate_beams(cfg.lasers, cfg.mesh.extent)
    A = assemble_observation(mesh, beams, cfg.lasers.n_seg)
    b, k_t, c_t, traj = simulate_data(
        mesh, ops, A, cfg.truth.params(), cfg.truth.measure(), cfg.time, cfg.noise,
        rng_seed=cfg.rng_seed, mitigate_inverse_crime=cfg.mitigate_inverse_crime,
    )
    problem = InverseProblem(mesh, ops, A, b, cfg.time, cfg.regularization, k_t, c_t)
    if cfg.data_weight is not None:
        problem.data_weight = cfg.data_weight
    elif cfg.optimizer.lipschitz is not None:
        problem.normalize(cfg.optimizer.lipschitz)
    return Setup(cfg, mesh, ops, A, problem, traj)


# -- metrics -----------------------------------------------------------------

@dataclass
class MatchedPair:
    true_index: int
    reported_index: int
    distance: float
    rate_error: float


@dataclass
class RecoveryMetrics:
    pairs: list
    unmatched_reported: list
    unmatched_true: list
    final_objective: float
    total_mass: float
    true_mass: float

    @property
    def total_mass_error(self) -> float:
        """Relative error of the total mass."""
        if self.true_mass == 0:
            return abs(self.total_mass)
        return abs(self.total_mass - self.true_mass) / self.true_mass

    @property
    def max_distance(self) -> float:
        return max((p.distance for p in self.pairs), default=0.0)

    @property
    def max_rate_error(self) -> float:
        return max((p.rate_error for p in self.pairs), default=0.0)

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("n_reported", len(self.pairs) + len(self.unmatched_reported)),
            ("n_true", len(self.pairs) + len(self.unmatched_true)),
            ("n_matched", len(self.pairs)),
            ("unmatched_reported", len(self.unmatched_reported)),
            ("unmatched_true", len(self.unmatched_true)),
            ("final_objective", self.final_objective),
            ("total_mass", self.total_mass),
            ("true_mass", self.true_mass),
            ("total_mass_error", self.total_mass_error),
            ("max_location_error", self.max_distance),
            ("max_rate_error", self.max_rate_error),
        ]
        for p in self.pairs:
            out.append((f"location_error[{p.true_index}]", p.distance))
            out.append((f"rate_error[{p.true_index}]", p.rate_error))
        return out


def compute_metrics(reported: DiracMeasure, truth: DiracMeasure, final_objective: float = math.nan,
                    radius: float = MATCH_RADIUS) -> RecoveryMetrics:
    """Greedy nearest-neighbour matching of reported to true spikes.

    Pairs are taken in order of ascending distance, ties broken by the lower
    true index and then the lower reported index.  Pairs farther apart than
    ``radius`` are never matched.
    """
    nr, nt = len(reported), len(truth)
    cand = []
    for j in range(nt):
        for i in range(nr):
            d = float(np.hypot(*(reported.locations[i] - truth.locations[j])))
            if d <= radius:
                cand.append((d, j, i))
    cand.sort()
    used_r, used_t, pairs = set(), set(), []
    for d, j, i in cand:
        if i in used_r or j in used_t:
            continue
        used_r.add(i)
        used_t.add(j)
        tr = truth.rates[j]
        err = abs(reported.rates[i] - tr) / tr if tr != 0 else abs(reported.rates[i])
        pairs.append(MatchedPair(j, i, d, float(err)))
    pairs.sort(key=lambda p: p.true_index)
    return RecoveryMetrics(
        pairs=pairs,
        unmatched_reported=[i for i in range(nr) if i not in used_r],
        unmatched_true=[j for j in range(nt) if j not in used_t],
        final_objective=float(final_objective),
        total_mass=reported.radon_norm,
        true_mass=truth.radon_norm,
    )


# -- output files --------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IterationRecord.FIELDS)
        for r in records:
            w.writerow([_fmt(v) for v in r.row()])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_sources(path, mu: DiracMeasure) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "rate"))
        for (x, y), r in zip(mu.locations, mu.rates):
            w.writerow((repr(float(x)), repr(float(y)), repr(float(r))))


def read_sources(path) -> DiracMeasure:
    with open(path) as fh:
        lines = fh.read().splitlines()[1:]
    if not any(ln.strip() for ln in lines):
        return DiracMeasure()
    data = np.loadtxt(lines, delimiter=",", ndmin=2)
    return DiracMeasure(data[:, :2], data[:, 2])


def write_metrics(path, metrics: RecoveryMetrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("metric", "value"))
        for k, v in metrics.rows():
            w.writerow((k, _fmt(v)))


def snapshot_index(t: float, spec) -> int:
    i = int(round(t / spec.dt))
    if not 0 <= i <= spec.n_t or abs(i * spec.dt - t) > 1e-9 * max(1.0, spec.T):
        raise ValueError(f"snapshot time {t} is not on the observation grid")
    return i


def write_snapshots(outdir: Path, prefix: str, mesh: StructuredMesh, traj: StateTrajectory, spec,
                    times=SNAPSHOT_TIMES) -> list[Path]:
    paths = []
    for t in times:
        if t > spec.T:
            continue
        i = snapshot_index(t, spec)
        p = outdir / f"{prefix}_t{t:.2f}.txt"
        write_snapshot(p, mesh, traj.coarse[:, i], i * spec.dt)
        paths.append(p)
    return paths


# -- drivers -------------------------------------------------------------------

@dataclass
class RunOutcome:
    status: int
    outdir: Path
    result: RunResult | None = None
    metrics: RecoveryMetrics | None = None


def simulate(cfg: ExperimentConfig, outdir=None) -> Setup:
    """Generate synthetic data and write it with the truth snapshots."""
    setup = build_setup(cfg)
    out = Path(outdir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    pb = setup.problem
    np.savetxt(out / "data.csv", pb.b, delimiter=",", fmt="%.17g")
    with open(out / "measured_params.csv", "w") as fh:
        fh.write("k0,c1,c2\n")
        fh.write(f"{pb.k_tilde!r},{pb.c_tilde[0]!r},{pb.c_tilde[1]!r}\n")
    write_beam_table(out / "beams.txt", setup.A.beams)
    write_snapshots(out, "truth", setup.mesh, setup.truth_traj, cfg.time)
    (out / "config.yaml").write_text(dumps(replace(cfg, output=str(out))))
    return setup


def run(cfg: ExperimentConfig, variant: str | None = None, outdir=None, callback=None) -> RunOutcome:
    """Full experiment; returns exit status 0 on success and 2 on solver failure.

    On failure a ``diagnostic.txt`` with the traceback is written next to
    whatever partial output exists.
    """
    cfg = replace(cfg, variant=variant or cfg.variant, output=str(outdir or cfg.output))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dumps(cfg))

    records: list = []

    def keep(rec, state):
        records.append(rec)
        if callback is not None:
            callback(rec, state)

    try:
        setup = build_setup(cfg)
        write_snapshots(out, "truth", setup.mesh, setup.truth_traj, cfg.time)
        result = run_optimizer(setup.problem, cfg.optimizer, cfg.variant, callback=keep)
        pb = setup.problem
        state = result.state
        traj = pb.forward(state.mu, state.params)
        final = pb.value(state.mu, state.params, traj).total
    except (OptimizerError, InstabilityError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("solver failure: %s", exc)
        with open(out / "diagnostic.txt", "w") as fh:
            fh.write(f"solver failure after {len(records)} iterations: {exc}\n\n")
            fh.write(traceback.format_exc())
            if records:
                last = records[-1]
                fh.write("\nlast record: " + ",".join(_fmt(v) for v in last.row()) + "\n")
        if records:
            write_log(out / "log.csv", records)
        return RunOutcome(EXIT_SOLVER, out)

    write_log(out / "log.csv", result.records)
    reported = reported_sources(state.mu, cfg.optimizer.weight_floor)
    write_sources(out / "sources.csv", reported)
    metrics = compute_metrics(reported, cfg.truth.measure(), final)
    write_metrics(out / "metrics.csv", metrics)
    write_snapshots(out, "recon", setup.mesh, traj, cfg.time)
    with open(out / "final_params.csv", "w") as fh:
        fh.write("k0,c1,c2,data_weight,tau\n")
        p = state.params
        fh.write(f"{p.k0!r},{p.c[0]!r},{p.c[1]!r},{pb.data_weight!r},{result.tau!r}\n")
    return RunOutcome(EXIT_OK, out, result, metrics)
