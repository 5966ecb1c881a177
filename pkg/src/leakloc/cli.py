"""Command line front end: ``leakloc run|simulate|check|metrics``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import PRESETS, ConfigError, load_config
from .experiment import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, compute_metrics, read_sources, write_metrics

log = logging.getLogger("leakloc")


def _load(args):
    cfg = load_config(args.config) if args.config else PRESETS["experiment1"]
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["rng_seed"] = args.seed
    if getattr(args, "variant", None):
        updates["variant"] = args.variant
    if getattr(args, "out", None):
        updates["output"] = args.out
    if getattr(args, "iterations", None) is not None:
        updates["optimizer"] = replace(cfg.optimizer, max_outer=args.iterations)
    return replace(cfg, **updates)


def cmd_run(args) -> int:
    from .experiment import run

    cfg = _load(args)
    every = max(1, args.print_every)

    def progress(rec, state):
        if rec.iter % every == 0:
            log.info("iter %d value %.6g spikes %d k0 %.5f c (%.4f, %.4f)",
                     rec.iter, rec.value, rec.n_spikes, rec.k0, rec.c1, rec.c2)

    outcome = run(cfg, callback=progress)
    if outcome.status == EXIT_OK:
        m = outcome.metrics
        print(f"wrote {outcome.outdir}: {len(m.pairs) + len(m.unmatched_reported)} sources, "
              f"final objective {m.final_objective:.6g}")
    else:
        print(f"solver failure, see {outcome.outdir / 'diagnostic.txt'}", file=sys.stderr)
    return outcome.status


def cmd_simulate(args) -> int:
    from .experiment import simulate

    cfg = _load(args)
    setup = simulate(cfg, cfg.output)
    print(f"wrote {cfg.output}: {setup.problem.b.shape[0]} beams x {setup.problem.b.shape[1]} times")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import dot_test, gradient_check, random_state
    from .experiment import build_setup

    cfg = _load(args)
    pb = build_setup(cfg).problem
    gaps = dot_test(pb, pb.initial_params, trials=10, seed=cfg.rng_seed)
    mu, params = random_state(pb, 3, seed=cfg.rng_seed)
    pb.ensure_stable(params)
    g = gradient_check(pb, mu, params, seed=cfg.rng_seed)
    ok_dot = max(gaps) <= 1e-10
    ok_grad = g.worst_exact <= 1e-6 and g.worst_location <= 1e-3
    print(f"adjoint dot test    max gap {max(gaps):.3e}  {'PASS' if ok_dot else 'FAIL'}")
    print(f"gradient k/c/rates  max rel {g.worst_exact:.3e}  {'PASS' if g.worst_exact <= 1e-6 else 'FAIL'}")
    print(f"gradient locations  max rel {g.worst_location:.3e}  {'PASS' if g.worst_location <= 1e-3 else 'FAIL'}")
    return EXIT_OK if ok_dot and ok_grad else EXIT_SOLVER


def cmd_metrics(args) -> int:
    cfg = _load(args)
    reported = read_sources(args.sources)
    m = compute_metrics(reported, cfg.truth.measure())
    if args.out:
        write_metrics(args.out, m)
    for k, v in m.rows():
        print(f"{k},{v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leakloc", description="Point-source leak localisation from laser line integrals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help=f"YAML config file or preset name ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, help="random seed for the synthetic noise")
        sp.add_argument("--out", help=out_help)

    r = sub.add_parser("run", help="simulate data and reconstruct the sources")
    common(r)
    r.add_argument("--variant", choices=("basic", "sliding"))
    r.add_argument("--iterations", type=int, help="override optimizer.max_outer")
    r.add_argument("--print-every", type=int, default=100)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", help="write synthetic data only")
    common(s)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="adjoint dot test and gradient finite-difference check")
    common(c)
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("metrics", help="score a sources.csv against the configured truth")
    common(m, "write metrics CSV here")
    m.add_argument("sources", help="sources.csv with header x,y,rate")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
