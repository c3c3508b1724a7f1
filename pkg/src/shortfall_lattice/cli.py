"""Command line front end.

    shortfall-lattice VERB [--config PATH] [--out DIR] [--threads N] ...

Exit status: 0 success, 1 an invariant failed, 2 configuration error,
3 resource or resume error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_RESOURCE = 0, 1, 2, 3
VERBS = ("table1", "table2", "table3", "table4", "diagnostics", "demos", "mc", "resume")

log = logging.getLogger("shortfall_lattice")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortfall-lattice",
                                description="Lattice shortfall-risk tables, diagnostics and "
                                            "Monte Carlo references.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON run configuration (defaults: reference parameters)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (overrides SHORTFALL_THREADS)")
    p.add_argument("--checkpoint", help="checkpoint directory for DP runs")
    p.add_argument("--projection", choices=("ps1", "ps2", "ps3"))
    p.add_argument("--bound", choices=("minus", "plus", "both"), default="both")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--dry-run", action="store_true",
                   help="print state and operation counts without computing")
    p.add_argument("--seed", type=int, help="Monte Carlo seed (unsigned 64-bit)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_threads(flag: int | None, cfg_threads: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("SHORTFALL_THREADS")
    if env:
        return int(env)
    if cfg_threads:
        return cfg_threads
    return os.cpu_count() or 1


def _write_csv(path: Path, table, header_lines) -> None:
    from .tables import _fmt
    with open(path, "w", newline="") as fh:
        for line in header_lines + table.notes:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_fmt(v) for v in row])


def _print_plan(plan, cfg) -> None:
    total_states = sum(r.states for r in plan)
    total_ops = sum(r.ops for r in plan)
    print("n,M,bound,sigma_hi,states,ops,slice_bytes")
    for r in plan:
        print(f"{r.n},{r.M},{r.bound.value},{r.sigma_hi},{r.states},{r.ops},{r.slice_bytes}")
    print(f"# total states {total_states}, total ops {total_ops:.3e}")
    if cfg.mc.paths:
        steps = max(1, round(cfg.params.maturity / cfg.mc.dt))
        print(f"# Monte Carlo: {cfg.mc.paths} paths x {steps} steps")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import config as config_mod

    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
        threads = _resolve_threads(args.threads, cfg.threads)
        if threads < 1:
            raise config_mod.ConfigError("threads must be >= 1")
    except (config_mod.ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    # numba reads its thread ceiling at import time
    os.environ["NUMBA_NUM_THREADS"] = str(threads)

    from dataclasses import replace

    from . import __version__
    from .checkpoint import CheckpointError
    from .dp import Bound
    from .model import Projection
    from .tables import RUNNERS, Context

    try:
        if args.projection:
            cfg = replace(cfg, projection=Projection(args.projection))
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise config_mod.ConfigError("seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, mc=replace(cfg.mc, seed=args.seed))
        verb = args.verb
        resume = verb == "resume"
        checkpoint = args.checkpoint or cfg.checkpoint
        if resume:
            verb = cfg.resume_verb
            if verb not in RUNNERS:
                raise config_mod.ConfigError(f"resume_verb {verb!r} is not a table verb")
            if not checkpoint:
                raise config_mod.ConfigError("resume needs --checkpoint or a checkpoint entry")
        bounds_sel = {"minus": (Bound.MINUS,), "plus": (Bound.PLUS,),
                      "both": (Bound.MINUS, Bound.PLUS)}[args.bound]
        ctx = Context(cfg, bounds_sel, args.precision, threads, checkpoint, resume, args.dry_run)
        tables = RUNNERS[verb](ctx)
    except config_mod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, MemoryError, OSError) as err:
        print(f"resource error: {err}", file=sys.stderr)
        return EXIT_RESOURCE

    if args.dry_run:
        _print_plan(ctx.plan, cfg)
        return EXIT_OK

    out = Path(args.out or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        header = [f"shortfall-lattice {__version__}", f"verb: {verb}",
                  f"config_digest: {cfg.digest()}", f"projection: {cfg.projection.value}",
                  f"seed: {cfg.mc.seed}"]
        for t in tables:
            _write_csv(out / f"{t.name}.csv", t, header)
            log.info("wrote %s", out / f"{t.name}.csv")
        if ctx.dump is not None:
            from .mc import dump_terminals
            dump_terminals(ctx.dump[0], out / "mc_terminals.csv", ctx.dump[1])
    except OSError as err:
        print(f"resource error: {err}", file=sys.stderr)
        return EXIT_RESOURCE

    for t in tables:
        if t.name == "demo_nonconcave":
            for row in t.rows:
                print(f"non-concave example value: {row[1]} (limit model: {row[2]})")
        if t.name == "mc_exit":
            print("orientation: published barrier probabilities correspond to p_no_exit "
                  "with terminal monitoring")
    if ctx.failures:
        for f in ctx.failures:
            print(f"invariant failed: {f}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
