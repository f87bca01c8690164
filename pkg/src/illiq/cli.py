"""Command-line entry point ``illiq``.

Subcommands: simulate, premium, arbitrage, oracle, accept.  Every run writes
its outputs under ``--out`` with a run-unique prefix and appends one JSON
line describing the run to ``manifest.jsonl`` in the same directory.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 oracle
violation, 5 acceptance failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import io
import json
import logging
import os
import sys
import time
import uuid
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .oracle import (DepthError, DiscreteMarket, MartingaleViolation, TreeFormatError,
                     bundled_tree, classify_jump_to_zero, verify_foellmer_identities)
from .scenarios import SpecError, build_scenario

__all__ = ["main", "cmd_simulate", "cmd_premium", "cmd_arbitrage", "cmd_oracle", "cmd_accept",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME", "EXIT_ORACLE", "EXIT_ACCEPT"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ORACLE = 4
EXIT_ACCEPT = 5

MANIFEST = "manifest.jsonl"
SIMULATE_HEADER = "measure,t,alive_fraction,Z_alive_mean,Z_alive_se,S_mean,B_mean,Bcheck_alive_mean"

log = logging.getLogger("illiq")


class _Run:
    """Collects the outputs of one command and writes its manifest line."""

    def __init__(self, command: str, out_dir, extra: Optional[dict] = None):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
        self.run_id = f"{stamp}-{uuid.uuid4().hex[:8]}"
        self.files: list = []
        self.meta = dict(extra or {})
        self.t0 = time.perf_counter()

    def path(self, suffix: str) -> Path:
        return self.out / f"{self.command}-{self.run_id}{suffix}"

    def write(self, suffix: str, text: str) -> Path:
        p = self.path(suffix)
        # newline="" keeps the bytes identical across platforms
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.files.append(p.name)
        return p

    def finish(self, exit_code: int) -> int:
        record = {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "command": self.command,
            "version": __version__,
            "exit_code": exit_code,
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            "outputs": self.files,
        }
        record.update(self.meta)
        with open(self.out / MANIFEST, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return exit_code


def _threads(arg: Optional[int], cfg: Optional[RunConfig] = None) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get("ILLIQ_THREADS"):
        try:
            n = int(os.environ["ILLIQ_THREADS"])
        except ValueError:
            raise ConfigError(f"ILLIQ_THREADS is not an integer: {os.environ['ILLIQ_THREADS']!r}",
                              source="environment") from None
    elif cfg is not None and cfg.threads is not None:
        n = cfg.threads
    else:
        n = 1
    if n < 1:
        raise ConfigError("threads must be at least 1", source="arguments")
    return n


def _load(config_path, seed: Optional[int], paths: Optional[int]) -> RunConfig:
    cfg = load_config(config_path)
    over = {}
    if seed is not None:
        over["seed"] = seed
    if paths is not None:
        over["n_paths"] = paths
    if over:
        try:
            cfg.spec = cfg.spec.with_(**over)
            cfg.spec.validate()
        except SpecError as exc:
            raise ConfigError(exc.message, key=f"--{exc.field.replace('n_paths', 'paths')}",
                              source="arguments") from None
    return cfg


def _ci(ci_level: Optional[float]) -> float:
    ci = 0.95 if ci_level is None else ci_level
    if not 0 < ci < 1:
        raise ConfigError("--ci-level must lie in (0, 1)", source="arguments")
    return ci


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(config_path, out_dir, seed=None, paths=None, threads=None, ci_level=None) -> int:
    """Simulate the scenario under Q and Qcheck and write a per-time summary."""
    cfg = _load(config_path, seed, paths)
    n_threads = _threads(threads, cfg)
    _ci(ci_level)
    sc = build_scenario(cfg.spec)
    grid = cfg.spec.grid()
    run = _Run("simulate", out_dir, {"scenario": cfg.spec.echo(), "seed": cfg.spec.seed,
                                     "grid": grid.summary(), "config": str(config_path)})
    buf = io.StringIO()
    buf.write(SIMULATE_HEADER + "\n")
    problems = {}
    for measure in ("Q", "Qcheck"):
        ms = sc.simulate(measure, grid, cfg.spec.n_paths, cfg.spec.seed, n_threads)
        problems[measure] = ms.invariant_violations()
        alive = ms.alive_mask()
        n = ms.n_paths
        for j, t in enumerate(grid.times):
            a = alive[:, j]
            za = np.where(a, ms.Z[:, j], 0.0)
            bc = ms.Bcheck[a, j]
            row = [
                float(a.mean()), float(za.mean()),
                float(za.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                float(ms.S[:, j].mean()), float(ms.B[:, j].mean()),
                float(bc.mean()) if bc.size else float("nan"),
            ]
            buf.write(f"{measure},{float(t)!r}," + ",".join(repr(v) for v in row) + "\n")
    run.write(".csv", buf.getvalue())
    run.write(".json", json.dumps({"scenario": cfg.spec.echo(), "invariant_problems": problems},
                                  indent=2, sort_keys=True))
    bad = [f"{m}: {p}" for m, ps in problems.items() for p in ps]
    for line in bad:
        print(f"invariant violated: {line}", file=sys.stderr)
    return run.finish(EXIT_RUNTIME if bad else EXIT_OK)


def cmd_premium(config_path, out_dir, t_list=None, T_list=None, seed=None, paths=None,
                threads=None, ci_level=None) -> int:
    """Premium surface CSV plus a JSON summary carrying the four-kind table cell."""
    from .term_structures import premium_surface

    cfg = _load(config_path, seed, paths)
    n_threads = _threads(threads, cfg)
    ci = _ci(ci_level)
    ts = tuple(t_list) if t_list else cfg.premium["t_list"]
    Ts = tuple(T_list) if T_list else cfg.premium["T_list"]
    pairs = [(t, T) for t in ts for T in Ts if t <= T]
    if not pairs:
        raise ConfigError("no (t, T) pair with t <= T", key="premium", source=cfg.source)
    sc = build_scenario(cfg.spec)
    run = _Run("premium", out_dir, {"scenario": cfg.spec.echo(), "seed": cfg.spec.seed,
                                    "grid": cfg.spec.grid().summary(), "config": str(config_path),
                                    "pairs": pairs})
    surf = premium_surface(sc, pairs, cfg.spec.n_paths, cfg.premium["n_outer"],
                           cfg.premium["n_inner"], cfg.spec.seed, threads=n_threads,
                           ci_level=ci, classify=cfg.premium["classify"])
    run.write(".csv", surf.to_csv())
    summary = surf.to_json()
    summary["consistency_problems"] = surf.consistency_problems()
    run.write(".json", json.dumps(summary, indent=2, sort_keys=True))
    if surf.table_cell:
        print(f"table cell: {surf.table_cell['cell']}")
    for (t, T), e in sorted(surf.entries.items()):
        print(f"L({t:g},{T:g}) = {e.L.mean:.6f} +- {e.L.stderr:.6f}")
    return run.finish(EXIT_OK)


def cmd_arbitrage(config_path, out_dir, measure=None, seed=None, paths=None, threads=None,
                  ci_level=None) -> int:
    """Delta-hedge replication; per-path CSV and JSON cluster summary."""
    from .arbitrage import DEFAULT_BUDGETS, admissibility_probe, replicate
    from .paths import TimeGrid

    cfg = _load(config_path, seed, paths)
    n_threads = _threads(threads, cfg)
    _ci(ci_level)
    a = cfg.arbitrage()
    if paths is not None:
        a.n_paths = paths
    meas = measure or a.measure
    if meas not in ("Q", "Qcheck"):
        raise ConfigError(f"unknown measure {meas!r}", key="--measure", source="arguments")
    try:
        grid = TimeGrid.refined(a.T, a.eps_floor, h_max=a.h_max, ratio=a.ratio)
    except ValueError as exc:
        raise ConfigError(str(exc), key="arbitrage", source=cfg.source) from None
    run = _Run("arbitrage", out_dir, {"scenario": cfg.spec.echo(), "seed": cfg.spec.seed,
                                      "grid": grid.summary(), "config": str(config_path),
                                      "measure": meas})
    hr = replicate(meas, a.T, a.n_paths, grid, cfg.spec.seed, threads=n_threads)
    run.write(".csv", hr.to_csv())
    summary = hr.summary()
    if meas == "Q":
        budgets = [b for b in DEFAULT_BUDGETS if b <= hr.n_paths] or [hr.n_paths]
        summary["admissibility"] = admissibility_probe(hr, budgets).as_dict()
    run.write(".json", json.dumps(summary, indent=2, sort_keys=True))
    print(f"{meas}: mean V_T = {hr.mean_V.mean:.6f} +- {hr.mean_V.stderr:.6f}, "
          f"RMS error {hr.rms_error:.5f}, a_T = {hr.a_T:.6f}")
    return run.finish(EXIT_OK)


def cmd_oracle(tree_path, out_dir=None) -> int:
    """Check the Föllmer identities on a tree file; exit 4 on a violation."""
    p = Path(tree_path)
    market = DiscreteMarket.load(p) if p.exists() else bundled_tree(str(tree_path))
    report = verify_foellmer_identities(market)
    print(report.summary())
    if report.ok:
        print(classify_jump_to_zero(market).summary())
    if out_dir is not None:
        run = _Run("oracle", out_dir, {"tree": str(tree_path)})
        run.write(".json", json.dumps({
            "ok": report.ok, "n_checks": report.n_checks, "depth": report.depth,
            "violation": report.violation.describe() if report.violation else None,
            "martingale_problems": report.martingale_problems,
        }, indent=2, sort_keys=True))
        run.finish(EXIT_OK if report.ok else EXIT_ORACLE)
    return EXIT_OK if report.ok else EXIT_ORACLE


def cmd_accept(out_dir, seed=None, threads=None, criteria=None, fault=None) -> int:
    """Run the acceptance criteria; exit 5 if any fails."""
    from .acceptance import format_table, run_all

    n_threads = _threads(threads)
    run = _Run("accept", out_dir, {"seed_shift": seed or 0, "fault": fault,
                                   "criteria": list(criteria) if criteria else "all"})
    results = run_all(seed_shift=seed or 0, threads=n_threads, only=criteria, fault=fault,
                      echo=lambda r: print(r.line(), flush=True))
    table = format_table(results)
    run.write(".txt", table + "\n")
    run.write(".json", json.dumps([r.as_dict() for r in results], indent=2, sort_keys=True))
    failed = [r for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(f"criterion {r.number}" for r in failed), file=sys.stderr)
    return run.finish(EXIT_ACCEPT if failed else EXIT_OK)


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list:
    return [int(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="illiq-out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--paths", type=int, help="override the number of paths")
    common.add_argument("--threads", type=int, help="worker threads (env ILLIQ_THREADS)")
    common.add_argument("--ci-level", type=float, help="confidence level of reported intervals")

    p = argparse.ArgumentParser(prog="illiq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"illiq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a scenario")
    s.add_argument("--config", required=True)

    s = sub.add_parser("premium", parents=[common], help="illiquidity premium surface")
    s.add_argument("--config", required=True)
    s.add_argument("--t", dest="t_list", type=_floats, help="evaluation times, e.g. '0 0.5'")
    s.add_argument("--T", dest="T_list", type=_floats, help="maturities, e.g. '1 2'")

    s = sub.add_parser("arbitrage", parents=[common], help="explicit arbitrage replication")
    s.add_argument("--config", required=True)
    s.add_argument("--measure", choices=("Q", "Qcheck"))

    s = sub.add_parser("oracle", parents=[common], help="exact Föllmer identities on a tree")
    s.add_argument("tree", help="tree file, or the name of a bundled tree")

    s = sub.add_parser("accept", parents=[common], help="run the acceptance criteria")
    s.add_argument("--criteria", type=_ints, help="subset, e.g. '1,7'")
    s.add_argument("--fault", choices=("phi",), help=argparse.SUPPRESS)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    common = dict(seed=args.seed, paths=args.paths, threads=args.threads, ci_level=args.ci_level)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, **common)
        if args.command == "premium":
            return cmd_premium(args.config, args.out, args.t_list, args.T_list, **common)
        if args.command == "arbitrage":
            return cmd_arbitrage(args.config, args.out, args.measure, **common)
        if args.command == "oracle":
            return cmd_oracle(args.tree, args.out)
        if args.command == "accept":
            return cmd_accept(args.out, args.seed, args.threads, args.criteria, args.fault)
    except (ConfigError, SpecError, DepthError, TreeFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MartingaleViolation as exc:
        print(f"oracle violation: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command!r}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
