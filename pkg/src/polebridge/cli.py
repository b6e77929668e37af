"""Command-line entry point.

One subcommand per check (ibp, girsanov, radial, decay, identities, equiv)
plus raw path dumping (simulate).  Experiments are described by a JSON config
file; flags only override the seed, path count, worker count and output
locations, so a config plus a seed fully reproduces a run.

Exit codes: 0 all thresholds pass, 1 statistical-threshold failure,
2 configuration error, 3 simulation failure-budget breach.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import report as report_mod
from . import verify
from .bridge import simulate_bm, simulate_bridge
from .config import CHECKS, ConfigError, RunConfig, load_config
from .verify import SimulationBudgetError

EXIT_PASS = 0
EXIT_STATISTICAL = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


def _experiment_value(config: RunConfig, key: str, default=None, required=False):
    if key in config.experiment:
        return config.experiment[key]
    if required:
        raise ConfigError([f"experiment.{key} is required for this check"])
    return default


def run_experiment(config: RunConfig, check: str | None = None,
                   jobs: int = 1) -> tuple[int, object]:
    """Dispatch a validated config to the verify operation it names.

    Returns (exit_code, report object); the CLI and the library path share
    this function, so both produce identical results.
    """
    check = check or config.experiment.get("check")
    if check not in CHECKS:
        raise ConfigError([f"no check selected; use one of {', '.join(CHECKS)}"])
    geom, grid = config.geometry, config.grid
    n_paths, seed = config.n_paths, config.seed
    r0 = float(_experiment_value(config, "r0", 1.0))

    if check == "ibp":
        f_key = str(_experiment_value(config, "f", required=True))
        g_key = str(_experiment_value(config, "g", "one"))
        h_key = str(_experiment_value(config, "h", required=True))
        rep = verify.ibp_check(geom, f_key, g_key, h_key, n_paths, grid, seed,
                               r0=r0, jobs=jobs)
        return (EXIT_PASS if rep.passed else EXIT_STATISTICAL), rep

    if check == "girsanov":
        t = float(_experiment_value(config, "t", required=True))
        g_key = str(_experiment_value(config, "g", "one"))
        rep = verify.girsanov_check(geom, t, g_key, n_paths, grid, seed,
                                    r0=r0, jobs=jobs)
        mart_ok = abs(rep.extra["mean_M"] - 1.0) < 3.0 * rep.extra["se_M"]
        ok = rep.passed and mart_ok
        return (EXIT_PASS if ok else EXIT_STATISTICAL), rep

    if check == "radial":
        slices = _experiment_value(config, "t_slices", [0.25, 0.5, 0.75])
        reps = verify.radial_law_check(geom, slices, n_paths, grid, seed,
                                       r0=r0, jobs=jobs)
        ok = all(r.passed for r in reps)
        return (EXIT_PASS if ok else EXIT_STATISTICAL), reps

    if check == "decay":
        h_key = str(_experiment_value(config, "h", required=True))
        ts = _experiment_value(config, "ts", [0.9, 0.99, 0.999])
        table = verify.endpoint_decay_check(geom, h_key, ts, n_paths, grid,
                                            seed, r0=r0, jobs=jobs)
        from .pathspace import direction_from_key
        pinned = direction_from_key(h_key, geom.dim).pinned
        ok = table.decreasing if pinned else True
        return (EXIT_PASS if ok else EXIT_STATISTICAL), table

    if check == "identities":
        taus = _experiment_value(config, "ts", [0.1, 0.5, 1.0])
        rng = np.random.default_rng(seed)
        points = []
        for _ in range(50):
            direction = rng.normal(size=geom.dim)
            direction /= np.linalg.norm(direction)
            points.append(rng.uniform(0.1, 4.0) * direction)
        rep = verify.identity_suite(geom, points, taus)
        return (EXIT_PASS if rep.passed else EXIT_STATISTICAL), rep

    if check == "equiv":
        h_key = str(_experiment_value(config, "h", required=True))
        grids = _experiment_value(config, "grids", [250, 500, 1000])
        rep = verify.representation_equiv_check(geom, h_key, n_paths, grids,
                                                seed, r0=r0, jobs=jobs)
        return (EXIT_PASS if rep.monotone else EXIT_STATISTICAL), rep

    if check == "simulate":
        return EXIT_PASS, _dump_paths(config)

    raise ConfigError([f"unhandled check {check!r}"])


def _dump_paths(config: RunConfig) -> str:
    """CSV dump of sample paths: t, coordinates, r, optional frame columns."""
    geom, grid = config.geometry, config.grid
    r0 = float(_experiment_value(config, "r0", 1.0))
    x0 = np.zeros(geom.dim)
    x0[0] = r0
    count = int(config.output.get("dump_paths", 1) or 1)
    with_frames = bool(config.output.get("dump_frames", False))
    kind = config.experiment.get("check_kind", "bridge")
    header = ["path", "t"] + [f"x_{i+1}" for i in range(geom.dim)] + ["r"]
    if with_frames:
        header += [f"u_{i+1}{j+1}" for i in range(geom.dim)
                   for j in range(geom.dim)]
    lines = [",".join(header) + "\n"]
    for index in range(count):
        from .bridge import path_stream
        sim = simulate_bridge if kind == "bridge" else simulate_bm
        sample = sim(geom, x0, grid, path_stream(config.seed, index))
        radii = sample.radii()
        for k, t in enumerate(sample.times):
            row = [str(index), f"{t:.17g}"]
            row += [f"{v:.17g}" for v in sample.points[k]]
            row += [f"{radii[k]:.17g}"]
            if with_frames:
                row += [f"{v:.17g}" for v in sample.frames[k].ravel()]
            lines.append(",".join(row) + "\n")
    return "".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polebridge",
        description="Monte Carlo checks for semi-classical Brownian bridges "
                    "on manifolds with a pole.")
    sub = parser.add_subparsers(dest="check", required=True)
    for name in CHECKS:
        p = sub.add_parser(name, help=f"run the {name} check")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--paths", type=int, default=None,
                       help="override path count")
        p.add_argument("--jobs", type=int,
                       default=int(os.environ.get("POLEBRIDGE_JOBS", "1")),
                       help="worker processes (default: POLEBRIDGE_JOBS or 1)")
        p.add_argument("--json-out", default=None, help="override JSON output path")
        p.add_argument("--csv-out", default=None, help="override CSV output path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            if not (0 <= args.seed < 2**63):
                raise ConfigError(["--seed must lie in [0, 2^63)"])
            config.seed = args.seed
        if args.paths is not None:
            if args.paths < 2:
                raise ConfigError(["--paths must be >= 2"])
            config.n_paths = args.paths
        code, result = run_experiment(config, args.check, jobs=max(1, args.jobs))
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationBudgetError as exc:
        print(f"simulation failure budget breached: {exc}", file=sys.stderr)
        return EXIT_BUDGET

    if args.check == "simulate":
        csv_path = args.csv_out or config.output.get("csv")
        if csv_path:
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write(result)
        else:
            sys.stdout.write(result)
        return code

    json_path = args.json_out or config.output.get("json")
    csv_path = args.csv_out or config.output.get("csv")
    text = report_mod.to_json(result)
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if csv_path:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(report_mod.to_csv(result))
    if code != EXIT_PASS:
        print("statistical threshold failed", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
