"""JSON run configuration: parsing, validation, defaults.

Experiments are configured by file (the reproducibility unit); command-line
flags only override seed, path count, worker count and output paths.
Validation collects every problem it finds rather than stopping at the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import geometry, pathspace
from .bridge import TimeGrid, make_time_grid
from .geometry import GeometryModel

CHECKS = ("ibp", "girsanov", "radial", "decay", "identities", "equiv", "simulate")

_GEOMETRY_KEYS = {"kind", "dim", "c", "a", "profile"}
_SIMULATION_KEYS = {"steps", "eps_end", "refinement", "ratio", "paths", "seed"}
_EXPERIMENT_KEYS = {"check", "f", "g", "h", "t", "t_slices", "ts", "grids", "r0"}
_OUTPUT_KEYS = {"json", "csv", "dump_paths", "dump_frames"}

DEFAULTS = {
    "steps": 1000,
    "eps_end": 1e-4,
    "refinement": "geometric",
    "ratio": 0.9,
    "paths": 10000,
    "seed": 0,
}


class ConfigError(ValueError):
    """Carries the full list of validation errors."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    """Validated configuration: geometry, grid, sampling, experiment, output."""

    geometry: GeometryModel
    grid: TimeGrid
    n_paths: int
    seed: int
    experiment: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _check_unknown(block: dict, allowed: set, name: str, errors: list):
    for key in block:
        if key not in allowed:
            errors.append(f"{name}: unknown key {key!r}; allowed: "
                          f"{', '.join(sorted(allowed))}")


def config_from_dict(data: dict) -> RunConfig:
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["top-level config must be a JSON object"])
    for key in data:
        if key not in ("geometry", "simulation", "experiment", "output"):
            errors.append(f"unknown top-level key {key!r}")

    geo = data.get("geometry", {})
    sim = {**DEFAULTS, **data.get("simulation", {})}
    exp = dict(data.get("experiment", {}))
    out = dict(data.get("output", {}))
    for block, allowed, name in ((geo, _GEOMETRY_KEYS, "geometry"),
                                 (sim, _SIMULATION_KEYS, "simulation"),
                                 (exp, _EXPERIMENT_KEYS, "experiment"),
                                 (out, _OUTPUT_KEYS, "output")):
        if not isinstance(block, dict):
            errors.append(f"{name} block must be an object")
        else:
            _check_unknown(block, allowed, name, errors)
    if errors:
        raise ConfigError(errors)

    geom = None
    kind = geo.get("kind")
    dim = geo.get("dim")
    if kind not in ("euclidean", "hyperbolic", "warped"):
        errors.append(f"geometry.kind must be one of euclidean/hyperbolic/warped, "
                      f"got {kind!r}")
    if not (isinstance(dim, int) and not isinstance(dim, bool) and dim >= 1):
        errors.append("geometry.dim: dimension must be >= 1")
    if not errors:
        try:
            geom = geometry.from_config(kind, dim, c=float(geo.get("c", 1.0)),
                                        a=float(geo.get("a", 0.0)),
                                        profile=geo.get("profile", "cubic"))
        except (geometry.GeometryError, TypeError, ValueError) as exc:
            errors.append(f"geometry: {exc}")

    grid = None
    steps = sim.get("steps")
    eps_end = sim.get("eps_end")
    refinement = sim.get("refinement")
    ratio = sim.get("ratio")
    if not (isinstance(steps, int) and not isinstance(steps, bool) and steps >= 2):
        errors.append("simulation.steps must be an integer >= 2")
    if not (isinstance(eps_end, (int, float)) and 0.0 < eps_end < 0.5):
        errors.append("simulation.eps_end must lie in (0, 0.5)")
    if refinement not in ("uniform", "geometric"):
        errors.append(f"simulation.refinement must be uniform or geometric, "
                      f"got {refinement!r}")
    if not (isinstance(ratio, (int, float)) and 0.0 < ratio < 1.0):
        errors.append("simulation.ratio must lie in (0, 1)")
    if not errors:
        grid = make_time_grid(steps, float(eps_end), refinement, float(ratio))

    n_paths = sim.get("paths")
    seed = sim.get("seed")
    if not (isinstance(n_paths, int) and not isinstance(n_paths, bool) and n_paths >= 2):
        errors.append("simulation.paths must be an integer >= 2")
    if not (isinstance(seed, int) and not isinstance(seed, bool)
            and 0 <= seed < 2**63):
        errors.append("simulation.seed must be an integer in [0, 2^63)")

    check = exp.get("check")
    if check is not None and check not in CHECKS:
        errors.append(f"experiment.check must be one of {', '.join(CHECKS)}, "
                      f"got {check!r}")
    if geom is not None:
        for key in ("f", "g"):
            if key in exp:
                try:
                    pathspace.functional_from_key(str(exp[key]), geom.dim)
                except pathspace.RegistryError as exc:
                    errors.append(f"experiment.{key}: {exc}")
        if "h" in exp:
            try:
                pathspace.direction_from_key(str(exp["h"]), geom.dim)
            except pathspace.RegistryError as exc:
                errors.append(f"experiment.h: {exc}")
    if "t" in exp and not (isinstance(exp["t"], (int, float)) and 0 < exp["t"] < 1):
        errors.append("experiment.t must lie in (0, 1)")
    for key in ("t_slices", "ts"):
        if key in exp:
            vals = exp[key]
            if not (isinstance(vals, list) and vals
                    and all(isinstance(v, (int, float)) and 0 < v < 1 for v in vals)):
                errors.append(f"experiment.{key} must be a nonempty list of "
                              f"times in (0, 1)")
    if "grids" in exp:
        vals = exp["grids"]
        if not (isinstance(vals, list) and vals
                and all(isinstance(v, int) and v >= 2 for v in vals)):
            errors.append("experiment.grids must be a nonempty list of step counts")
    if "r0" in exp and not (isinstance(exp["r0"], (int, float)) and exp["r0"] > 0):
        errors.append("experiment.r0 must be positive")
    if "dump_paths" in out and not (isinstance(out["dump_paths"], int)
                                    and out["dump_paths"] >= 0):
        errors.append("output.dump_paths must be a nonnegative integer")

    if errors:
        raise ConfigError(errors)
    return RunConfig(geometry=geom, grid=grid, n_paths=n_paths, seed=seed,
                     experiment=exp, output=out, raw=data)


def parse_config(text: str) -> RunConfig:
    """Parse JSON text into a validated RunConfig, reporting all errors."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"]) from exc
    return config_from_dict(data)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
